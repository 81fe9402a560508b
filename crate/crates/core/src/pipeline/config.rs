use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::forecaster::{ForecasterConfig, SamplerConfig};
use crate::imagery::FramePattern;
use crate::patch_grid::{MergeConfig, PatchSpec};
use crate::patchmatch::PatchMatchConfig;
use crate::vqvae::{VqvaeConfig, PATCH_SIDE};

use super::PipelineError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding the source video frames.
    pub source_frames: PathBuf,
    pub frame_pattern: String,
    pub source_mask: PathBuf,
    pub target_mask: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            source_frames: PathBuf::from("source"),
            frame_pattern: FramePattern::DEFAULT.to_string(),
            source_mask: PathBuf::from("source_mask.png"),
            target_mask: PathBuf::from("target_mask.png"),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaddingMode {
    /// Mirror about the last row/column without repeating it.
    #[default]
    Reflect,
    /// Repeat the last row/column.
    Replicate,
}

/// Everything a transfer run needs. Component seeds are offsets: the value
/// actually used is `component seed + rng_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    /// Worker threads for prediction and merging; 1 is the reference mode.
    pub threads: usize,
    pub padding: PaddingMode,
    /// Fraction of source patches kept out of VQ-VAE training and used for
    /// the held-out reconstruction metric.
    pub vqvae_holdout: f64,
    pub paths: PathsConfig,
    pub patchmatch: PatchMatchConfig,
    pub patches: PatchSpec,
    pub merge: MergeConfig,
    pub vqvae: VqvaeConfig,
    pub forecaster: ForecasterConfig,
    pub sampler: SamplerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            threads: 1,
            padding: PaddingMode::Reflect,
            vqvae_holdout: 0.1,
            paths: PathsConfig::default(),
            patchmatch: PatchMatchConfig::default(),
            patches: PatchSpec { patch_size: PATCH_SIDE, stride: 4 },
            merge: MergeConfig::default(),
            vqvae: VqvaeConfig::default(),
            forecaster: ForecasterConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    /// Makes every relative path relative to `base` instead.
    pub fn rebase(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.source_frames, &mut p.source_mask, &mut p.target_mask, &mut p.output] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    /// Checks ranges and cross-field consistency without touching the disk.
    pub fn validate_values(&self) -> Result<(), PipelineError> {
        if self.threads == 0 {
            return Err(config_err("threads must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.vqvae_holdout) {
            return Err(config_err(format!("vqvae_holdout {} outside [0, 1)", self.vqvae_holdout)));
        }
        FramePattern::parse(&self.paths.frame_pattern).map_err(|e| config_err(e.to_string()))?;
        self.patchmatch.validate().map_err(|e| config_err(e.to_string()))?;
        self.patches.validate().map_err(|e| config_err(e.to_string()))?;
        if self.patches.patch_size != PATCH_SIDE {
            return Err(config_err(format!("patches.patch_size must be {PATCH_SIDE}, got {}", self.patches.patch_size)));
        }
        self.merge.validate().map_err(|e| config_err(e.to_string()))?;
        self.vqvae.validate().map_err(|e| config_err(e.to_string()))?;
        self.forecaster.validate().map_err(|e| config_err(e.to_string()))?;
        if self.forecaster.vocab != self.vqvae.codebook_size {
            return Err(config_err(format!(
                "forecaster.vocab {} differs from vqvae.codebook_size {}",
                self.forecaster.vocab, self.vqvae.codebook_size
            )));
        }
        if self.sampler.temperature.is_nan() || self.sampler.temperature <= 0.0 {
            return Err(config_err(format!("sampler.temperature {} must be positive", self.sampler.temperature)));
        }
        Ok(())
    }

    /// [`validate_values`](Self::validate_values) plus existence of every
    /// input path.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.validate_values()?;
        let p = &self.paths;
        if !p.source_frames.is_dir() {
            return Err(config_err(format!("source frame directory {} not found", p.source_frames.display())));
        }
        for (what, path) in [("source mask", &p.source_mask), ("target mask", &p.target_mask)] {
            if !path.is_file() {
                return Err(config_err(format!("{what} {} not found", path.display())));
            }
        }
        Ok(())
    }

    /// The configuration with every component seed resolved against
    /// `rng_seed`.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.patchmatch.rng_seed = c.patchmatch.rng_seed.wrapping_add(self.rng_seed);
        c.vqvae.seed = c.vqvae.seed.wrapping_add(self.rng_seed);
        c.forecaster.seed = c.forecaster.seed.wrapping_add(self.rng_seed);
        c.sampler.seed = c.sampler.seed.wrapping_add(self.rng_seed);
        c
    }

    /// `(name, value)` for every resolved seed.
    pub fn seeds(&self) -> [(&'static str, u64); 5] {
        let e = self.effective();
        [
            ("global", self.rng_seed),
            ("patchmatch", e.patchmatch.rng_seed),
            ("vqvae", e.vqvae.seed),
            ("forecaster", e.forecaster.seed),
            ("sampler", e.sampler.seed),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = PipelineConfig::default();
        c.validate_values().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.patches.stride, 4);
        assert_eq!((c.forecaster.layers, c.forecaster.heads, c.forecaster.d_model), (6, 8, 128));
        assert_eq!(c.forecaster.lr, 2.5e-6);
        assert_eq!((c.vqvae.codebook_size, c.vqvae.embedding_dim, c.vqvae.beta), (256, 64, 0.25));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("rng_sed = 3\n").unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
        let err = PipelineConfig::from_toml("[vqvae]\nbeta = 0.3\ngamma = 1\n").unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn sections_override_defaults() {
        let c = PipelineConfig::from_toml("rng_seed = 9\n[patches]\nstride = 2\n[forecaster]\nlayers = 3\nheads = 4\n").unwrap();
        assert_eq!(c.patches, PatchSpec { patch_size: 16, stride: 2 });
        assert_eq!((c.forecaster.layers, c.forecaster.heads, c.forecaster.d_model), (3, 4, 128));
        assert_eq!(c.effective().vqvae.seed, 9);
    }

    #[test]
    fn range_errors() {
        let bad = |f: fn(&mut PipelineConfig)| {
            let mut c = PipelineConfig::default();
            f(&mut c);
            c.validate_values().unwrap_err()
        };
        bad(|c| c.threads = 0);
        bad(|c| c.vqvae_holdout = 1.0);
        bad(|c| c.patches.patch_size = 8);
        bad(|c| c.forecaster.vocab = 128);
        bad(|c| c.merge.sigma = 0.0);
        bad(|c| c.paths.frame_pattern = "frames.png".into());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\nsource_mask = \"m.png\"\noutput = \"/abs/out\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.paths.source_mask, dir.path().join("m.png"));
        assert_eq!(c.paths.output, PathBuf::from("/abs/out"));
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    }
}
