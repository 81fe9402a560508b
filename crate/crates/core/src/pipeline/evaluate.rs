use std::fmt;
use std::path::Path;

use crate::forecaster::{accuracy, build_dataset, split_locations, Forecaster};
use crate::imagery::{load_frame_sequence, RasterImage};
use crate::patchmatch::NearestNeighborField;
use crate::vqvae::TokenStream;

use super::{artifacts, load_vqvae, open, padded_dims, require, source_patches, vqvae_split};
use super::{PipelineConfig, PipelineError, StageCause, OUTPUT_PATTERN};

/// Quality figures of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent of validation next-token predictions that are correct.
    pub forecaster_accuracy: f64,
    /// Reconstruction MSE on held-out source patches, or on all of them when
    /// nothing was held out.
    pub vqvae_heldout_mse: f64,
    pub vqvae_holdout_empty: bool,
    pub nnf_mean_cost: f64,
    /// Mean absolute per-pixel change between consecutive output frames.
    pub temporal_delta_output: f64,
    /// The same statistic on the source video.
    pub temporal_delta_source: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "forecaster_accuracy = {:.4}", self.forecaster_accuracy)?;
        let label = if self.vqvae_holdout_empty { "vqvae_train_mse" } else { "vqvae_heldout_mse" };
        writeln!(f, "{label} = {:.6}", self.vqvae_heldout_mse)?;
        writeln!(f, "nnf_mean_cost = {:.6}", self.nnf_mean_cost)?;
        writeln!(f, "temporal_delta_output = {:.6}", self.temporal_delta_output)?;
        write!(f, "temporal_delta_source = {:.6}", self.temporal_delta_source)
    }
}

pub(crate) fn temporal_delta(frames: &[RasterImage]) -> f64 {
    let pairs = frames.windows(2);
    let n = pairs.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = pairs
        .map(|w| {
            let (a, b) = (w[0].data(), w[1].data());
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        })
        .sum();
    total / n as f64
}

/// Recomputes the report from the artifacts in `run_dir`.
pub fn evaluate(run_dir: &Path) -> Result<EvalReport, PipelineError> {
    let config_path = run_dir.join(artifacts::CONFIG);
    require(&config_path)?;
    let cfg = PipelineConfig::load(&config_path)?.effective();

    let stream = TokenStream::read(open(&run_dir.join(artifacts::TOKENS))?).map_err(StageCause::from)?;
    let (h, w) = padded_dims(run_dir, artifacts::SOURCE_MASK)?;
    let origins = cfg.patches.origins(h, w).map_err(StageCause::from)?;
    let dataset = build_dataset(&stream, &origins).map_err(StageCause::from)?;
    let forecaster =
        Forecaster::load(cfg.forecaster.clone(), open(&run_dir.join(artifacts::FORECASTER))?).map_err(StageCause::from)?;
    let (train_idx, val_idx) = split_locations(dataset.len(), cfg.forecaster.val_fraction, cfg.forecaster.seed);
    let picked = if val_idx.is_empty() { train_idx } else { val_idx };
    let validation: Vec<_> = picked.iter().map(|&i| dataset[i].clone()).collect();
    let forecaster_accuracy = accuracy(&forecaster, &validation).map_err(StageCause::from)?;

    let sets = source_patches(&cfg)?;
    let vqvae = load_vqvae(run_dir, &cfg, sets[0].channels())?;
    let all: Vec<&[f64]> = sets.iter().flat_map(|s| (0..s.len()).map(move |i| s.patch(i))).collect();
    let (train_idx, held_idx) = vqvae_split(all.len(), &cfg);
    let vqvae_holdout_empty = held_idx.is_empty();
    let picked = if vqvae_holdout_empty { train_idx } else { held_idx };
    let patches: Vec<&[f64]> = picked.iter().map(|&i| all[i]).collect();
    let vqvae_heldout_mse = vqvae.reconstruction_mse(&patches).map_err(StageCause::from)?;

    let (_, _, _, entries) =
        NearestNeighborField::read_dump(&mut open(&run_dir.join(artifacts::NNF))?).map_err(StageCause::from)?;
    let nnf_mean_cost = entries.iter().map(|e| f64::from(e.2)).sum::<f64>() / entries.len().max(1) as f64;

    let frame_dir = run_dir.join(artifacts::FRAMES);
    require(&frame_dir)?;
    let output = load_frame_sequence(&frame_dir, OUTPUT_PATTERN).map_err(StageCause::from)?;
    let source = load_frame_sequence(&cfg.paths.source_frames, &cfg.paths.frame_pattern).map_err(StageCause::from)?;

    Ok(EvalReport {
        forecaster_accuracy,
        vqvae_heldout_mse,
        vqvae_holdout_empty,
        nnf_mean_cost,
        temporal_delta_output: temporal_delta(output.frames()),
        temporal_delta_source: temporal_delta(source.frames()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_delta_of_a_ramp() {
        let frames: Vec<RasterImage> = (0..4).map(|i| RasterImage::filled(2, 2, 1, i as f64 * 0.1).unwrap()).collect();
        assert!((temporal_delta(&frames) - 0.1).abs() < 1e-12);
        assert_eq!(temporal_delta(&frames[..1]), 0.0);
    }

    #[test]
    fn missing_run_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = evaluate(dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Evaluate(StageCause::MissingArtifact(_))), "{err}");
    }
}
