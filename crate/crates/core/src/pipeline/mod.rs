//! End-to-end transfer: guidance maps, initial frame by PatchMatch, patch
//! VQ-VAE, token forecaster, prediction and merging. Every stage reads its
//! inputs from files written by earlier stages into the run directory.

mod config;
mod evaluate;
mod manifest;
mod pad;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

pub use config::{PaddingMode, PathsConfig, PipelineConfig};
pub use evaluate::{evaluate, EvalReport};
pub use manifest::{file_digest, read_manifest, stable_lines, RunManifest, MANIFEST_FILE};
pub use pad::{grid_len, pad_mask, pad_to_grid, CropRecord};

use crate::forecaster::{build_dataset, split_locations, train_forecaster, ForecastError, Forecaster, SamplerConfig};
use crate::imagery::{
    distance_map, load_frame_sequence, load_image, load_mask, save_image, save_mask, FramePattern, FrameSequence,
    ImageryError, RasterImage, SemanticMask,
};
use crate::patch_grid::{cut_patches, merge_patches, PatchError, PatchSet};
use crate::patchmatch::{compute_nnf, synthesize_initial, GuidanceStack, PatchMatchError};
use crate::vqvae::{train_vqvae, LatentGrid, TokenError, TokenStream, Vqvae, VqvaeError, GRID_TOKENS};

/// Run-directory file names.
pub mod artifacts {
    pub const CONFIG: &str = "config.toml";
    pub const SOURCE_MASK: &str = "masks/source.png";
    pub const TARGET_MASK: &str = "masks/target.png";
    pub const SOURCE_DISTANCE: &str = "distance/source.png";
    pub const TARGET_DISTANCE: &str = "distance/target.png";
    pub const NNF: &str = "nnf.dxnf";
    pub const INITIAL_FRAME: &str = "initial.png";
    pub const VQVAE: &str = "vqvae.ckpt";
    pub const VQVAE_LOG: &str = "vqvae_log.txt";
    pub const TOKENS: &str = "tokens.dxtk";
    pub const FORECASTER: &str = "forecaster.ckpt";
    pub const FORECASTER_LOG: &str = "forecaster_log.txt";
    pub const PREDICTED: &str = "predicted.dxtk";
    pub const FRAMES: &str = "frames";
}

/// Output frames always use this naming.
pub const OUTPUT_PATTERN: &str = FramePattern::DEFAULT;

const CODEC_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    DistanceMap,
    TransferInitial,
    TrainVqvae,
    Encode,
    TrainForecaster,
    Predict,
    Merge,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::DistanceMap,
        Stage::TransferInitial,
        Stage::TrainVqvae,
        Stage::Encode,
        Stage::TrainForecaster,
        Stage::Predict,
        Stage::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::DistanceMap => "distance-map",
            Stage::TransferInitial => "transfer-initial",
            Stage::TrainVqvae => "train-vqvae",
            Stage::Encode => "encode",
            Stage::TrainForecaster => "train-forecaster",
            Stage::Predict => "predict",
            Stage::Merge => "merge",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// This stage and every later one.
    pub fn onward(self) -> Vec<Stage> {
        Self::ALL.into_iter().filter(|&s| s >= self).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum StageCause {
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    PatchMatch(#[from] PatchMatchError),
    #[error(transparent)]
    Vqvae(#[from] VqvaeError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Tokens(#[from] TokenError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("source video has {found} frame(s); transfer needs at least two")]
    NeedSubsequentFrames { found: usize },
    #[error("missing artifact {0} (run the earlier stages first)")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: Stage, cause: StageCause },
    #[error("evaluation failed: {0}")]
    Evaluate(#[from] StageCause),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Stage { cause: StageCause::Config(_), .. } => 2,
            _ => 3,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StageCause + '_ {
    move |source| StageCause::Io { path: path.to_path_buf(), source }
}

fn require(path: &Path) -> Result<&Path, StageCause> {
    if path.exists() {
        Ok(path)
    } else {
        Err(StageCause::MissingArtifact(path.to_path_buf()))
    }
}

fn open(path: &Path) -> Result<BufReader<File>, StageCause> {
    Ok(BufReader::new(File::open(require(path)?).map_err(io_at(path))?))
}

fn create(path: &Path) -> Result<BufWriter<File>, StageCause> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), StageCause> {
    w.flush().map_err(io_at(path))
}

fn ensure_parent(path: &Path) -> Result<(), StageCause> {
    match path.parent() {
        Some(parent) => fs::create_dir_all(parent).map_err(io_at(parent)),
        None => Ok(()),
    }
}

/// Source frames padded to the patch grid.
pub(crate) fn load_source(cfg: &PipelineConfig) -> Result<Vec<RasterImage>, StageCause> {
    let seq = load_frame_sequence(&cfg.paths.source_frames, &cfg.paths.frame_pattern)?;
    if seq.frame_count() < 2 {
        return Err(StageCause::NeedSubsequentFrames { found: seq.frame_count() });
    }
    Ok(seq.into_frames().iter().map(|f| pad_to_grid(f, &cfg.patches, cfg.padding).0).collect())
}

/// Patches of every padded source frame, frame by frame.
pub(crate) fn source_patches(cfg: &PipelineConfig) -> Result<Vec<PatchSet>, StageCause> {
    let frames = load_source(cfg)?;
    Ok(frames.iter().map(|f| cut_patches(f, &cfg.patches)).collect::<Result<_, _>>()?)
}

/// `(training, held-out)` patch indices for the VQ-VAE.
pub(crate) fn vqvae_split(count: usize, cfg: &PipelineConfig) -> (Vec<usize>, Vec<usize>) {
    split_locations(count, cfg.vqvae_holdout, cfg.vqvae.seed)
}

fn load_vqvae(dir: &Path, cfg: &PipelineConfig, channels: usize) -> Result<Vqvae, StageCause> {
    Ok(Vqvae::load(cfg.vqvae.clone(), channels, open(&dir.join(artifacts::VQVAE))?)?)
}

fn encode_all(model: &Vqvae, patches: &[&[f64]]) -> Result<Vec<LatentGrid>, StageCause> {
    let mut grids = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(CODEC_CHUNK) {
        grids.extend(model.encode_to_grids(chunk)?);
    }
    Ok(grids)
}

fn guidance(dir: &Path, mask: &str, distance: &str, weights: (f64, f64)) -> Result<GuidanceStack, StageCause> {
    let mask = load_mask(require(&dir.join(mask))?)?;
    let dist = load_image(require(&dir.join(distance))?)?;
    if (dist.height(), dist.width()) != (mask.height(), mask.width()) || dist.channels() != 1 {
        return Err(StageCause::Mismatch(format!("distance map {distance} does not match its mask")));
    }
    let channels = mask.data().iter().zip(dist.data()).map(|(&m, &d)| [f64::from(m), d]).collect();
    Ok(GuidanceStack::from_channels(mask.height(), mask.width(), channels, weights)?)
}

fn padded_dims(dir: &Path, which: &str) -> Result<(usize, usize), StageCause> {
    let m = load_mask(require(&dir.join(which))?)?;
    Ok((m.height(), m.width()))
}

fn target_mask(cfg: &PipelineConfig) -> Result<SemanticMask, StageCause> {
    Ok(load_mask(&cfg.paths.target_mask)?)
}

/// Result of [`run_stages`].
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    /// Output frames when the merge stage ran.
    pub frames: Option<FrameSequence>,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

struct Run<'a> {
    cfg: PipelineConfig,
    dir: PathBuf,
    manifest: RunManifest,
    pool: rayon::ThreadPool,
    log: &'a mut dyn FnMut(&str),
    frames: Option<FrameSequence>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn digest(&mut self, name: &str) -> Result<(), StageCause> {
        let path = self.path(name);
        let d = file_digest(&path).map_err(io_at(&path))?;
        self.manifest.digests.insert(name.to_string(), d);
        Ok(())
    }

    fn stage(&mut self, stage: Stage) -> Result<(), StageCause> {
        match stage {
            Stage::DistanceMap => self.distance_map(),
            Stage::TransferInitial => self.transfer_initial(),
            Stage::TrainVqvae => self.train_vqvae(),
            Stage::Encode => self.encode(),
            Stage::TrainForecaster => self.train_forecaster(),
            Stage::Predict => self.predict(),
            Stage::Merge => self.merge(),
        }
    }

    fn distance_map(&mut self) -> Result<(), StageCause> {
        let cfg = &self.cfg;
        let source = load_frame_sequence(&cfg.paths.source_frames, &cfg.paths.frame_pattern)?;
        if source.frame_count() < 2 {
            return Err(StageCause::NeedSubsequentFrames { found: source.frame_count() });
        }
        let smask = load_mask(&cfg.paths.source_mask)?;
        let (h, w, _) = source.dims();
        if (smask.height(), smask.width()) != (h, w) {
            return Err(StageCause::Mismatch(format!(
                "source mask is {}x{} but frames are {h}x{w}",
                smask.height(),
                smask.width()
            )));
        }
        let tmask = target_mask(cfg)?;
        let outputs = [
            (smask, artifacts::SOURCE_MASK, artifacts::SOURCE_DISTANCE),
            (tmask, artifacts::TARGET_MASK, artifacts::TARGET_DISTANCE),
        ];
        for (mask, mask_name, dist_name) in outputs {
            let (padded, _) = pad_mask(&mask, &self.cfg.patches, self.cfg.padding);
            let (mask_path, dist_path) = (self.path(mask_name), self.path(dist_name));
            ensure_parent(&mask_path)?;
            ensure_parent(&dist_path)?;
            save_mask(&mask_path, &padded)?;
            distance_map(&padded)?.save_png16(&dist_path)?;
            self.digest(mask_name)?;
            self.digest(dist_name)?;
        }
        self.manifest.set_metric(Stage::DistanceMap, "source_frames", source.frame_count() as f64);
        Ok(())
    }

    fn transfer_initial(&mut self) -> Result<(), StageCause> {
        let weights = self.cfg.patchmatch.weights();
        let source = guidance(&self.dir, artifacts::SOURCE_MASK, artifacts::SOURCE_DISTANCE, weights)?;
        let target = guidance(&self.dir, artifacts::TARGET_MASK, artifacts::TARGET_DISTANCE, weights)?;
        let style = load_source(&self.cfg)?.swap_remove(0);
        if (style.height(), style.width()) != (source.height(), source.width()) {
            return Err(StageCause::Mismatch("padded source frame and source mask differ in size".into()));
        }
        let mut costs = Vec::new();
        let nnf = compute_nnf(&source, &target, &self.cfg.patchmatch, |n| costs.push(n.total_cost()))?;
        let nnf_path = self.path(artifacts::NNF);
        let mut w = create(&nnf_path)?;
        nnf.write_dump(&mut w)?;
        finish(w, &nnf_path)?;
        let initial = synthesize_initial(&style, &nnf, self.cfg.merge.sigma)?;
        save_image(&self.path(artifacts::INITIAL_FRAME), &initial)?;
        self.digest(artifacts::NNF)?;
        self.digest(artifacts::INITIAL_FRAME)?;
        let m = &mut self.manifest;
        m.set_metric(Stage::TransferInitial, "nnf_initial_cost", costs[0]);
        m.set_metric(Stage::TransferInitial, "nnf_final_cost", nnf.total_cost());
        m.set_metric(Stage::TransferInitial, "nnf_mean_cost", nnf.total_cost() / nnf.costs().len() as f64);
        Ok(())
    }

    fn train_vqvae(&mut self) -> Result<(), StageCause> {
        let sets = source_patches(&self.cfg)?;
        let channels = sets[0].channels();
        let all: Vec<&[f64]> = sets.iter().flat_map(|s| (0..s.len()).map(move |i| s.patch(i))).collect();
        let (train_idx, held_idx) = vqvae_split(all.len(), &self.cfg);
        let train: Vec<&[f64]> = train_idx.iter().map(|&i| all[i]).collect();
        let held: Vec<&[f64]> = held_idx.iter().map(|&i| all[i]).collect();
        (self.log)(&format!("train-vqvae: {} training patches, {} held out", train.len(), held.len()));
        let log_path = self.path(artifacts::VQVAE_LOG);
        let mut log_file = create(&log_path)?;
        let mut write_err = None;
        let every = (self.cfg.vqvae.steps / 10).max(1);
        let log = &mut self.log;
        let trained = train_vqvae(&train, channels, &self.cfg.vqvae, |e| {
            if let Err(err) = writeln!(log_file, "{}", e.line()) {
                write_err.get_or_insert(err);
            }
            if e.step % every == 0 {
                log(&format!("train-vqvae: {}", e.line()));
            }
        })?;
        if let Some(err) = write_err {
            return Err(StageCause::Io { path: log_path, source: err });
        }
        finish(log_file, &log_path)?;
        let ckpt_path = self.path(artifacts::VQVAE);
        let mut w = create(&ckpt_path)?;
        trained.model.save(&mut w)?;
        finish(w, &ckpt_path)?;
        self.digest(artifacts::VQVAE)?;
        self.digest(artifacts::VQVAE_LOG)?;
        let last = trained.log.last().map(|e| e.loss);
        let m = &mut self.manifest;
        if let Some(l) = last {
            m.set_metric(Stage::TrainVqvae, "final_loss", l.total);
            m.set_metric(Stage::TrainVqvae, "final_recon", l.recon);
        }
        m.set_metric(Stage::TrainVqvae, "train_mse", trained.model.reconstruction_mse(&train)?);
        if !held.is_empty() {
            m.set_metric(Stage::TrainVqvae, "heldout_mse", trained.model.reconstruction_mse(&held)?);
        }
        m.set_metric(Stage::TrainVqvae, "codes_used", trained.usage.iter().filter(|&&u| u > 0).count() as f64);
        Ok(())
    }

    fn encode(&mut self) -> Result<(), StageCause> {
        let sets = source_patches(&self.cfg)?;
        let model = load_vqvae(&self.dir, &self.cfg, sets[0].channels())?;
        let locations = sets[0].len();
        let mut grids = vec![Vec::with_capacity(sets.len()); locations];
        for set in &sets {
            let patches: Vec<&[f64]> = (0..set.len()).map(|i| set.patch(i)).collect();
            for (loc, g) in encode_all(&model, &patches)?.into_iter().enumerate() {
                grids[loc].push(g);
            }
        }
        let stream = TokenStream { codebook_size: self.cfg.vqvae.codebook_size, grids };
        let path = self.path(artifacts::TOKENS);
        let mut w = create(&path)?;
        stream.write(&mut w)?;
        finish(w, &path)?;
        self.digest(artifacts::TOKENS)?;
        self.manifest.set_metric(Stage::Encode, "locations", locations as f64);
        self.manifest.set_metric(Stage::Encode, "frames", sets.len() as f64);
        Ok(())
    }

    fn train_forecaster(&mut self) -> Result<(), StageCause> {
        let stream = TokenStream::read(open(&self.path(artifacts::TOKENS))?)?;
        let frames = stream.frames()?;
        let needed = frames * GRID_TOKENS;
        if needed > self.cfg.forecaster.max_len {
            return Err(StageCause::Config(format!(
                "{frames} frames need {needed} tokens but forecaster.max_len is {}",
                self.cfg.forecaster.max_len
            )));
        }
        let (h, w) = padded_dims(&self.dir, artifacts::SOURCE_MASK)?;
        let origins = self.cfg.patches.origins(h, w)?;
        let dataset = build_dataset(&stream, &origins)?;
        (self.log)(&format!("train-forecaster: {} sequences of {frames} frames", dataset.len()));
        let log_path = self.path(artifacts::FORECASTER_LOG);
        let mut log_file = create(&log_path)?;
        let mut write_err = None;
        let log = &mut self.log;
        let trained = train_forecaster(&dataset, &self.cfg.forecaster, |e| {
            if let Err(err) = writeln!(log_file, "{}", e.line()) {
                write_err.get_or_insert(err);
            }
            log(&format!("train-forecaster: {}", e.line()));
        })?;
        if let Some(err) = write_err {
            return Err(StageCause::Io { path: log_path, source: err });
        }
        finish(log_file, &log_path)?;
        let ckpt_path = self.path(artifacts::FORECASTER);
        let mut out = create(&ckpt_path)?;
        trained.model.save(&mut out)?;
        finish(out, &ckpt_path)?;
        self.digest(artifacts::FORECASTER)?;
        self.digest(artifacts::FORECASTER_LOG)?;
        let m = &mut self.manifest;
        m.set_metric(Stage::TrainForecaster, "validation_accuracy", trained.validation_accuracy);
        if let Some(e) = trained.log.last() {
            m.set_metric(Stage::TrainForecaster, "final_loss", e.loss);
        }
        Ok(())
    }

    fn predict(&mut self) -> Result<(), StageCause> {
        let frames = TokenStream::read(open(&self.path(artifacts::TOKENS))?)?.frames()?;
        let initial = load_image(require(&self.path(artifacts::INITIAL_FRAME))?)?;
        let vqvae = load_vqvae(&self.dir, &self.cfg, initial.channels())?;
        let forecaster = Forecaster::load(self.cfg.forecaster.clone(), open(&self.path(artifacts::FORECASTER))?)?;
        let set = cut_patches(&initial, &self.cfg.patches)?;
        let patches: Vec<&[f64]> = (0..set.len()).map(|i| set.patch(i)).collect();
        let first = encode_all(&vqvae, &patches)?;
        let sampler = self.cfg.sampler;
        let vocab = self.cfg.forecaster.vocab;
        let grids: Vec<Vec<LatentGrid>> = self.pool.install(|| {
            first
                .par_iter()
                .enumerate()
                .map(|(loc, grid)| {
                    let s = SamplerConfig { seed: sampler.seed.wrapping_add(loc as u64), ..sampler };
                    let seq = forecaster.predict(grid, frames - 1, &s)?;
                    (0..frames).map(|f| Ok(seq.grid(f, vocab)?)).collect::<Result<Vec<_>, StageCause>>()
                })
                .collect::<Result<_, StageCause>>()
        })?;
        let stream = TokenStream { codebook_size: self.cfg.vqvae.codebook_size, grids };
        let path = self.path(artifacts::PREDICTED);
        let mut w = create(&path)?;
        stream.write(&mut w)?;
        finish(w, &path)?;
        self.digest(artifacts::PREDICTED)?;
        self.manifest.set_metric(Stage::Predict, "locations", first.len() as f64);
        Ok(())
    }

    fn merge(&mut self) -> Result<(), StageCause> {
        let stream = TokenStream::read(open(&self.path(artifacts::PREDICTED))?)?;
        let frames = stream.frames()?;
        let initial = load_image(require(&self.path(artifacts::INITIAL_FRAME))?)?;
        let vqvae = load_vqvae(&self.dir, &self.cfg, initial.channels())?;
        let (ph, pw) = (initial.height(), initial.width());
        let origins = self.cfg.patches.origins(ph, pw)?;
        if origins.len() != stream.locations() {
            return Err(StageCause::Mismatch(format!(
                "{} predicted locations for {} target patches",
                stream.locations(),
                origins.len()
            )));
        }
        let tmask = target_mask(&self.cfg)?;
        let crop = CropRecord { height: tmask.height(), width: tmask.width() };
        let (spec, merge_cfg, channels) = (self.cfg.patches, self.cfg.merge, initial.channels());
        let later: Vec<RasterImage> = self.pool.install(|| {
            (1..frames)
                .into_par_iter()
                .map(|f| {
                    let grids: Vec<LatentGrid> = stream.grids.iter().map(|g| g[f]).collect();
                    let mut values = Vec::with_capacity(grids.len() * spec.patch_size * spec.patch_size * channels);
                    for chunk in grids.chunks(CODEC_CHUNK) {
                        values.extend(vqvae.indices_to_patches(chunk)?.into_iter().flatten());
                    }
                    let set = PatchSet::new(spec.patch_size, channels, (ph, pw), origins.clone(), values)?;
                    Ok(crop.apply(&merge_patches(&set, &spec, &merge_cfg)?))
                })
                .collect::<Result<_, StageCause>>()
        })?;
        let mut out = vec![crop.apply(&initial)];
        out.extend(later);
        let seq = FrameSequence::new(out)?;
        let frame_dir = self.path(artifacts::FRAMES);
        if frame_dir.exists() {
            fs::remove_dir_all(&frame_dir).map_err(io_at(&frame_dir))?;
        }
        let pattern = FramePattern::parse(OUTPUT_PATTERN)?;
        crate::imagery::save_frame_sequence(&frame_dir, OUTPUT_PATTERN, &seq)?;
        for i in 0..seq.frame_count() {
            self.digest(&format!("{}/{}", artifacts::FRAMES, pattern.format(i)))?;
        }
        self.manifest.set_metric(Stage::Merge, "frames", seq.frame_count() as f64);
        self.frames = Some(seq);
        Ok(())
    }
}

/// Runs `stages` in order against the run directory `config.paths.output`
/// and writes `manifest.txt` there, also when a stage fails. `log` receives
/// progress lines.
pub fn run_stages(config: &PipelineConfig, stages: &[Stage], log: &mut dyn FnMut(&str)) -> Result<TransferOutcome, PipelineError> {
    config.validate()?;
    let mut stages = stages.to_vec();
    stages.sort_unstable();
    stages.dedup();
    let dir = config.paths.output.clone();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut snapshot = config.clone();
    snapshot.paths.output = PathBuf::from(".");
    for p in [&mut snapshot.paths.source_frames, &mut snapshot.paths.source_mask, &mut snapshot.paths.target_mask] {
        if let Ok(abs) = fs::canonicalize(&*p) {
            *p = abs;
        }
    }
    let config_path = dir.join(artifacts::CONFIG);
    fs::write(&config_path, snapshot.to_toml()).map_err(io_err(&config_path))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start {} threads: {e}", config.threads)))?;
    let mut run = Run {
        cfg: config.effective(),
        dir: dir.clone(),
        manifest: RunManifest::new(config, &stages),
        pool,
        log,
        frames: None,
    };
    for &stage in &stages {
        (run.log)(&format!("{stage}: start"));
        let start = Instant::now();
        if let Err(cause) = run.stage(stage) {
            run.manifest.failure = Some((stage, cause.to_string()));
            run.manifest.write(&dir).map_err(io_err(&dir.join(MANIFEST_FILE)))?;
            return Err(PipelineError::Stage { stage, cause });
        }
        let secs = start.elapsed().as_secs_f64();
        run.manifest.timings.push((stage, secs));
        (run.log)(&format!("{stage}: done in {secs:.1}s"));
    }
    run.manifest.write(&dir).map_err(io_err(&dir.join(MANIFEST_FILE)))?;
    Ok(TransferOutcome { frames: run.frames, manifest: run.manifest, dir })
}

/// Every stage, start to finish.
pub fn run_transfer(config: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<(FrameSequence, RunManifest), PipelineError> {
    let out = run_stages(config, &Stage::ALL, log)?;
    Ok((out.frames.expect("merge stage ran"), out.manifest))
}
