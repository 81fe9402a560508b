//! Guidance-driven PatchMatch for the stylized initial frame.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagery::{distance_map, DistanceField, ImageryError, RasterImage, SemanticMask};
use crate::patch_grid::{merge_patches, MergeConfig, PatchError, PatchSet, PatchSpec};

#[derive(Debug, Error)]
pub enum PatchMatchError {
    #[error("semantic map {0:?} and distance field {1:?} differ in size")]
    GuidanceDims((usize, usize), (usize, usize)),
    #[error("channel weights must be non-negative with a positive sum, got {0:?}")]
    Weights((f64, f64)),
    #[error("image {height}x{width} is smaller than patch size {patch_size}")]
    TooSmall { height: usize, width: usize, patch_size: usize },
    #[error("window at {origin:?} with size {patch_size} leaves the {height}x{width} image")]
    OutOfBounds { origin: (usize, usize), patch_size: usize, height: usize, width: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("style frame is {found:?}, expected {expected:?}")]
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("field does not match this guidance: {0}")]
    Incoherent(String),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad NNF dump: {0}")]
    Format(String),
}

/// Mask and distance channels plus their cost weights.
#[derive(Clone, Debug)]
pub struct GuidanceStack {
    height: usize,
    width: usize,
    /// Interleaved `(semantic, distance)` per pixel.
    channels: Vec<[f64; 2]>,
    weights: (f64, f64),
}

impl GuidanceStack {
    pub fn new(semantic: &SemanticMask, distance: &DistanceField, weights: (f64, f64)) -> Result<Self, PatchMatchError> {
        let (sd, dd) = ((semantic.height(), semantic.width()), (distance.height(), distance.width()));
        if sd != dd {
            return Err(PatchMatchError::GuidanceDims(sd, dd));
        }
        check_weights(weights)?;
        let channels = semantic.data().iter().zip(distance.data()).map(|(&s, &d)| [f64::from(s), d]).collect();
        Ok(Self { height: sd.0, width: sd.1, channels, weights })
    }

    /// Builds the stack from a mask, computing its distance map.
    pub fn from_mask(mask: &SemanticMask, weights: (f64, f64)) -> Result<Self, PatchMatchError> {
        Self::new(mask, &distance_map(mask)?, weights)
    }

    /// Arbitrary channel values, for tests and synthetic guidance.
    pub fn from_channels(height: usize, width: usize, channels: Vec<[f64; 2]>, weights: (f64, f64)) -> Result<Self, PatchMatchError> {
        check_weights(weights)?;
        if channels.len() != height * width {
            return Err(PatchMatchError::Config(format!("{} guidance pixels for {height}x{width}", channels.len())));
        }
        Ok(Self { height, width, channels, weights })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> (f64, f64) {
        self.weights
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 2] {
        self.channels[y * self.width + x]
    }

    /// Copies the window with top-left `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GuidanceStack {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside guidance");
        let channels = (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (x, y))).map(|(x, y)| self.pixel(x, y)).collect();
        GuidanceStack { height: h, width: w, channels, weights: self.weights }
    }

    fn origin_grid(&self, patch_size: usize) -> Result<(usize, usize), PatchMatchError> {
        if self.height < patch_size || self.width < patch_size {
            return Err(PatchMatchError::TooSmall { height: self.height, width: self.width, patch_size });
        }
        Ok((self.height - patch_size + 1, self.width - patch_size + 1))
    }

    fn check_window(&self, origin: (usize, usize), patch_size: usize) -> Result<(), PatchMatchError> {
        if origin.0 + patch_size > self.width || origin.1 + patch_size > self.height {
            return Err(PatchMatchError::OutOfBounds { origin, patch_size, height: self.height, width: self.width });
        }
        Ok(())
    }
}

fn check_weights(w: (f64, f64)) -> Result<(), PatchMatchError> {
    if !(w.0 >= 0.0 && w.1 >= 0.0 && w.0 + w.1 > 0.0 && w.0.is_finite() && w.1.is_finite()) {
        return Err(PatchMatchError::Weights(w));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchMatchConfig {
    pub patch_size: usize,
    pub iterations: usize,
    pub random_search_decay: f64,
    pub rng_seed: u64,
    pub semantic_weight: f64,
    pub distance_weight: f64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self { patch_size: 16, iterations: 5, random_search_decay: 0.5, rng_seed: 0, semantic_weight: 1.0, distance_weight: 1.0 }
    }
}

impl PatchMatchConfig {
    pub fn validate(&self) -> Result<(), PatchMatchError> {
        if self.patch_size < 2 {
            return Err(PatchMatchError::Config(format!("patch_size {} < 2", self.patch_size)));
        }
        if self.iterations == 0 {
            return Err(PatchMatchError::Config("iterations must be at least 1".into()));
        }
        if !(self.random_search_decay > 0.0 && self.random_search_decay < 1.0) {
            return Err(PatchMatchError::Config(format!("random_search_decay {} outside (0, 1)", self.random_search_decay)));
        }
        check_weights(self.weights())
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.semantic_weight, self.distance_weight)
    }
}

/// Weighted SSD between the source window at `src` and the target window at
/// `tgt`; the target's channel weights are used.
pub fn patch_cost(
    source: &GuidanceStack,
    target: &GuidanceStack,
    src: (usize, usize),
    tgt: (usize, usize),
    patch_size: usize,
) -> Result<f64, PatchMatchError> {
    source.check_window(src, patch_size)?;
    target.check_window(tgt, patch_size)?;
    Ok(cost_bounded(source, target, src, tgt, patch_size, f64::INFINITY))
}

/// Cost summed row by row, giving up (returning a value `>= bound`) once the
/// partial sum reaches `bound`. Completed sums are identical to
/// [`patch_cost`].
fn cost_bounded(source: &GuidanceStack, target: &GuidanceStack, src: (usize, usize), tgt: (usize, usize), p: usize, bound: f64) -> f64 {
    let (ws, wd) = target.weights;
    let mut total = 0.0;
    for row in 0..p {
        let a = &source.channels[(src.1 + row) * source.width + src.0..][..p];
        let b = &target.channels[(tgt.1 + row) * target.width + tgt.0..][..p];
        let (mut sem, mut dist) = (0.0, 0.0);
        for (s, t) in a.iter().zip(b) {
            let (d0, d1) = (s[0] - t[0], s[1] - t[1]);
            sem += d0 * d0;
            dist += d1 * d1;
        }
        total += ws * sem + wd * dist;
        if total >= bound {
            return total;
        }
    }
    total
}

/// Per-target-origin correspondence into the source origin grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestNeighborField {
    height: usize,
    width: usize,
    patch_size: usize,
    source_dims: (usize, usize),
    offsets: Vec<(i32, i32)>,
    costs: Vec<f64>,
    iterations_done: usize,
}

impl NearestNeighborField {
    /// Builds a field from absolute source origins (row-major over target
    /// origins), computing every cost.
    pub fn from_origins(
        source: &GuidanceStack,
        target: &GuidanceStack,
        patch_size: usize,
        origins: &[(usize, usize)],
    ) -> Result<Self, PatchMatchError> {
        let (sh, sw) = source.origin_grid(patch_size)?;
        let (th, tw) = target.origin_grid(patch_size)?;
        if origins.len() != th * tw {
            return Err(PatchMatchError::Incoherent(format!("{} origins for a {th}x{tw} grid", origins.len())));
        }
        let mut offsets = Vec::with_capacity(origins.len());
        let mut costs = Vec::with_capacity(origins.len());
        for (i, &(sx, sy)) in origins.iter().enumerate() {
            if sx >= sw || sy >= sh {
                return Err(PatchMatchError::OutOfBounds { origin: (sx, sy), patch_size, height: source.height, width: source.width });
            }
            let (tx, ty) = (i % tw, i / tw);
            offsets.push((sx as i32 - tx as i32, sy as i32 - ty as i32));
            costs.push(cost_bounded(source, target, (sx, sy), (tx, ty), patch_size, f64::INFINITY));
        }
        Ok(Self { height: th, width: tw, patch_size, source_dims: (source.height, source.width), offsets, costs, iterations_done: 0 })
    }

    /// Rows of the target origin grid.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    /// Target image size covered by the field.
    pub fn target_dims(&self) -> (usize, usize) {
        (self.height + self.patch_size - 1, self.width + self.patch_size - 1)
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    /// Absolute source origin matched to target origin `(x, y)`.
    pub fn source_origin(&self, x: usize, y: usize) -> (usize, usize) {
        let (dx, dy) = self.offsets[y * self.width + x];
        ((x as i64 + dx as i64) as usize, (y as i64 + dy as i64) as usize)
    }

    fn check_against(&self, source: &GuidanceStack, target: &GuidanceStack) -> Result<(), PatchMatchError> {
        if (source.height, source.width) != self.source_dims {
            return Err(PatchMatchError::Incoherent(format!("source {:?} vs {:?}", (source.height, source.width), self.source_dims)));
        }
        if (target.height, target.width) != self.target_dims() {
            return Err(PatchMatchError::Incoherent(format!("target {:?} vs {:?}", (target.height, target.width), self.target_dims())));
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"DXNF";
    const VERSION: u16 = 1;

    /// Debug dump: header, then `(dx: i32, dy: i32, cost: f32)` per position.
    pub fn write_dump(&self, out: &mut impl Write) -> Result<(), PatchMatchError> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [self.height, self.width, self.patch_size] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for (&(dx, dy), &c) in self.offsets.iter().zip(&self.costs) {
            out.write_all(&dx.to_le_bytes())?;
            out.write_all(&dy.to_le_bytes())?;
            out.write_all(&(c as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump back as `(height, width, patch_size, entries)`.
    #[allow(clippy::type_complexity)]
    pub fn read_dump(input: &mut impl Read) -> Result<(usize, usize, usize, Vec<(i32, i32, f32)>), PatchMatchError> {
        let mut header = [0u8; 18];
        input.read_exact(&mut header)?;
        if &header[..4] != Self::MAGIC {
            return Err(PatchMatchError::Format("bad magic".into()));
        }
        if u16::from_le_bytes([header[4], header[5]]) != Self::VERSION {
            return Err(PatchMatchError::Format("unsupported version".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, p) = (word(0), word(1), word(2));
        let mut entries = Vec::with_capacity(h * w);
        let mut rec = [0u8; 12];
        for _ in 0..h * w {
            input.read_exact(&mut rec)?;
            entries.push((
                i32::from_le_bytes(rec[0..4].try_into().unwrap()),
                i32::from_le_bytes(rec[4..8].try_into().unwrap()),
                f32::from_le_bytes(rec[8..12].try_into().unwrap()),
            ));
        }
        Ok((h, w, p, entries))
    }
}

/// Uniformly random valid source origin for every target origin.
pub fn nnf_random_init(
    source: &GuidanceStack,
    target: &GuidanceStack,
    config: &PatchMatchConfig,
) -> Result<NearestNeighborField, PatchMatchError> {
    config.validate()?;
    let p = config.patch_size;
    let (sh, sw) = source.origin_grid(p)?;
    let (th, tw) = target.origin_grid(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let origins: Vec<(usize, usize)> = (0..th * tw).map(|_| (rng.random_range(0..sw), rng.random_range(0..sh))).collect();
    NearestNeighborField::from_origins(source, target, p, &origins)
}

/// One propagation sweep plus random search. Odd-numbered iterations (the
/// first is 1) scan forward, even ones in reverse.
pub fn nnf_iterate(
    mut nnf: NearestNeighborField,
    source: &GuidanceStack,
    target: &GuidanceStack,
    config: &PatchMatchConfig,
) -> Result<NearestNeighborField, PatchMatchError> {
    config.validate()?;
    if config.patch_size != nnf.patch_size {
        return Err(PatchMatchError::Incoherent(format!("patch size {} vs {}", config.patch_size, nnf.patch_size)));
    }
    nnf.check_against(source, target)?;
    let p = nnf.patch_size;
    let (sh, sw) = source.origin_grid(p)?;
    let iteration = nnf.iterations_done + 1;
    let forward = iteration % 2 == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (h, w) = (nnf.height, nnf.width);
    let step: i64 = if forward { -1 } else { 1 };
    for k in 0..h * w {
        let idx = if forward { k } else { h * w - 1 - k };
        let (x, y) = (idx % w, idx / w);
        let mut best = nnf.source_origin(x, y);
        let mut best_cost = nnf.costs[idx];
        let consider = |cand: (usize, usize), best: &mut (usize, usize), best_cost: &mut f64| {
            if cand == *best {
                return;
            }
            let c = cost_bounded(source, target, cand, (x, y), p, *best_cost);
            if c < *best_cost {
                *best = cand;
                *best_cost = c;
            }
        };
        // Propagation from the already-visited neighbors.
        let neighbors = [(x as i64 + step, y as i64), (x as i64, y as i64 + step)];
        for (nx, ny) in neighbors {
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (dx, dy) = nnf.offsets[ny as usize * w + nx as usize];
            let (cx, cy) = (x as i64 + dx as i64, y as i64 + dy as i64);
            if cx >= 0 && cy >= 0 && (cx as usize) < sw && (cy as usize) < sh {
                consider((cx as usize, cy as usize), &mut best, &mut best_cost);
            }
        }
        // Random search in shrinking windows around the current best.
        let mut radius = sw.max(sh) as f64;
        while radius >= 1.0 {
            let r = radius as i64;
            let (bx, by) = (best.0 as i64, best.1 as i64);
            let (x0, x1) = ((bx - r).max(0), (bx + r).min(sw as i64 - 1));
            let (y0, y1) = ((by - r).max(0), (by + r).min(sh as i64 - 1));
            let cand = (rng.random_range(x0..=x1) as usize, rng.random_range(y0..=y1) as usize);
            consider(cand, &mut best, &mut best_cost);
            radius *= config.random_search_decay;
        }
        nnf.offsets[idx] = (best.0 as i32 - x as i32, best.1 as i32 - y as i32);
        nnf.costs[idx] = best_cost;
    }
    nnf.iterations_done = iteration;
    Ok(nnf)
}

/// Random initialization followed by `config.iterations` sweeps. Calls
/// `on_iteration` with the field after initialization and every sweep.
pub fn compute_nnf(
    source: &GuidanceStack,
    target: &GuidanceStack,
    config: &PatchMatchConfig,
    mut on_iteration: impl FnMut(&NearestNeighborField),
) -> Result<NearestNeighborField, PatchMatchError> {
    let mut nnf = nnf_random_init(source, target, config)?;
    on_iteration(&nnf);
    for _ in 0..config.iterations {
        nnf = nnf_iterate(nnf, source, target, config)?;
        on_iteration(&nnf);
    }
    Ok(nnf)
}

/// Copies the matched source texture patch to every target origin and votes
/// them together with Gaussian weights.
pub fn synthesize_initial(style: &RasterImage, nnf: &NearestNeighborField, merge_sigma: f64) -> Result<RasterImage, PatchMatchError> {
    let found = (style.height(), style.width());
    if found != nnf.source_dims {
        return Err(PatchMatchError::DimensionMismatch { expected: nnf.source_dims, found });
    }
    let (p, c) = (nnf.patch_size, style.channels());
    let (th, tw) = nnf.target_dims();
    let mut origins = Vec::with_capacity(nnf.height * nnf.width);
    let mut values = Vec::with_capacity(nnf.height * nnf.width * p * p * c);
    for y in 0..nnf.height {
        for x in 0..nnf.width {
            let (sx, sy) = nnf.source_origin(x, y);
            for row in sy..sy + p {
                let start = (row * style.width() + sx) * c;
                values.extend_from_slice(&style.data()[start..start + p * c]);
            }
            origins.push((x, y));
        }
    }
    let set = PatchSet::new(p, c, (th, tw), origins, values)?;
    Ok(merge_patches(&set, &PatchSpec::new(p, 1)?, &MergeConfig { sigma: merge_sigma })?)
}
