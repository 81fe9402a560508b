//! Overlapping patch extraction and Gaussian-weighted merging.

use thiserror::Error;

use crate::imagery::RasterImage;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("invalid patch spec: size {patch_size}, stride {stride} (need 1 <= stride <= size)")]
    Spec { patch_size: usize, stride: usize },
    #[error("image {height}x{width} is smaller than patch size {patch_size}")]
    TooSmall { height: usize, width: usize, patch_size: usize },
    #[error("image {height}x{width} minus patch {patch_size} is not divisible by stride {stride}")]
    NotDivisible { height: usize, width: usize, patch_size: usize, stride: usize },
    #[error("sigma {0} must be finite and positive")]
    Sigma(f64),
    #[error("pixel ({x}, {y}) is not covered by any patch")]
    CoverageGap { x: usize, y: usize },
    #[error("patch set is malformed: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_size: 16, stride: 1 }
    }
}

impl PatchSpec {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self, PatchError> {
        let spec = Self { patch_size, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        if self.stride == 0 || self.patch_size == 0 || self.stride > self.patch_size {
            return Err(PatchError::Spec { patch_size: self.patch_size, stride: self.stride });
        }
        Ok(())
    }

    /// Origins along one axis of length `len`, or an error when the grid
    /// does not end flush with the border.
    pub fn axis_origins(&self, len: usize, other: usize) -> Result<Vec<usize>, PatchError> {
        self.validate()?;
        let p = self.patch_size;
        if len < p {
            return Err(PatchError::TooSmall { height: len, width: other, patch_size: p });
        }
        if (len - p) % self.stride != 0 {
            return Err(PatchError::NotDivisible { height: len, width: other, patch_size: p, stride: self.stride });
        }
        Ok((0..=(len - p) / self.stride).map(|i| i * self.stride).collect())
    }

    /// Row-major origins `(x, y)` of every patch of an `height x width` image.
    pub fn origins(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>, PatchError> {
        let ys = self.axis_origins(height, width).map_err(|e| swap_dims(e, height, width))?;
        let xs = self.axis_origins(width, height).map_err(|e| swap_dims(e, height, width))?;
        Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
    }

    pub fn patch_count(&self, height: usize, width: usize) -> Result<usize, PatchError> {
        Ok(self.origins(height, width)?.len())
    }
}

fn swap_dims(e: PatchError, height: usize, width: usize) -> PatchError {
    match e {
        PatchError::TooSmall { patch_size, .. } => PatchError::TooSmall { height, width, patch_size },
        PatchError::NotDivisible { patch_size, stride, .. } => PatchError::NotDivisible { height, width, patch_size, stride },
        other => other,
    }
}

/// Square patches cut from one frame, stored contiguously as
/// `count x patch_size x patch_size x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    channels: usize,
    origins: Vec<(usize, usize)>,
    values: Vec<f64>,
    pub frame_index: usize,
    source_dims: (usize, usize),
}

impl PatchSet {
    pub fn new(
        patch_size: usize,
        channels: usize,
        source_dims: (usize, usize),
        origins: Vec<(usize, usize)>,
        values: Vec<f64>,
    ) -> Result<Self, PatchError> {
        let per = patch_size * patch_size * channels;
        if patch_size == 0 || channels == 0 {
            return Err(PatchError::Malformed("zero patch size or channel count".into()));
        }
        if values.len() != per * origins.len() {
            return Err(PatchError::Malformed(format!("{} values for {} patches of {per}", values.len(), origins.len())));
        }
        let (h, w) = source_dims;
        if let Some(o) = origins.iter().find(|&&(x, y)| x + patch_size > w || y + patch_size > h) {
            return Err(PatchError::Malformed(format!("origin {o:?} places a patch outside {h}x{w}")));
        }
        Ok(Self { patch_size, channels, origins, values, frame_index: 0, source_dims })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Values of patch `i`, row-major with interleaved channels.
    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.patch_len();
        &mut self.values[i * n..(i + 1) * n]
    }
}

/// Extracts every patch on the grid of `spec`, row-major by origin.
pub fn cut_patches(image: &RasterImage, spec: &PatchSpec) -> Result<PatchSet, PatchError> {
    let origins = spec.origins(image.height(), image.width())?;
    let (p, c, w) = (spec.patch_size, image.channels(), image.width());
    let mut values = Vec::with_capacity(origins.len() * p * p * c);
    let data = image.data();
    for &(x, y) in &origins {
        for row in y..y + p {
            let start = (row * w + x) * c;
            values.extend_from_slice(&data[start..start + p * c]);
        }
    }
    PatchSet::new(p, c, (image.height(), image.width()), origins, values)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub sigma: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { sigma: 4.0 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(PatchError::Sigma(self.sigma));
        }
        Ok(())
    }
}

/// Isotropic 2-D Gaussian density at `px` around `center`.
pub fn gaussian_weight(px: (f64, f64), center: (f64, f64), sigma: f64) -> f64 {
    let (dx, dy) = (px.0 - center.0, px.1 - center.1);
    let s2 = sigma * sigma;
    (-(dx * dx + dy * dy) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Weights for every pixel of a patch, centered at `(p - 1) / 2`.
pub fn kernel_table(patch_size: usize, sigma: f64) -> Vec<f64> {
    let c = (patch_size as f64 - 1.0) / 2.0;
    let mut table = Vec::with_capacity(patch_size * patch_size);
    for y in 0..patch_size {
        for x in 0..patch_size {
            table.push(gaussian_weight((x as f64, y as f64), (c, c), sigma));
        }
    }
    table
}

/// Weighted average of all patch values covering each pixel, without
/// clamping. Returns row-major `H x W x C` values.
pub fn merge_values(set: &PatchSet, cfg: &MergeConfig) -> Result<Vec<f64>, PatchError> {
    cfg.validate()?;
    let (h, w) = set.source_dims;
    let (p, c) = (set.patch_size, set.channels);
    let kernel = kernel_table(p, cfg.sigma);
    let mut num = vec![0.0; h * w * c];
    let mut den = vec![0.0; h * w];
    for (i, &(ox, oy)) in set.origins.iter().enumerate() {
        let patch = set.patch(i);
        for py in 0..p {
            let row = (oy + py) * w + ox;
            for px in 0..p {
                let k = kernel[py * p + px];
                den[row + px] += k;
                let src = &patch[(py * p + px) * c..(py * p + px + 1) * c];
                let dst = &mut num[(row + px) * c..(row + px + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
    }
    for (i, &d) in den.iter().enumerate() {
        if d <= 0.0 {
            return Err(PatchError::CoverageGap { x: i % w, y: i / w });
        }
        num[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= d);
    }
    Ok(num)
}

/// Merges patches back into an image; values are clamped into `[0, 1]`.
pub fn merge_patches(set: &PatchSet, spec: &PatchSpec, cfg: &MergeConfig) -> Result<RasterImage, PatchError> {
    spec.validate()?;
    if spec.patch_size != set.patch_size {
        return Err(PatchError::Malformed(format!("spec patch size {} vs set {}", spec.patch_size, set.patch_size)));
    }
    let values = merge_values(set, cfg)?;
    let (h, w) = set.source_dims;
    Ok(RasterImage::from_parts_unchecked(h, w, set.channels, values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
}
