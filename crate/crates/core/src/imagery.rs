//! Frames, masks and contour distance fields.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("no files in {dir} match {pattern}")]
    NoFrames { dir: PathBuf, pattern: String },
    #[error("bad filename template {0:?}: expected a prefix, one %0Nd field and a suffix")]
    BadPattern(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("cannot decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("cannot encode {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pixel values must be finite and within [0, 1]")]
    InvalidPixel,
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("mask has no foreground, so there is no contour")]
    NoContour,
    #[error("data length {found} does not match {height}x{width}x{channels}")]
    Length { height: usize, width: usize, channels: usize, found: usize },
}

/// Row-major `height x width x channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageryError> {
        if channels != 1 && channels != 3 {
            return Err(ImageryError::Channels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageryError::Length { height, width, channels, found: data.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageryError::InvalidPixel);
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageryError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(x, y, channel)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        if self.channels == 1 {
            self.get(x, y, 0)
        } else {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        }
    }

    /// Copies the `h x w` window with top-left `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RasterImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside image");
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        RasterImage { height: h, width: w, channels: c, data }
    }

    /// Mean squared difference over all values.
    pub fn mse(&self, other: &RasterImage) -> Result<f64, ImageryError> {
        if self.dims() != other.dims() {
            return Err(ImageryError::DimensionMismatch { expected: self.dims(), found: other.dims() });
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len().max(1) as f64)
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }
}

/// Ordered frames of identical dimensions; frame 0 is the initial frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RasterImage>,
}

impl FrameSequence {
    pub fn new(frames: Vec<RasterImage>) -> Result<Self, ImageryError> {
        let first = frames.first().ok_or(ImageryError::NoFrames { dir: PathBuf::new(), pattern: String::new() })?;
        let expected = first.dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != expected) {
            return Err(ImageryError::DimensionMismatch { expected, found: f.dims() });
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[RasterImage] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }

    pub fn into_frames(self) -> Vec<RasterImage> {
        self.frames
    }
}

/// Binary structure map; 1 marks foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageryError> {
        if data.len() != height * width {
            return Err(ImageryError::Length { height, width, channels: 1, found: data.len() });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(ImageryError::InvalidPixel);
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// The mask as a one-channel 0/1 image.
    pub fn to_image(&self) -> RasterImage {
        RasterImage::from_parts_unchecked(self.height, self.width, 1, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Foreground pixels that touch the background (4-adjacency) or the
    /// image border.
    pub fn is_contour(&self, x: usize, y: usize) -> bool {
        if !self.get(x, y) {
            return false;
        }
        if x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height {
            return true;
        }
        !self.get(x - 1, y) || !self.get(x + 1, y) || !self.get(x, y - 1) || !self.get(x, y + 1)
    }
}

/// Normalized Euclidean distance to the nearest contour pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DistanceField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_image(&self) -> RasterImage {
        RasterImage::from_parts_unchecked(self.height, self.width, 1, self.data.clone())
    }

    /// Writes a 16-bit grayscale PNG with value `round(65535 * d)`.
    pub fn save_png16(&self, path: &Path) -> Result<(), ImageryError> {
        let raw: Vec<u16> = self.data.iter().map(|&d| (d * 65535.0).round() as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized to image");
        img.save(path).map_err(|source| ImageryError::Encode { path: path.to_path_buf(), source })
    }
}

/// Converts to a mask: a pixel is foreground iff its luminance is at least
/// `threshold` (RGB luminance weights 0.299 / 0.587 / 0.114).
pub fn binarize(image: &RasterImage, threshold: f64) -> Result<SemanticMask, ImageryError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ImageryError::Threshold(threshold));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(ImageryError::InvalidPixel);
    }
    Ok(SemanticMask::from_fn(image.height, image.width, |x, y| image.luminance(x, y) >= threshold))
}

/// Exact squared Euclidean distance from every pixel to the nearest contour
/// pixel, by separable lower envelopes of parabolas (column pass, then row
/// pass) in integer arithmetic.
pub fn squared_contour_distances(mask: &SemanticMask) -> Result<Vec<u64>, ImageryError> {
    let (h, w) = (mask.height, mask.width);
    if !mask.data.contains(&1) {
        return Err(ImageryError::NoContour);
    }
    // Larger than any real squared distance; survives a few additions in i64.
    let inf = ((h * h + w * w) as i64 + 1) << 20;
    let mut grid: Vec<i64> = (0..h * w).map(|i| if mask.is_contour(i % w, i / w) { 0 } else { inf }).collect();
    let mut scratch = EnvelopeScratch::new(h.max(w));
    let mut line = vec![0i64; h.max(w)];
    let mut out = vec![0i64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        scratch.transform(&line[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        scratch.transform(&line[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    Ok(grid.into_iter().map(|d| d as u64).collect())
}

struct EnvelopeScratch {
    sites: Vec<usize>,
    /// Left boundaries of each parabola's region, as fractions `num / den`.
    bounds: Vec<(i128, i128)>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        Self { sites: vec![0; n], bounds: vec![(0, 1); n + 1] }
    }

    /// 1-D squared distance transform `out[q] = min_p f[p] + (q - p)^2`.
    fn transform(&mut self, f: &[i64], out: &mut [i64]) {
        let n = f.len();
        let (v, z) = (&mut self.sites, &mut self.bounds);
        let mut k = 0usize;
        v[0] = 0;
        z[0] = (-1, 0); // -infinity
        z[1] = (1, 0); // +infinity
        let less = |a: (i128, i128), b: (i128, i128)| -> bool {
            // den == 0 encodes +/- infinity by the sign of num.
            match (a.1 == 0, b.1 == 0) {
                (true, true) => a.0 < b.0,
                (true, false) => a.0 < 0,
                (false, true) => b.0 > 0,
                (false, false) => a.0 * b.1 < b.0 * a.1,
            }
        };
        for q in 1..n {
            loop {
                let p = v[k];
                let num = (f[q] as i128 + (q * q) as i128) - (f[p] as i128 + (p * p) as i128);
                let den = 2 * (q as i128 - p as i128);
                let s = (num, den);
                if k > 0 && !less(z[k], s) {
                    k -= 1;
                    continue;
                }
                if k == 0 && !less(z[0], s) {
                    // Cannot happen: z[0] is -infinity.
                    unreachable!();
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = (1, 0);
                break;
            }
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while less(z[k + 1], (q as i128, 1)) {
                k += 1;
            }
            let p = v[k];
            let d = q as i64 - p as i64;
            *o = f[p] + d * d;
        }
    }
}

/// Euclidean distance to the contour, unnormalized.
pub fn contour_distances(mask: &SemanticMask) -> Result<Vec<f64>, ImageryError> {
    Ok(squared_contour_distances(mask)?.into_iter().map(|d| (d as f64).sqrt()).collect())
}

/// Contour distance divided by its per-image maximum, so contour pixels are
/// 0 and the farthest pixel is 1.
pub fn distance_map(mask: &SemanticMask) -> Result<DistanceField, ImageryError> {
    let raw = contour_distances(mask)?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    let data = if max > 0.0 { raw.into_iter().map(|d| d / max).collect() } else { raw };
    Ok(DistanceField { height: mask.height, width: mask.width, data })
}

fn decode(path: &Path) -> Result<DynamicImage, ImageryError> {
    image::open(path).map_err(|source| ImageryError::Decode { path: path.to_path_buf(), source })
}

/// Decodes a PNG; gray images give one channel, color images three (alpha is
/// dropped).
pub fn load_image(path: &Path) -> Result<RasterImage, ImageryError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            (1, img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            (1, img.to_luma16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            (3, img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect())
        }
        _ => (3, img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
    };
    RasterImage::new(h, w, channels, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (gray or RGB by channel count).
pub fn save_image(path: &Path, image: &RasterImage) -> Result<(), ImageryError> {
    let raw: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (image.width as u32, image.height as u32);
    let result = if image.channels == 1 {
        GrayImage::from_raw(w, h, raw).expect("sized").save(path)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).map(RgbImage::from).expect("sized").save(path)
    };
    result.map_err(|source| ImageryError::Encode { path: path.to_path_buf(), source })
}

/// Loads a mask PNG; any pixel at or above mid-gray is foreground.
pub fn load_mask(path: &Path) -> Result<SemanticMask, ImageryError> {
    binarize(&load_image(path)?, 0.5)
}

/// Writes a single-channel PNG with 0 for background and 255 for foreground.
pub fn save_mask(path: &Path, mask: &SemanticMask) -> Result<(), ImageryError> {
    let raw = mask.data.iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("sized")
        .save(path)
        .map_err(|source| ImageryError::Encode { path: path.to_path_buf(), source })
}

/// A `printf`-style filename template with a single `%0Nd` (or `%d`) field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePattern {
    prefix: String,
    width: usize,
    suffix: String,
}

impl FramePattern {
    pub const DEFAULT: &'static str = "frame_%04d.png";

    pub fn parse(template: &str) -> Result<Self, ImageryError> {
        let bad = || ImageryError::BadPattern(template.to_string());
        let start = template.find('%').ok_or_else(bad)?;
        let rest = &template[start + 1..];
        let end = rest.find('d').ok_or_else(bad)?;
        let spec = &rest[..end];
        let width = if spec.is_empty() {
            0
        } else {
            if !spec.starts_with('0') && spec.len() > 1 {
                return Err(bad());
            }
            spec.parse::<usize>().map_err(|_| bad())?
        };
        let suffix = &rest[end + 1..];
        if suffix.contains('%') {
            return Err(bad());
        }
        Ok(Self { prefix: template[..start].to_string(), width, suffix: suffix.to_string() })
    }

    pub fn format(&self, index: usize) -> String {
        format!("{}{:0width$}{}", self.prefix, index, self.suffix, width = self.width)
    }

    /// The frame number encoded in `name`, if it matches.
    pub fn frame_number(&self, name: &str) -> Option<usize> {
        let digits = name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.len() < self.width {
            return None;
        }
        digits.parse().ok()
    }
}

/// Loads every file in `dir` matching `pattern`, in ascending frame order.
pub fn load_frame_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence, ImageryError> {
    if !dir.is_dir() {
        return Err(ImageryError::MissingDirectory(dir.to_path_buf()));
    }
    let pat = FramePattern::parse(pattern)?;
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if let Some(n) = entry.file_name().to_str().and_then(|name| pat.frame_number(name)) {
            numbered.push((n, entry.path()));
        }
    }
    if numbered.is_empty() {
        return Err(ImageryError::NoFrames { dir: dir.to_path_buf(), pattern: pattern.to_string() });
    }
    numbered.sort();
    let frames = numbered.iter().map(|(_, p)| load_image(p)).collect::<Result<Vec<_>, _>>()?;
    FrameSequence::new(frames)
}

/// Writes frames as `pattern`-named PNGs into `dir`, creating it if needed.
pub fn save_frame_sequence(dir: &Path, pattern: &str, frames: &FrameSequence) -> Result<Vec<PathBuf>, ImageryError> {
    let pat = FramePattern::parse(pattern)?;
    fs::create_dir_all(dir)?;
    frames
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(pat.format(i));
            save_image(&path, f).map(|_| path)
        })
        .collect()
}
