use crate::imagery::{binarize, RasterImage, SemanticMask};
use crate::patch_grid::PatchSpec;

use super::PaddingMode;

/// Original size of a padded image; cropping to it undoes the padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn apply(&self, image: &RasterImage) -> RasterImage {
        image.crop(0, 0, self.width, self.height)
    }
}

/// Smallest `n' >= n` with `n' >= p` and `(n' - p) % s == 0`.
pub fn grid_len(n: usize, spec: &PatchSpec) -> usize {
    let p = spec.patch_size;
    if n <= p {
        return p;
    }
    p + (n - p).next_multiple_of(spec.stride)
}

fn source_index(i: usize, n: usize, mode: PaddingMode) -> usize {
    if i < n {
        return i;
    }
    match mode {
        PaddingMode::Replicate => n - 1,
        PaddingMode::Reflect if n == 1 => 0,
        PaddingMode::Reflect => {
            let period = 2 * (n - 1);
            let k = i % period;
            if k < n {
                k
            } else {
                period - k
            }
        }
    }
}

/// Pads on the right and bottom up to the next size the patch grid tiles.
pub fn pad_to_grid(image: &RasterImage, spec: &PatchSpec, mode: PaddingMode) -> (RasterImage, CropRecord) {
    let (h, w, c) = image.dims();
    let record = CropRecord { height: h, width: w };
    let (ph, pw) = (grid_len(h, spec), grid_len(w, spec));
    if (ph, pw) == (h, w) {
        return (image.clone(), record);
    }
    let padded = RasterImage::from_fn(ph, pw, c, |x, y, ch| image.get(source_index(x, w, mode), source_index(y, h, mode), ch));
    (padded, record)
}

pub fn pad_mask(mask: &SemanticMask, spec: &PatchSpec, mode: PaddingMode) -> (SemanticMask, CropRecord) {
    let (img, record) = pad_to_grid(&mask.to_image(), spec, mode);
    (binarize(&img, 0.5).expect("threshold in range"), record)
}
