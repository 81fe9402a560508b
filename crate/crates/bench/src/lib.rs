//! Shared inputs for the benchmarks.

use texmotion_core::imagery::{distance_map, RasterImage, SemanticMask};
use texmotion_core::patchmatch::GuidanceStack;
use texmotion_core::synthetic::{flame_clip, glyph_mask, Glyph};

pub fn mask(glyph: Glyph, side: usize) -> SemanticMask {
    glyph_mask(glyph, side, side)
}

pub fn guidance(glyph: Glyph, side: usize) -> GuidanceStack {
    let m = mask(glyph, side);
    let d = distance_map(&m).expect("glyph has a contour");
    GuidanceStack::new(&m, &d, (1.0, 1.0)).expect("matching sizes")
}

pub fn frame(side: usize) -> RasterImage {
    flame_clip(&mask(Glyph::Disk, side), 1, 0, 1).remove(0)
}
