//! Seeded synthetic data: texture patches, permutation-cycle token sets and
//! small animated texture clips with their masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forecaster::TokenSequence;
use crate::imagery::{distance_map, RasterImage, SemanticMask};
use crate::vqvae::GRID_TOKENS;

/// Smooth value noise: bilinear interpolation of a random lattice with
/// `cells` cells across `size` pixels.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 * scale, y as f64 * scale);
            let (i, j) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - i as f64, fy - j as f64);
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let top = at(i, j) * (1.0 - sx) + at(i + 1, j) * sx;
            let bottom = at(i, j + 1) * (1.0 - sx) + at(i + 1, j + 1) * sx;
            out.push(top * (1.0 - sy) + bottom * sy);
        }
    }
    out
}

/// `count` patches of `16 x 16 x channels`: a random linear color gradient
/// blended with two octaves of value noise.
pub fn texture_patches(count: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (dx, dy) = (angle.cos(), angle.sin());
            let from: Vec<f64> = (0..channels).map(|_| rng.random::<f64>()).collect();
            let to: Vec<f64> = (0..channels).map(|_| rng.random::<f64>()).collect();
            let tint: Vec<f64> = (0..channels).map(|_| rng.random_range(0.5..1.0)).collect();
            let coarse = value_noise(&mut rng, 16, 2);
            let fine = value_noise(&mut rng, 16, 4);
            let amount = rng.random_range(0.1..0.5);
            let mut patch = Vec::with_capacity(256 * channels);
            for y in 0..16 {
                for x in 0..16 {
                    let t = (((x as f64 - 7.5) * dx + (y as f64 - 7.5) * dy) / 21.3 + 0.5).clamp(0.0, 1.0);
                    let n = 0.65 * coarse[y * 16 + x] + 0.35 * fine[y * 16 + x];
                    for c in 0..channels {
                        let base = from[c] * (1.0 - t) + to[c] * t;
                        patch.push(((1.0 - amount) * base + amount * n * tint[c]).clamp(0.0, 1.0));
                    }
                }
            }
            patch
        })
        .collect()
}

/// A random single cycle through all `vocab` tokens: `sigma[t]` follows `t`.
pub fn random_cycle(vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let mut order: Vec<u16> = (0..vocab as u16).collect();
    order.shuffle(rng);
    let mut sigma = vec![0u16; vocab];
    for i in 0..vocab {
        sigma[order[i] as usize] = order[(i + 1) % vocab];
    }
    sigma
}

/// Token sequences whose first frame is random and whose every later frame
/// applies a fixed permutation cycle to the previous one, cell by cell.
/// Returns the sequences and the permutation.
pub fn permutation_cycle_dataset(locations: usize, frames: usize, vocab: usize, seed: u64) -> (Vec<TokenSequence>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = random_cycle(vocab, &mut rng);
    let side = (locations as f64).sqrt().ceil().max(1.0) as usize;
    let data = (0..locations)
        .map(|l| {
            let mut tokens: Vec<u16> = (0..GRID_TOKENS).map(|_| rng.random_range(0..vocab as u16)).collect();
            for f in 1..frames {
                for j in 0..GRID_TOKENS {
                    let prev = tokens[(f - 1) * GRID_TOKENS + j];
                    tokens.push(sigma[prev as usize]);
                }
            }
            TokenSequence { tokens, location: (l % side, l / side) }
        })
        .collect();
    (data, sigma)
}

/// Shapes for synthetic structure masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    /// Filled disk.
    Disk,
    /// Thick ring.
    Ring,
    /// Plus sign.
    Cross,
    /// Block letter "T".
    Tee,
}

/// A `height x width` mask of `glyph` centered in the frame.
pub fn glyph_mask(glyph: Glyph, height: usize, width: usize) -> SemanticMask {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let r = height.min(width) as f64 * 0.36;
    SemanticMask::from_fn(height, width, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let d = (dx * dx + dy * dy).sqrt();
        match glyph {
            Glyph::Disk => d <= r,
            Glyph::Ring => d <= r && d >= r * 0.55,
            Glyph::Cross => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
            Glyph::Tee => (dy >= -r && dy <= -r * 0.5 && dx.abs() <= r) || (dx.abs() <= r * 0.25 && dy >= -r && dy <= r),
        }
    })
}

/// An animated flame-like texture bound to `mask`: color follows the
/// distance to the mask contour and a noise field that drifts upward by
/// `drift` pixels per frame.
pub fn flame_clip(mask: &SemanticMask, frames: usize, drift: usize, seed: u64) -> Vec<RasterImage> {
    let (h, w) = (mask.height(), mask.width());
    let dist = distance_map(mask).expect("mask has foreground");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tall = h + drift * frames;
    let side = tall.max(w).next_multiple_of(16);
    let noise = value_noise(&mut rng, side, side / 8);
    (0..frames)
        .map(|f| {
            RasterImage::from_fn(h, w, 3, |x, y, c| {
                let n = noise[(y + drift * (frames - f)) % side * side + x];
                let inside = mask.get(x, y);
                let d = dist.get(x, y);
                let heat = if inside { 0.7 + 0.3 * n } else { (1.0 - 2.5 * d).max(0.0) * (0.4 + 0.6 * n) };
                match c {
                    0 => heat,
                    1 => heat * heat * 0.8,
                    _ => heat.powi(4) * 0.5,
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_visits_every_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sigma = random_cycle(256, &mut rng);
        let mut t = 0u16;
        let mut seen = vec![false; 256];
        for _ in 0..256 {
            seen[t as usize] = true;
            t = sigma[t as usize];
        }
        assert_eq!(t, 0);
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn dataset_follows_the_cycle() {
        let (data, sigma) = permutation_cycle_dataset(9, 8, 256, 3);
        assert_eq!(data.len(), 9);
        for seq in &data {
            assert_eq!(seq.tokens.len(), 128);
            for i in 16..128 {
                assert_eq!(seq.tokens[i], sigma[seq.tokens[i - 16] as usize]);
            }
        }
        assert_eq!(permutation_cycle_dataset(9, 8, 256, 3).0, data);
    }

    #[test]
    fn patches_are_in_range() {
        let p = texture_patches(10, 3, 1);
        assert!(p.iter().all(|q| q.len() == 768 && q.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(texture_patches(10, 3, 1), p);
    }

    #[test]
    fn clip_moves_over_time() {
        let mask = glyph_mask(Glyph::Ring, 32, 32);
        let clip = flame_clip(&mask, 4, 2, 0);
        assert_eq!(clip.len(), 4);
        assert_ne!(clip[0], clip[1]);
        assert_eq!(clip[0].dims(), (32, 32, 3));
    }
}
