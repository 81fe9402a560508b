//! Acceptance criteria 1-9. Each test prints one PASS/FAIL line with its
//! runtime against the budget. Run with `--nocapture` to see them, or
//! `--test-threads 1` for undisturbed timings (a lock serializes them anyway).

mod common;

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texmotion_core::forecaster::{split_locations, train_forecaster, ForecasterConfig, SamplerConfig};
use texmotion_core::imagery::{
    contour_distances, distance_map, load_frame_sequence, save_frame_sequence, save_mask, FrameSequence, RasterImage,
    SemanticMask,
};
use texmotion_core::patch_grid::{cut_patches, merge_patches, merge_values, MergeConfig, PatchSet, PatchSpec};
use texmotion_core::patchmatch::{compute_nnf, GuidanceStack, PatchMatchConfig};
use texmotion_core::pipeline::{artifacts, read_manifest, run_transfer, stable_lines, PipelineConfig, MANIFEST_FILE};
use texmotion_core::synthetic::{flame_clip, glyph_mask, permutation_cycle_dataset, texture_patches, Glyph};
use texmotion_core::vqvae::{quantize, train_vqvae, Codebook, LatentGrid, VqvaeConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

static SERIAL: Mutex<()> = Mutex::new(());

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget: Duration, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let out = body();
    let elapsed = start.elapsed();
    let in_time = elapsed < budget;
    let verdict = if out.passed && in_time { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} {name}: {verdict} ({}; {:.1}s of {}s budget)",
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(out.passed, "criterion {id} {name}: {}", out.detail);
    assert!(in_time, "criterion {id} {name} took {:.1}s, budget {}s", elapsed.as_secs_f64(), budget.as_secs());
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SemanticMask {
    let density = rng.random_range(0.1..0.9);
    let bits: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
    SemanticMask::from_fn(h, w, |x, y| bits[y * w + x])
}

/// Nearest-contour distances by scanning every pixel pair.
fn all_pairs_distances(mask: &SemanticMask) -> Vec<f64> {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let mut contour = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            let touches_bg = !fg(x - 1, y) || !fg(x + 1, y) || !fg(x, y - 1) || !fg(x, y + 1);
            if fg(x, y) && (border || touches_bg) {
                contour.push((x, y));
            }
        }
    }
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let best = contour.iter().map(|&(cx, cy)| (cx - x).pow(2) + (cy - y).pow(2)).min().expect("contour exists");
            out.push((best as f64).sqrt());
        }
    }
    out
}

#[test]
fn criterion_1_distance_map_oracle() {
    criterion(1, "distance-map oracle", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mismatches = 0;
        let mut checked = 0;
        while checked < 200 {
            let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let mask = random_mask(&mut rng, h, w);
            if !mask.data().contains(&1) {
                continue;
            }
            checked += 1;
            let oracle = all_pairs_distances(&mask);
            let raw = contour_distances(&mask).unwrap();
            let max = oracle.iter().copied().fold(0.0, f64::max);
            let normalized: Vec<f64> = oracle.iter().map(|&d| if max > 0.0 { d / max } else { d }).collect();
            if raw != oracle || distance_map(&mask).unwrap().data() != normalized.as_slice() {
                mismatches += 1;
            }
        }
        Outcome { passed: mismatches == 0, detail: format!("{mismatches} of {checked} masks differ from the all-pairs scan") }
    });
}

/// Per-pixel weighted average of every covering patch, weights from the
/// Gaussian density written out directly.
fn naive_merge(set: &PatchSet, h: usize, w: usize, c: usize, sigma: f64) -> Vec<f64> {
    let p = set.patch_size();
    let center = (p as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let mut den = 0.0;
            let mut num = vec![0.0; c];
            for (i, &(ox, oy)) in set.origins().iter().enumerate() {
                if x < ox || y < oy || x >= ox + p || y >= oy + p {
                    continue;
                }
                let (dx, dy) = ((x - ox) as f64 - center, (y - oy) as f64 - center);
                let wgt = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma);
                den += wgt;
                for ch in 0..c {
                    num[ch] += wgt * set.patch(i)[((y - oy) * p + (x - ox)) * c + ch];
                }
            }
            for ch in 0..c {
                out[(y * w + x) * c + ch] = num[ch] / den;
            }
        }
    }
    out
}

#[test]
fn criterion_2_patch_round_trip() {
    criterion(2, "patch round trip", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst_round_trip = 0.0f64;
        for _ in 0..100 {
            let p = rng.random_range(2..=16);
            let s = rng.random_range(1..=p);
            let (h, w) = (p + s * rng.random_range(0..=6), p + s * rng.random_range(0..=6));
            let c = if rng.random::<bool>() { 3 } else { 1 };
            let img = RasterImage::from_fn(h, w, c, |_, _, _| rng.random::<f64>());
            let spec = PatchSpec::new(p, s).unwrap();
            let sigma = rng.random_range(0.5..8.0);
            let back = merge_patches(&cut_patches(&img, &spec).unwrap(), &spec, &MergeConfig { sigma }).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                worst_round_trip = worst_round_trip.max((a - b).abs());
            }
        }
        let mut worst_oracle = 0.0f64;
        for _ in 0..20 {
            let p = rng.random_range(2..=16);
            let divisors: Vec<usize> = (1..=p).filter(|s| (18 - p) % s == 0).collect();
            let s = divisors[rng.random_range(0..divisors.len())];
            let spec = PatchSpec::new(p, s).unwrap();
            let c = rng.random_range(1..=3);
            let origins = spec.origins(18, 18).unwrap();
            let values: Vec<f64> = (0..origins.len() * p * p * c).map(|_| rng.random::<f64>()).collect();
            let set = PatchSet::new(p, c, (18, 18), origins, values).unwrap();
            let sigma = rng.random_range(1.0..6.0);
            let got = merge_values(&set, &MergeConfig { sigma }).unwrap();
            for (a, b) in got.iter().zip(naive_merge(&set, 18, 18, c, sigma)) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
        Outcome {
            passed: worst_round_trip <= 1e-6 && worst_oracle <= 1e-9,
            detail: format!("round trip max err {worst_round_trip:.2e}, Gaussian merge vs oracle {worst_oracle:.2e}"),
        }
    });
}

#[test]
fn criterion_3_quantizer_oracle() {
    criterion(3, "quantizer oracle", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut wrong, mut ties) = (0usize, 0usize);
        for instance in 0..1000 {
            let (k, d, rows) = (rng.random_range(2..=32), rng.random_range(1..=16), rng.random_range(1..=20));
            let mut entries: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut z: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if instance % 2 == 0 {
                // Duplicate an entry and aim a row at it.
                let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
                let src: Vec<f32> = entries[a * d..(a + 1) * d].to_vec();
                entries[b * d..(b + 1) * d].copy_from_slice(&src);
                let r = rng.random_range(0..rows);
                z[r * d..(r + 1) * d].copy_from_slice(&src);
            }
            if instance % 5 == 1 {
                // Mirror pair around a row: equal distances by symmetry.
                let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
                if a != b {
                    let r = rng.random_range(0..rows);
                    for j in 0..d {
                        let v = rng.random_range(0.0..0.5f32);
                        entries[a * d + j] = z[r * d + j] + v;
                        entries[b * d + j] = z[r * d + j] - v;
                    }
                }
            }
            let codebook = Codebook::new(k, d, entries.clone()).unwrap();
            let tensor = texmotion_core::neural::Tensor::new(&[rows, d], z.clone()).unwrap();
            let (zq, indices) = quantize(&tensor, &codebook).unwrap();
            for r in 0..rows {
                let row = &z[r * d..(r + 1) * d];
                let dists: Vec<f64> = (0..k)
                    .map(|e| {
                        let entry = &entries[e * d..(e + 1) * d];
                        row.iter().zip(entry).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum()
                    })
                    .collect();
                let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
                let expected = dists.iter().position(|&v| v == min).unwrap();
                ties += usize::from(dists.iter().filter(|&&v| v == min).count() > 1);
                let ok = indices[r] == expected && zq.data()[r * d..(r + 1) * d] == entries[expected * d..(expected + 1) * d];
                wrong += usize::from(!ok);
            }
        }
        Outcome { passed: wrong == 0 && ties > 0, detail: format!("{wrong} wrong rows, {ties} tied rows resolved") }
    });
}

#[test]
fn criterion_4_gradient_suite() {
    criterion(4, "gradient suite", Duration::from_secs(120), || {
        let mut failures = Vec::new();
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for &name in common::CASES {
            let (e64, e32) = (common::check_f64(name), common::check_f32(name));
            worst64 = worst64.max(e64);
            worst32 = worst32.max(e32);
            if e64 > common::TOL_F64 || e32 > common::TOL_F32 {
                failures.push(format!("{name} ({e64:.1e}/{e32:.1e})"));
            }
        }
        let (grad, x) = common::stop_gradient_probe();
        let sg_exact = grad == x && common::stop_gradient_forward_exact();
        Outcome {
            passed: failures.is_empty() && sg_exact,
            detail: format!(
                "{} cases, worst rel err {worst64:.1e} (f64) {worst32:.1e} (f32), stop-gradient exact: {sg_exact}{}",
                common::CASES.len(),
                if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(" ")) }
            ),
        }
    });
}

/// Smooth random blobs: thresholded sum of Gaussian bumps.
fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SemanticMask {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..6))
        .map(|_| {
            let r = rng.random_range(4.0..(h.min(w) as f64 / 3.0).max(5.0));
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), r, rng.random_range(0.5..1.0))
        })
        .collect();
    SemanticMask::from_fn(h, w, |x, y| {
        let v: f64 =
            bumps.iter().map(|&(cx, cy, r, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r)).exp()).sum();
        v > 0.5
    })
}

fn blob_guidance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GuidanceStack {
    loop {
        let mask = blob_mask(rng, h, w);
        if let Ok(dist) = distance_map(&mask) {
            return GuidanceStack::new(&mask, &dist, (1.0, 1.0)).unwrap();
        }
    }
}

fn window_cost(s: &GuidanceStack, t: &GuidanceStack, src: (usize, usize), tgt: (usize, usize), p: usize) -> f64 {
    let mut total = 0.0;
    for dy in 0..p {
        for dx in 0..p {
            let a = s.pixel(src.0 + dx, src.1 + dy);
            let b = t.pixel(tgt.0 + dx, tgt.1 + dy);
            total += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        }
    }
    total
}

#[test]
fn criterion_5_nnf_quality() {
    criterion(5, "NNF quality", Duration::from_secs(120), || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 16;
        let (mut optimal, mut positions, mut worst_fraction, mut monotone) = (0usize, 0usize, 1.0f64, true);
        for instance in 0..20u64 {
            let source = blob_guidance(&mut rng, 64, 64);
            let side = rng.random_range(p..=p + 15);
            let target = blob_guidance(&mut rng, side, p + 15);
            let config = PatchMatchConfig { rng_seed: instance, ..PatchMatchConfig::default() };
            let mut totals = Vec::new();
            let nnf = compute_nnf(&source, &target, &config, |n| totals.push(n.total_cost())).unwrap();
            monotone &= totals.windows(2).all(|w| w[1] <= w[0]);
            let (th, tw) = (nnf.height(), nnf.width());
            let mut hits = 0;
            for ty in 0..th {
                for tx in 0..tw {
                    let mut best = f64::INFINITY;
                    for sy in 0..=64 - p {
                        for sx in 0..=64 - p {
                            best = best.min(window_cost(&source, &target, (sx, sy), (tx, ty), p));
                        }
                    }
                    hits += usize::from(nnf.costs()[ty * tw + tx] <= best + 1e-6);
                }
            }
            optimal += hits;
            positions += th * tw;
            worst_fraction = worst_fraction.min(hits as f64 / (th * tw) as f64);
        }
        let fraction = optimal as f64 / positions as f64;
        Outcome {
            passed: fraction >= 0.9 && monotone,
            detail: format!(
                "optimal positions {:.1}% of {positions} (worst instance {:.1}%); cost non-increasing: {monotone}",
                100.0 * fraction,
                100.0 * worst_fraction
            ),
        }
    });
}

/// Held-out MSE of the VQ-VAE trained on 2000 synthetic texture patches.
#[test]
fn criterion_6_vqvae_convergence() {
    criterion(6, "VQ-VAE convergence", Duration::from_secs(15 * 60), || {
        let data = texture_patches(2200, 3, 7);
        let (train, held) = data.split_at(2000);
        let train: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
        let held: Vec<&[f64]> = held.iter().map(Vec::as_slice).collect();
        let config = VqvaeConfig { lr: 1e-3, steps: 3000, batch_size: 32, ..VqvaeConfig::default() };
        let trained = train_vqvae(&train, 3, &config, |_| {}).unwrap();
        let mse = trained.model.reconstruction_mse(&held).unwrap();
        let used = trained.usage.iter().filter(|&&u| u > 0).count();
        Outcome { passed: mse <= 0.01, detail: format!("held-out MSE {mse:.5} (limit 0.01), {used} codes in use") }
    });
}

fn cycle_config(layers: usize, heads: usize) -> ForecasterConfig {
    ForecasterConfig {
        layers,
        heads,
        d_model: 128,
        max_len: 128,
        lr: 1e-3,
        warmup_steps: 30,
        final_lr_ratio: 0.1,
        batch_size: 32,
        steps: 250,
        clip_norm: 1.0,
        val_fraction: 0.1,
        eval_every: 50,
        seed: 0,
        ..ForecasterConfig::default()
    }
}

#[test]
fn criterion_7_forecaster_accuracy() {
    criterion(7, "forecaster accuracy", Duration::from_secs(20 * 60), || {
        let (data, sigma) = permutation_cycle_dataset(169, 8, 256, 7);
        let config = cycle_config(6, 8);
        let trained = train_forecaster(&data, &config, |_| {}).unwrap();
        let acc = trained.validation_accuracy;

        // Free-running prediction on held-out grids, scored against the rule.
        let (_, val) = split_locations(data.len(), config.val_fraction, config.seed);
        let (mut hits, mut total) = (0usize, 0usize);
        for &i in &val {
            let grid = LatentGrid::new(&data[i].frame(0).iter().map(|&t| t as usize).collect::<Vec<_>>(), 256).unwrap();
            let seq = trained.model.predict(&grid, 7, &SamplerConfig::default()).unwrap();
            for j in 16..seq.tokens.len() {
                hits += usize::from(seq.tokens[j] == sigma[seq.tokens[j - 16] as usize]);
                total += 1;
            }
        }
        let rule = 100.0 * hits as f64 / total as f64;
        let small = train_forecaster(&data, &cycle_config(3, 4), |_| {}).unwrap().validation_accuracy;
        Outcome {
            passed: acc >= 99.0 && rule >= 95.0,
            detail: format!(
                "6L/8H validation accuracy {acc:.2}% (limit 99%), free-running rule accuracy {rule:.2}%; 3L/4H {small:.2}% (report only)"
            ),
        }
    });
}

/// Writes an 8-frame 64x64 flame clip with its disk mask under `root`.
fn write_source(root: &Path) -> SemanticMask {
    let mask = glyph_mask(Glyph::Disk, 64, 64);
    let clip = flame_clip(&mask, 8, 2, 11);
    save_frame_sequence(&root.join("source"), "frame_%04d.png", &FrameSequence::new(clip).unwrap()).unwrap();
    save_mask(&root.join("source_mask.png"), &mask).unwrap();
    mask
}

fn base_config(root: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.paths.source_frames = root.join("source");
    c.paths.source_mask = root.join("source_mask.png");
    c.paths.target_mask = root.join("target_mask.png");
    c.patches = PatchSpec { patch_size: 16, stride: 4 };
    c.vqvae = VqvaeConfig { lr: 1e-3, ..VqvaeConfig::default() };
    c
}

fn frame_files(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = fs::read_dir(dir.join(artifacts::FRAMES)).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn criterion_8_end_to_end_smoke() {
    criterion(8, "end-to-end smoke", Duration::from_secs(10 * 60), || {
        let tmp = tempfile::tempdir().unwrap();
        write_source(tmp.path());
        save_mask(&tmp.path().join("target_mask.png"), &glyph_mask(Glyph::Tee, 48, 48)).unwrap();
        let mut config = base_config(tmp.path());
        config.vqvae.steps = 400;
        config.forecaster = ForecasterConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            max_len: 128,
            lr: 1e-3,
            warmup_steps: 10,
            final_lr_ratio: 0.1,
            steps: 60,
            eval_every: 60,
            ..ForecasterConfig::default()
        };
        let mut runs = Vec::new();
        for name in ["first", "second"] {
            config.paths.output = tmp.path().join(name);
            let (frames, _) = run_transfer(&config, &mut |_| {}).unwrap();
            let manifest = fs::read_to_string(config.paths.output.join(MANIFEST_FILE)).unwrap();
            runs.push((frames, frame_files(&config.paths.output), stable_lines(&manifest)));
        }
        let (frames, bytes_a, manifest_a) = &runs[0];
        let (_, bytes_b, manifest_b) = &runs[1];
        let shape_ok = frames.frame_count() == 8 && frames.dims().0 == 48 && frames.dims().1 == 48 && bytes_a.len() == 8;
        let identical = bytes_a == bytes_b && manifest_a == manifest_b;
        Outcome {
            passed: shape_ok && identical,
            detail: format!(
                "{} frames of {}x{}, second run byte-identical: {identical}",
                frames.frame_count(),
                frames.dims().1,
                frames.dims().0
            ),
        }
    });
}

#[test]
fn criterion_9_self_transfer() {
    criterion(9, "self-transfer consistency", Duration::from_secs(20 * 60), || {
        let tmp = tempfile::tempdir().unwrap();
        write_source(tmp.path());
        fs::copy(tmp.path().join("source_mask.png"), tmp.path().join("target_mask.png")).unwrap();
        let mut config = base_config(tmp.path());
        config.paths.output = tmp.path().join("run");
        // Criterion 6's protocol for the VQ-VAE; its held-out MSE is the floor.
        config.vqvae.steps = 3000;
        config.vqvae.batch_size = 32;
        config.vqvae_holdout = 0.1;
        config.patchmatch.iterations = 8;
        config.forecaster = ForecasterConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            max_len: 128,
            lr: 1e-3,
            warmup_steps: 20,
            final_lr_ratio: 0.1,
            steps: 400,
            val_fraction: 0.0,
            eval_every: 400,
            ..ForecasterConfig::default()
        };
        let (frames, _) = run_transfer(&config, &mut |_| {}).unwrap();
        let manifest = read_manifest(&config.paths.output.join(MANIFEST_FILE)).unwrap();
        let floor: f64 = manifest["metric.train-vqvae.heldout_mse"].parse().unwrap();
        let memorized: f64 = manifest["metric.train-forecaster.validation_accuracy"].parse().unwrap();
        let source = load_frame_sequence(&tmp.path().join("source"), "frame_%04d.png").unwrap();
        let per_frame: Vec<f64> =
            frames.frames().iter().zip(source.frames()).map(|(a, b)| a.mse(b).unwrap()).collect();
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        Outcome {
            passed: mean <= 2.0 * floor,
            detail: format!(
                "mean per-frame MSE {mean:.5} vs limit {:.5} (2x floor {floor:.5}); frame 0 {:.5}; memorization accuracy {memorized:.2}%",
                2.0 * floor,
                per_frame[0]
            ),
        }
    });
}
