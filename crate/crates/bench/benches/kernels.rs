use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use texmotion_bench::{frame, guidance, mask};
use texmotion_core::forecaster::{Forecaster, ForecasterConfig, SamplerConfig};
use texmotion_core::imagery::distance_map;
use texmotion_core::patch_grid::{cut_patches, merge_patches, MergeConfig, PatchSpec};
use texmotion_core::patchmatch::{nnf_iterate, nnf_random_init, PatchMatchConfig};
use texmotion_core::synthetic::{texture_patches, Glyph};
use texmotion_core::vqvae::{LatentGrid, Vqvae, VqvaeConfig};

fn imagery(c: &mut Criterion) {
    let m = mask(Glyph::Ring, 256);
    c.bench_function("distance_map 256x256", |b| b.iter(|| distance_map(black_box(&m)).unwrap()));
}

fn patches(c: &mut Criterion) {
    let img = frame(64);
    let spec = PatchSpec::new(16, 4).unwrap();
    let set = cut_patches(&img, &spec).unwrap();
    let cfg = MergeConfig::default();
    c.bench_function("cut_patches 64x64 s4", |b| b.iter(|| cut_patches(black_box(&img), &spec).unwrap()));
    c.bench_function("merge_patches 64x64 s4", |b| b.iter(|| merge_patches(black_box(&set), &spec, &cfg).unwrap()));
}

fn patchmatch(c: &mut Criterion) {
    let source = guidance(Glyph::Disk, 64);
    let target = guidance(Glyph::Cross, 48);
    let cfg = PatchMatchConfig::default();
    let init = nnf_random_init(&source, &target, &cfg).unwrap();
    c.bench_function("nnf_iterate 64->48", |b| {
        b.iter(|| nnf_iterate(init.clone(), black_box(&source), &target, &cfg).unwrap())
    });
}

fn vqvae(c: &mut Criterion) {
    let model = Vqvae::new(VqvaeConfig::default(), 3).unwrap();
    let data = texture_patches(32, 3, 0);
    let batch: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    c.bench_function("vqvae encode 32 patches", |b| b.iter(|| model.encode_to_grids(black_box(&batch)).unwrap()));
    c.bench_function("vqvae loss 32 patches", |b| b.iter(|| model.loss(black_box(&batch)).unwrap()));
}

fn forecaster(c: &mut Criterion) {
    let model = Forecaster::new(ForecasterConfig { max_len: 128, ..Default::default() }).unwrap();
    let grid = LatentGrid::uniform(7);
    let sampler = SamplerConfig::default();
    let mut group = c.benchmark_group("forecaster");
    group.sample_size(10);
    group.bench_function("predict 7 frames (6x8, d128)", |b| b.iter(|| model.predict(black_box(&grid), 7, &sampler).unwrap()));
    let tokens: Vec<u16> = (0..127).map(|i| (i * 37 % 256) as u16).collect();
    group.bench_function("forward 127 tokens", |b| b.iter(|| model.forward_logits(black_box(&tokens)).unwrap()));
    group.finish();
}

criterion_group!(benches, imagery, patches, patchmatch, vqvae, forecaster);
criterion_main!(benches);
