use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use texmotion_core::imagery::{save_frame_sequence, save_mask, FrameSequence};
use texmotion_core::synthetic::{flame_clip, glyph_mask, Glyph};

const TINY: &str = r#"
[paths]
source_frames = "source"
source_mask = "source_mask.png"
target_mask = "target_mask.png"
output = "run"

[patchmatch]
iterations = 2

[vqvae]
codebook_size = 16
embedding_dim = 8
hidden = 8
residual_hidden = 4
steps = 4
batch_size = 8

[forecaster]
vocab = 16
layers = 1
heads = 2
d_model = 16
max_len = 64
steps = 2
batch_size = 4
eval_every = 2
"#;

fn texmotion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texmotion")).current_dir(dir).args(args).output().expect("binary runs")
}

fn fixture(dir: &Path) {
    let mask = glyph_mask(Glyph::Ring, 24, 24);
    let clip = flame_clip(&mask, 3, 1, 2);
    save_frame_sequence(&dir.join("source"), "frame_%04d.png", &FrameSequence::new(clip).unwrap()).unwrap();
    save_mask(&dir.join("source_mask.png"), &mask).unwrap();
    save_mask(&dir.join("target_mask.png"), &glyph_mask(Glyph::Tee, 20, 20)).unwrap();
    fs::write(dir.join("run.toml"), TINY).unwrap();
}

#[test]
fn stages_one_by_one_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    for stage in ["distance-map", "transfer-initial", "train-vqvae", "encode", "train-forecaster", "predict", "merge"] {
        let out = texmotion(tmp.path(), &["--config", "run.toml", stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let frames = fs::read_dir(tmp.path().join("run/frames")).unwrap().count();
    assert_eq!(frames, 3);
    let out = texmotion(tmp.path(), &["--config", "run.toml", "eval"]);
    assert!(out.status.success());
    let report = String::from_utf8(out.stdout).unwrap();
    for key in ["forecaster_accuracy", "vqvae_heldout_mse", "nnf_mean_cost", "temporal_delta_output"] {
        assert!(report.contains(key), "{report}");
    }
}

#[test]
fn run_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let out = texmotion(tmp.path(), &["run", "--config", "run.toml", "--seed", "3", "--threads", "2", "--out", "other"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(tmp.path().join("other/manifest.txt")).unwrap();
    assert!(manifest.contains("seed.global = 3"));
    assert!(manifest.contains("config.threads = 2"));
    let again = texmotion(tmp.path(), &["run", "--from", "predict", "--config", "run.toml", "--seed", "3", "--out", "other"]);
    assert!(again.status.success());
    let manifest = fs::read_to_string(tmp.path().join("other/manifest.txt")).unwrap();
    assert!(manifest.contains("stages = predict,merge"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    fs::write(tmp.path().join("typo.toml"), "[vqvae]\nstepz = 3\n").unwrap();
    let out = texmotion(tmp.path(), &["--config", "typo.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = texmotion(tmp.path(), &["--config", "missing.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = texmotion(tmp.path(), &["--config", "run.toml", "predict"]);
    assert_eq!(out.status.code(), Some(3));
    let out = texmotion(tmp.path(), &["run", "--from", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}
