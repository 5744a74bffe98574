//! End-to-end tests of the command-line surface, run against the built
//! binary with a micro training profile.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_masactrl")
}

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("masactrl_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const MICRO_CONFIG: &str = r#"
version = 1

[model]
image_size = 32
in_channels = 3
base_channels = 8
channel_multipliers = [1, 2, 4]
attention_resolutions = [16, 8]
blocks_per_level = 1
heads = 2
vocab_size = 14
token_embed_dim = 16
max_tokens = 8

[schedule]
timesteps = 100
beta_start = 1e-4
beta_end = 0.02
kind = "linear"

[train]
steps = 8
batch = 2
lr = 2e-3
grad_clip = 1.0
uncond_prob = 0.1
dataset_size = 16
dataset_seed = 0
train_seed = 0
model_seed = 0
log_every = 100
"#;

/// One micro checkpoint shared by every test in this file.
fn micro_checkpoint() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = workdir().join("micro");
        std::fs::create_dir_all(&dir).unwrap();
        let config = dir.join("config.toml");
        std::fs::write(&config, MICRO_CONFIG).unwrap();
        let ckpt = dir.join("model.masa");
        let out = Command::new(bin())
            .args([
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out-dir",
                dir.to_str().unwrap(),
                "--checkpoint-out",
                ckpt.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "train failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(dir.join("loss_curve.png").exists());
        assert!(dir.join("manifest.json").exists());
        ckpt
    })
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn run_env(args: &[&str], key: &str, value: &str) -> std::process::Output {
    Command::new(bin()).args(args).env(key, value).output().unwrap()
}

#[test]
fn missing_config_is_usage_error() {
    let out = run(&["train", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_prompt_is_usage_error() {
    let ckpt = micro_checkpoint();
    let out = run(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--prompt",
        "purple dodecahedron nowhere",
        "--out-dir",
        workdir().join("badprompt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_usage_error() {
    let out = run(&[
        "sample",
        "/nonexistent/model.masa",
        "--prompt",
        "red circle left",
        "--out-dir",
        workdir().join("noc").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gate_off_edit_matches_plain_sampling() {
    let ckpt = micro_checkpoint();
    let d = workdir();
    let edit_dir = d.join("edit_gateoff");
    let out = run(&[
        "edit",
        ckpt.to_str().unwrap(),
        "--source-prompt",
        "red circle left",
        "--target-prompt",
        "red circle right",
        "--seed",
        "7",
        "--S",
        "999",
        "--steps",
        "6",
        "--guidance",
        "3.0",
        "--out-dir",
        edit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let sample_dir = d.join("sample_target");
    let out = run(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--prompt",
        "red circle right",
        "--seed",
        "7",
        "--steps",
        "6",
        "--guidance",
        "3.0",
        "--out-dir",
        sample_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let i = std::fs::read(edit_dir.join("I.png")).unwrap();
    let s = std::fs::read(sample_dir.join("sample.png")).unwrap();
    assert_eq!(i, s, "gate-off edit must equal vanilla sampling");
}

#[test]
fn identical_prompts_full_substitution_is_self_consistent() {
    let ckpt = micro_checkpoint();
    let edit_dir = workdir().join("edit_self");
    let out = run(&[
        "edit",
        ckpt.to_str().unwrap(),
        "--source-prompt",
        "blue square center",
        "--target-prompt",
        "blue square center",
        "--seed",
        "3",
        "--S",
        "0",
        "--L",
        "0",
        "--steps",
        "6",
        "--out-dir",
        edit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let i_s = std::fs::read(edit_dir.join("I_s.png")).unwrap();
    let i = std::fs::read(edit_dir.join("I.png")).unwrap();
    assert_eq!(i_s, i);
}

#[test]
fn dump_attn_runs_are_byte_identical() {
    let ckpt = micro_checkpoint();
    let d = workdir();
    for name in ["dump_a", "dump_b"] {
        let out = run(&[
            "dump-attn",
            ckpt.to_str().unwrap(),
            "--prompt",
            "green triangle center",
            "--seed",
            "5",
            "--steps",
            "6",
            "--steps-of-interest",
            "1,4",
            "--out-dir",
            d.join(name).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // Compare the artifact trees byte for byte.
    let walk = |root: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap();
                if e.file_type().unwrap().is_dir() {
                    stack.push(e.path());
                } else {
                    files.push(e.path());
                }
            }
        }
        files.sort();
        files
    };
    let fa = walk(&d.join("dump_a"));
    let fb = walk(&d.join("dump_b"));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.iter().any(|p| p.to_string_lossy().contains("attn")));
    for (a, b) in fa.iter().zip(fb.iter()) {
        assert_eq!(
            a.strip_prefix(&d.join("dump_a")).unwrap(),
            b.strip_prefix(&d.join("dump_b")).unwrap()
        );
        assert_eq!(
            std::fs::read(a).unwrap(),
            std::fs::read(b).unwrap(),
            "{a:?} differs"
        );
    }
}

#[test]
fn invert_zero_steps_reconstructs_exactly() {
    let ckpt = micro_checkpoint();
    let d = workdir().join("invert0");
    std::fs::create_dir_all(&d).unwrap();
    // Render a dataset image to invert.
    let out = run(&[
        "dataset",
        "--n",
        "1",
        "--seed",
        "3",
        "--image-size",
        "32",
        "--out-dir",
        d.join("data").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let img = d.join("data/images/00000.png");
    let out = run(&[
        "invert",
        ckpt.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--steps",
        "0",
        "--out-dir",
        d.join("run").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let original = std::fs::read(&img).unwrap();
    let recon = std::fs::read(d.join("run/reconstruction.png")).unwrap();
    assert_eq!(original, recon);
    assert!(d.join("run/latent.masa").exists());
}

#[test]
fn rerun_replays_manifest_byte_identically() {
    let ckpt = micro_checkpoint();
    let d = workdir();
    let first = d.join("rerun_first");
    let out = run(&[
        "edit",
        ckpt.to_str().unwrap(),
        "--source-prompt",
        "red circle left",
        "--target-prompt",
        "red circle right",
        "--seed",
        "11",
        "--steps",
        "5",
        "--out-dir",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let replay = d.join("rerun_second");
    let out = run(&[
        "rerun",
        first.join("manifest.json").to_str().unwrap(),
        "--out-dir",
        replay.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["I_s.png", "I.png", "manifest.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(replay.join(f)).unwrap(),
            "{f} differs between run and rerun"
        );
    }
}

#[test]
fn masa_seed_overrides_and_is_recorded() {
    let ckpt = micro_checkpoint();
    let d = workdir();
    let with_env = d.join("seed_env");
    let out = run_env(
        &[
            "sample",
            ckpt.to_str().unwrap(),
            "--prompt",
            "red circle left",
            "--seed",
            "1",
            "--steps",
            "4",
            "--out-dir",
            with_env.to_str().unwrap(),
        ],
        "MASA_SEED",
        "99",
    );
    assert!(out.status.success());
    let manifest = std::fs::read_to_string(with_env.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["command"]["seed"], 99, "resolved seed must be recorded");

    // Explicit run with seed 99 matches the overridden run.
    let explicit = d.join("seed_explicit");
    let out = run(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--prompt",
        "red circle left",
        "--seed",
        "99",
        "--steps",
        "4",
        "--out-dir",
        explicit.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(with_env.join("sample.png")).unwrap(),
        std::fs::read(explicit.join("sample.png")).unwrap()
    );
}

#[test]
fn ablate_single_cell_and_empty_sweep() {
    let ckpt = micro_checkpoint();
    let d = workdir().join("ablate1");
    let out = run(&[
        "ablate",
        ckpt.to_str().unwrap(),
        "--source-prompt",
        "red circle left",
        "--target-prompt",
        "red circle right",
        "--steps",
        "4",
        "--s-values",
        "2",
        "--l-values",
        "0",
        "--out-dir",
        d.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one cell");
    assert!(lines[0].starts_with("s,l,content,layout,combined"));
    assert!(d.join("grid.png").exists());

    let out = run(&[
        "ablate",
        ckpt.to_str().unwrap(),
        "--source-prompt",
        "red circle left",
        "--target-prompt",
        "red circle right",
        "--out-dir",
        d.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "empty sweep is a usage error");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let d = workdir().join("resume");
    std::fs::create_dir_all(&d).unwrap();
    let config = d.join("config.toml");
    std::fs::write(&config, MICRO_CONFIG).unwrap();

    // 8 steps in one go (the micro config budget).
    let full = d.join("full.masa");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        d.join("full").to_str().unwrap(),
        "--checkpoint-out",
        full.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // 5 steps, then resume for 3 more.
    let part = d.join("part.masa");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--steps",
        "5",
        "--out-dir",
        d.join("part").to_str().unwrap(),
        "--checkpoint-out",
        part.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let resumed = d.join("resumed.masa");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--steps",
        "3",
        "--resume",
        part.to_str().unwrap(),
        "--out-dir",
        d.join("resumed").to_str().unwrap(),
        "--checkpoint-out",
        resumed.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // The resumed checkpoint is byte-identical to the uninterrupted one,
    // loss history included.
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap()
    );
    // Loss curve is monotone in step count across the splice point.
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.join("resumed/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["stats"]["history_len"], 8);
    assert_eq!(manifest["stats"]["steps_trained"], 8);
}
