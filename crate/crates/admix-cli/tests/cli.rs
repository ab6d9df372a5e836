//! End-to-end checks of the command line surface: artifacts, exit codes,
//! and the PNG export contract.

use std::path::Path;
use std::process::{Command, Output};

fn admix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_admix"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[train]\nepochs = 2\nbatch_size = 30\nseed = 5\n\n[data]\ntrain_size = 60\ntest_size = 30\nseed = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn train_writes_manifest_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &["train", "--config", config.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("manifest.toml").exists());
    assert!(run.join("checkpoint_final.ckpt").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    // header plus 2 epochs x 2 batches
    assert_eq!(lines.len(), 5, "{log}");
    assert!(lines[0].starts_with("epoch,step,amce,mce,ace"));

    // the manifest is a valid config that reproduces the run
    let out2 = admix(
        &[
            "train",
            "--config",
            run.join("manifest.toml").to_str().unwrap(),
            "--out",
            "run2",
        ],
        dir.path(),
    );
    assert!(out2.status.success());
    let a = std::fs::read(run.join("checkpoint_final.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("run2/checkpoint_final.ckpt")).unwrap();
    assert_eq!(a, b, "manifest rerun produced a different checkpoint");
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nepochz = 2\n").unwrap();
    let out = admix(&["train", "--config", path.to_str().unwrap(), "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn out_of_range_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--override",
            "train.alpha=7.0",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.alpha"));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--override",
            "train.classifier_lr=1e12",
            "--override",
            "train.epochs=30",
            "--override",
            "train.max_skips=3",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = admix(&["train", "--config", "no_such.toml", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_emits_exactly_the_requested_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &["train", "--config", config.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success());
    let ckpt = dir.path().join("run/checkpoint_final.ckpt");

    let out = admix(
        &[
            "eval",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "top1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/checkpoint_final.eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "top1");
    let value: f64 = lines.next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));

    // a zero-strength attack reproduces clean accuracy
    let out = admix(
        &[
            "eval",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "top1,fgsm",
            "--fgsm-eps",
            "0",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("run/checkpoint_final.eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "top1,fgsm_acc@0");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], row[1]);

    // the default attack strength appears in the header
    let out = admix(
        &[
            "eval",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "fgsm",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("run/checkpoint_final.eval.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("fgsm_acc@8/255"));
}

#[test]
fn eval_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &["train", "--config", config.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = admix(
        &[
            "eval",
            "--config",
            config.to_str().unwrap(),
            "--override",
            "data.num_classes=4",
            "--checkpoint",
            dir.path().join("run/checkpoint_final.ckpt").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

fn decode_gray(path: &Path) -> Vec<f64> {
    let img = image::open(path).unwrap().to_luma8();
    img.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
}

#[test]
fn export_gallery_recomposes_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("two.toml");
    std::fs::write(
        &config_path,
        "[train]\nepochs = 1\nbatch_size = 30\nimages_per_set = 2\nseed = 6\n\n[data]\ntrain_size = 60\ntest_size = 30\nseed = 6\n",
    )
    .unwrap();
    let out = admix(
        &["train", "--config", config_path.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("run/checkpoint_final.ckpt");

    // degenerate fixed lambda: the mixed label must equal source 0's one-hot
    let out = admix(
        &[
            "export-mixed",
            "--config",
            config_path.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            "gallery",
            "--count",
            "3",
            "--lambda",
            "fixed:1,0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gallery = dir.path().join("gallery");
    let manifest = std::fs::read_to_string(gallery.join("export_manifest.txt")).unwrap();

    let field = |set: usize, key: &str| -> String {
        manifest
            .lines()
            .find(|l| l.starts_with(&format!("set{set}.{key} = ")))
            .unwrap_or_else(|| panic!("missing set{set}.{key}"))
            .split(" = ")
            .nth(1)
            .unwrap()
            .to_string()
    };
    for set in 0..3 {
        let labels: Vec<usize> =
            field(set, "labels").split(',').map(|v| v.parse().unwrap()).collect();
        let y_mix: Vec<f64> = field(set, "y_mix").split(',').map(|v| v.parse().unwrap()).collect();
        for (class, v) in y_mix.iter().enumerate() {
            let expect = if class == labels[0] { 1.0 } else { 0.0 };
            assert_eq!(*v, expect, "set {set} mixed label");
        }

        // masks round-trip within one quantization step, sum to ~1, and the
        // emitted mix recomposes from the emitted masks and sources
        let masks: Vec<Vec<f64>> = (0..2)
            .map(|i| decode_gray(&gallery.join(format!("set{set}_mask{i}.png"))))
            .collect();
        let sources: Vec<Vec<f64>> = (0..2)
            .map(|i| decode_gray(&gallery.join(format!("set{set}_src{i}.png"))))
            .collect();
        let mix = decode_gray(&gallery.join(format!("set{set}_mix.png")));
        for p in 0..mix.len() {
            let mask_sum = masks[0][p] + masks[1][p];
            assert!((mask_sum - 1.0).abs() <= 2.0 / 255.0, "mask sum {mask_sum}");
            let recomposed = sources[0][p] * masks[0][p] + sources[1][p] * masks[1][p];
            assert!(
                (recomposed - mix[p]).abs() <= 2.0 / 255.0,
                "set {set} pixel {p}: recomposed {recomposed} vs emitted {}",
                mix[p]
            );
        }

        // decode(encode(mask)) stays within the 8-bit quantization bound of
        // the exact mask, recomputed through the library
        let exact = recompute_masks(&ckpt, set);
        for (i, decoded) in masks.iter().enumerate() {
            let plane = exact.tensor().index0(i);
            for (d, e) in decoded.iter().zip(plane.data()) {
                assert!((d - e).abs() <= 1.0 / 255.0, "set {set} mask {i}: {d} vs {e}");
            }
        }
    }
}

/// Regenerates the exact policy masks the exporter quantized, using the
/// same checkpoint, test split, and fixed lambda draw.
fn recompute_masks(ckpt: &Path, set: usize) -> admix::mixblock::PolicyMasks {
    use admix::data::DataConfig;
    let state = admix::trainer::ModelState::load(ckpt).unwrap();
    let data = DataConfig { train_size: 60, test_size: 30, seed: 6, ..DataConfig::default() };
    let (_, test_split) = data.validate().unwrap().load().unwrap();
    let mut tape = admix::diffmath::Tape::new();
    let enc = state.encoder.mount(&mut tape, false);
    let theta = state.generator.mount(&mut tape, false);
    let imgs: Vec<_> =
        (0..2).map(|i| tape.leaf(test_split[set * 2 + i].pixels.clone())).collect();
    let g = admix::mixblock::generate(&mut tape, &enc, 3, &imgs, &[1.0, 0.0], &theta).unwrap();
    admix::mixblock::PolicyMasks::new(tape.value(g.masks).clone()).unwrap()
}

#[test]
fn export_io_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = admix(
        &["train", "--config", config.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success());
    // a file where the output directory should be
    std::fs::write(dir.path().join("blocked"), b"x").unwrap();
    let out = admix(
        &[
            "export-mixed",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            dir.path().join("run/checkpoint_final.ckpt").to_str().unwrap(),
            "--out",
            "blocked",
            "--count",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn out_root_environment_variable_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_admix"))
        .args(["train", "--config", config.to_str().unwrap()])
        .env("ADMIX_OUT_ROOT", dir.path().join("root"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let entries: Vec<_> = std::fs::read_dir(dir.path().join("root")).unwrap().collect();
    assert_eq!(entries.len(), 1);
}
