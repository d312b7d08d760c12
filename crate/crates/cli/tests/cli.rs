mod common;

use std::fs;

use common::*;
use ssm_lab::checkpoint::{self, AnyCheckpoint, FORMAT_VERSION};
use ssm_lab::gradcheck::{corrupted_case, run_cases};
use ssm_lab::{exit, CliError};
use tempfile::tempdir;

#[test]
fn train_writes_one_record_per_epoch() {
    let dir = tempdir().unwrap();
    let config = small_synthetic_config(dir.path(), "run", "");
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i);
        assert_eq!(r["eval"]["head_accuracies"].as_array().unwrap().len(), 4);
    }
    for f in ["final.ckpt", "best.ckpt"] {
        assert!(dir.path().join("run").join(f).is_file());
    }
}

#[test]
fn save_every_and_early_stop() {
    let dir = tempdir().unwrap();
    let config = small_synthetic_config(dir.path(), "run", "save_every = 1\ntarget_accuracy = 0.01");
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_dir = dir.path().join("run");
    assert_eq!(fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 1);
    assert!(run_dir.join("epoch-000.ckpt").is_file());
    assert!(!run_dir.join("epoch-001.ckpt").exists());
    let AnyCheckpoint::F32(c) = checkpoint::load(&run_dir.join("final.ckpt")).unwrap() else { panic!() };
    assert_eq!(c.next_epoch, 1);
}

#[test]
fn indivisible_width_is_a_config_error_without_output() {
    let dir = tempdir().unwrap();
    let body = format!("out_dir = \"never\"\n[model]\nwidths = [250]\nnum_heads = 4\n{}", synthetic_section(2, 4, 2, 6));
    let config = write_config(dir.path(), "bad.toml", &body);
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), i32::from(exit::CONFIG));
    let err = stderr(&out);
    assert!(err.contains("model.num_heads") && err.contains("divisible"), "{err}");
    assert!(!dir.path().join("never").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempdir().unwrap();
    let cases = [
        ("typo.toml", "sede = 3".to_string()),
        ("precision.toml", "precision = 16".to_string()),
        ("milestones.toml", "[train]\nepochs = 4\nmilestones = [5]".to_string()),
        (
            "missing.toml",
            "[data]\nsource = \"idx\"\ntrain_images = \"nope\"\ntrain_labels = \"nope\"\ntest_images = \"nope\"\ntest_labels = \"nope\"".to_string(),
        ),
    ];
    for (name, body) in cases {
        let config = write_config(dir.path(), name, &body);
        let out = run(&["train", "--config", s(&config), "--out", s(&dir.path().join("out"))]);
        assert_eq!(code(&out), i32::from(exit::CONFIG), "{name}: {}", stderr(&out));
    }
    assert!(!dir.path().join("out").exists());
    assert_eq!(code(&run(&["train"])), i32::from(exit::CONFIG));
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn dataset_and_io_errors() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad-idx");
    fs::write(&bad, [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let body = format!(
        "[data]\nsource = \"idx\"\ntrain_images = {bad:?}\ntrain_labels = {bad:?}\ntest_images = {bad:?}\ntest_labels = {bad:?}\n"
    );
    let config = write_config(dir.path(), "c.toml", &body);
    let out = run(&["train", "--config", s(&config), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), i32::from(exit::DATASET), "{}", stderr(&out));

    let out = run(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&out), i32::from(exit::IO));
}

#[test]
fn checkpoint_format_errors_are_incompatible() {
    let dir = tempdir().unwrap();
    let config = small_synthetic_config(dir.path(), "run", "epochs = 1\nmilestones = []");
    assert_eq!(code(&run(&["train", "--config", s(&config)])), 0);
    let good = fs::read(dir.path().join("run/final.ckpt")).unwrap();

    let mut versioned = good.clone();
    versioned[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let path = dir.path().join("v.ckpt");
    fs::write(&path, &versioned).unwrap();
    let out = run(&["eval", "--checkpoint", s(&path)]);
    assert_eq!(code(&out), i32::from(exit::INCOMPATIBLE));
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&path)])), i32::from(exit::INCOMPATIBLE));

    fs::write(&path, b"hello").unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&path)])), i32::from(exit::INCOMPATIBLE));

    // different class count in the data than the checkpoint's model predicts
    let other = write_config(dir.path(), "other.toml", &synthetic_section(5, 4, 4, 8));
    let out = run(&["eval", "--checkpoint", s(&dir.path().join("run/final.ckpt")), "--config", s(&other)]);
    assert_eq!(code(&out), i32::from(exit::INCOMPATIBLE), "{}", stderr(&out));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempdir().unwrap();
    for precision in ["32", "64"] {
        let config = small_synthetic_config(dir.path(), &format!("p{precision}"), "epochs = 2\nmilestones = []");
        assert_eq!(code(&run(&["train", "--config", s(&config), "--precision", precision])), 0);
        let bytes = fs::read(dir.path().join(format!("p{precision}/final.ckpt"))).unwrap();
        let decoded = checkpoint::decode(&bytes).unwrap();
        let again = match &decoded {
            AnyCheckpoint::F32(c) => c.encode(),
            AnyCheckpoint::F64(c) => c.encode(),
        };
        assert_eq!(again, bytes);
        assert_eq!(checkpoint::decode(&again).unwrap(), decoded);
        assert_eq!(matches!(decoded, AnyCheckpoint::F64(_)), precision == "64");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempdir().unwrap();
    let full = small_synthetic_config(dir.path(), "full", "epochs = 4\nmilestones = [2]\nsave_every = 1");
    assert_eq!(code(&run(&["train", "--config", s(&full)])), 0);
    let part = small_synthetic_config(dir.path(), "part", "epochs = 4\nmilestones = [2]");
    let part_dir = dir.path().join("part");
    fs::create_dir_all(&part_dir).unwrap();
    let metrics = fs::read_to_string(dir.path().join("full/metrics.jsonl")).unwrap();
    let first_two: String = metrics.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(part_dir.join("metrics.jsonl"), first_two).unwrap();

    let resume_from = dir.path().join("full/epoch-001.ckpt");
    let out = run(&["train", "--config", s(&part), "--checkpoint", s(&resume_from)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(part_dir.join("metrics.jsonl")).unwrap(), metrics);

    let a = checkpoint::load(&dir.path().join("full/final.ckpt")).unwrap();
    let b = checkpoint::load(&part_dir.join("final.ckpt")).unwrap();
    let (AnyCheckpoint::F32(a), AnyCheckpoint::F32(b)) = (a, b) else { panic!() };
    assert_eq!(a.next_epoch, 4);
    assert_eq!(b.next_epoch, 4);
    for ((_, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
        let bits = |t: &ssm_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pa.tensor), bits(&pb.tensor), "{}", pa.name);
    }
    assert_eq!(a.sgd, b.sgd);
}

#[test]
fn resume_rejects_other_architecture() {
    let dir = tempdir().unwrap();
    let a = small_synthetic_config(dir.path(), "a", "epochs = 1\nmilestones = []");
    assert_eq!(code(&run(&["train", "--config", s(&a)])), 0);
    let body = fs::read_to_string(&a).unwrap().replace("num_heads = 4", "num_heads = 2");
    let b = write_config(dir.path(), "b.toml", &body);
    let out = run(&["train", "--config", s(&b), "--checkpoint", s(&dir.path().join("a/final.ckpt"))]);
    assert_eq!(code(&out), i32::from(exit::INCOMPATIBLE));
}

#[test]
fn fresh_model_is_at_chance_level() {
    let dir = tempdir().unwrap();
    let body = format!(
        "out_dir = \"fresh\"\n[model]\nwidths = [8, 16]\n[train]\nepochs = 0\nmilestones = []\n{}",
        synthetic_section(10, 2, 100, 8)
    );
    let config = write_config(dir.path(), "fresh.toml", &body);
    assert_eq!(code(&run(&["train", "--config", s(&config)])), 0);
    let ckpt = dir.path().join("fresh/final.ckpt");
    let first = run(&["eval", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&first), 0);
    let report = json(&first);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
    assert_eq!(report["head_accuracies"].as_array().unwrap().len(), 4);
    let oracle = report["oracle_accuracy"].as_f64().unwrap();
    assert!(report["head_accuracies"].as_array().unwrap().iter().all(|h| oracle >= h.as_f64().unwrap()));

    let second = run(&["eval", "--checkpoint", s(&ckpt)]);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn gradcam_writes_deterministic_maps() {
    let dir = tempdir().unwrap();
    let config = small_synthetic_config(dir.path(), "run", "epochs = 1\nmilestones = []");
    assert_eq!(code(&run(&["train", "--config", s(&config)])), 0);
    let ckpt = dir.path().join("run/final.ckpt");
    let cam = |out: &str, extra: &[&str]| {
        let out_dir = dir.path().join(out);
        let mut args = vec!["gradcam", "--checkpoint", s(&ckpt), "--image", "2", "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    };
    let a = cam("a", &[]);
    assert_eq!(a.len(), 5);
    for f in &a {
        let (w, h, _) = parse_pgm(&fs::read(f).unwrap());
        assert_eq!((w, h), (8, 8));
    }
    let b = cam("b", &[]);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(cam("c", &["--head", "2", "--class", "1"]).len(), 2);

    for bad in [["--head", "5"], ["--class", "2"]] {
        let out_dir = dir.path().join("bad");
        let mut args = vec!["gradcam", "--checkpoint", s(&ckpt), "--image", "0", "--out", s(&out_dir)];
        args.extend_from_slice(&bad);
        assert_eq!(code(&run(&args)), i32::from(exit::CONFIG));
        assert!(!out_dir.exists());
    }
    let out = run(&["gradcam", "--checkpoint", s(&ckpt), "--image", "24"]);
    assert_eq!(code(&out), i32::from(exit::CONFIG));
}

#[test]
fn gradcam_needs_conv_backbone() {
    let dir = tempdir().unwrap();
    let body = format!(
        "out_dir = \"mlp\"\n[model]\nbackbone = \"mlp\"\nwidths = [8]\nnum_heads = 2\n[train]\nepochs = 1\nmilestones = []\nbatch_size = 8\naugment_pad = 0\n{}",
        synthetic_section(2, 8, 4, 6)
    );
    let config = write_config(dir.path(), "mlp.toml", &body);
    assert_eq!(code(&run(&["train", "--config", s(&config)])), 0);
    let out = run(&["gradcam", "--checkpoint", s(&dir.path().join("mlp/final.ckpt")), "--image", "0"]);
    assert_eq!(code(&out), i32::from(exit::INCOMPATIBLE));
}

#[test]
fn ensemble_of_duplicates_equals_solo() {
    let dir = tempdir().unwrap();
    let config = small_synthetic_config(dir.path(), "run", "epochs = 2\nmilestones = []");
    assert_eq!(code(&run(&["train", "--config", s(&config)])), 0);
    let ckpt = dir.path().join("run/final.ckpt");
    let solo = json(&run(&["eval", "--checkpoint", s(&ckpt)]))["accuracy"].as_f64().unwrap();
    for rule in ["mean-softmax", "mean-logits"] {
        let out = run(&["ensemble", "--rule", rule, "--checkpoint", s(&ckpt), "--checkpoint", s(&ckpt)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let report = json(&out);
        assert_eq!(report["accuracy"].as_f64().unwrap(), solo);
        assert_eq!(report["members"].as_array().unwrap().len(), 2);
    }
    let threaded = bin()
        .env("SSM_LAB_THREADS", "3")
        .args(["ensemble", "--checkpoint", s(&ckpt), "--checkpoint", s(&ckpt), "--checkpoint", s(&ckpt)])
        .output()
        .unwrap();
    assert_eq!(json(&threaded)["accuracy"].as_f64().unwrap(), solo);
    assert_eq!(code(&run(&["ensemble", "--checkpoint", s(&ckpt)])), i32::from(exit::CONFIG));
}

#[test]
fn params_arithmetic() {
    let dir = tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "p.toml",
        "[model]\nbackbone = \"mlp\"\nwidths = [2048]\nnum_heads = 4\nbn_relu_on_last = false\nnum_classes = 1000\ninput = [1, 1, 1]\n",
    );
    let t = json(&run(&["params", "--config", s(&config)]));
    let n = |k: &str| t[k].as_i64().unwrap();
    assert_eq!(n("fc2") - n("fc1"), 2_049_000);
    assert_eq!(n("fc3") - n("fc1"), 2 * 2_049_000);
    assert_eq!(n("ssm") - n("fc1"), 3_081_144);

    let one = write_config(
        dir.path(),
        "one.toml",
        "[model]\nbackbone = \"mlp\"\nwidths = [64]\nnum_heads = 1\nbn_relu_on_last = false\nnum_classes = 10\ninput = [1, 4, 4]\n",
    );
    let t = json(&run(&["params", "--config", s(&one)]));
    assert_eq!(t["ssm"], t["fc1"]);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path(), "g.toml", "[model]\nwidths = [4, 8]\nnum_heads = 4\nnum_classes = 3\n");
    let out = run(&["gradcheck", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let names: Vec<String> =
        json(&out)["cases"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap().to_string()).collect();
    for expected in
        ["linear", "conv2d", "batch_norm_train", "batch_norm_eval", "relu", "max_pool2d", "global_avg_pool", "cross_entropy", "ssm_head", "full_model"]
    {
        assert!(names.iter().any(|n| n == expected), "{expected}");
    }

    let report = run_cases(&[corrupted_case()]).unwrap();
    assert!(!report.passed());
    let err = CliError::CheckFailed(String::new());
    assert_eq!(err.exit_code(), exit::FAILURE);
}
