//! End-to-end shell workflow: synth → train-encoder → extract-features →
//! train → evaluate → predict/crf/prune-bench, plus exit-code conventions.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn esupp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esupp"))
        .args(args)
        .env("ESUPP_THREADS", "1")
        .output()
        .expect("spawn esupp")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(path: &Path) {
    let cfg = serde_json::json!({
        "net": {
            "variant": "unetpp",
            "depth": 2,
            "base_channels": 2,
            "in_channels": 1,
            "input_size": 16,
            "seed": 5
        },
        "train": { "epochs": 2, "batch_size": 2, "lr": 0.001, "seed": 9 }
    });
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn full_workflow_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let config = root.join("config.json");
    write_config(&config);

    let out = esupp(&[
        "synth",
        "--seed",
        "11",
        "--cases",
        "4",
        "--slices",
        "2",
        "--size",
        "16",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_ok(&out, "synth");
    assert!(data.join("manifest.json").exists());

    let enc_out = root.join("enc");
    let out = esupp(&[
        "train-encoder",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        enc_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "train-encoder");
    let encoder = enc_out.join("encoder");
    assert!(encoder.join("manifest.json").exists());
    assert!(enc_out.join("encoder_loss.csv").exists());

    let cache = root.join("cache");
    let out = esupp(&[
        "extract-features",
        "--encoder",
        encoder.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    assert_ok(&out, "extract-features");
    assert!(cache.join("manifest.json").exists());

    // one grid cell per supervision style, liver phase
    let ckpts = root.join("ckpts");
    for (mode, sup) in [("es", "ds"), ("un", "ds")] {
        let cell = ckpts.join(format!("{mode}-{sup}"));
        let out = esupp(&[
            "train",
            "--mode",
            mode,
            "--supervision",
            sup,
            "--phase",
            "liver",
            "--data",
            data.to_str().unwrap(),
            "--cache",
            cache.to_str().unwrap(),
            "--encoder",
            encoder.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            cell.to_str().unwrap(),
        ]);
        assert_ok(&out, "train");
        assert!(cell.join("checkpoint/manifest.json").exists());
        let csv = fs::read_to_string(cell.join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3, "2 epochs + header");
        // grid layout for evaluate: {tag}/{phase}
        fs::rename(cell.join("checkpoint"), cell.join("liver")).unwrap();
    }

    let eval_out = root.join("eval");
    let out = esupp(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoints-dir",
        ckpts.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
        "--prune-levels",
        "1,2",
    ]);
    assert_ok(&out, "evaluate");
    let csv = fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    assert!(csv.starts_with("mode,phase,head,"));
    assert_eq!(csv.lines().count(), 5, "2 cells x 2 heads + header");

    // cascade over the dataset's own volume-less slices: single .tsr input
    let slice = data.join("samples");
    let first_image = fs::read_dir(&slice)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().ends_with(".image.tsr"))
        .min()
        .unwrap();
    let liver_ckpt = ckpts.join("es-ds/liver");
    let pred_out = root.join("pred");
    let out = esupp(&[
        "predict",
        "--liver-net",
        liver_ckpt.to_str().unwrap(),
        "--tumor-net",
        liver_ckpt.to_str().unwrap(),
        "--input",
        first_image.to_str().unwrap(),
        "--out",
        pred_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "predict");
    assert!(pred_out.join("liver_mask/manifest.json").exists());
    assert!(pred_out.join("tumor_mask/manifest.json").exists());

    let out = esupp(&[
        "prune-bench",
        "--checkpoint",
        liver_ckpt.to_str().unwrap(),
        "--levels",
        "1,2",
        "--n",
        "3",
    ]);
    assert_ok(&out, "prune-bench");
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.starts_with("level,params,median_ms,matches_full"));
    assert!(report.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn crf_subcommand_round_trips_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // synthesize a small prob map + intensity image via the library
    let probs = esupp_core::tensor::Tensor::from_fn(&[8, 8], |i| {
        let (r, c) = (i / 8, i % 8);
        if (2..6).contains(&r) && (2..6).contains(&c) {
            0.95
        } else {
            0.05
        }
    });
    let image = probs.map(|p| if p > 0.5 { 0.8 } else { 0.2 });
    let p_probs = root.join("probs.tsr");
    let p_image = root.join("image.tsr");
    esupp_core::io::tsr::write_tensor(&p_probs, &probs).unwrap();
    esupp_core::io::tsr::write_tensor(&p_image, &image).unwrap();

    // short-range, softly-coupled smoothing that respects a small island
    let p_params = root.join("crf.json");
    fs::write(
        &p_params,
        r#"{"w1": 0.5, "w2": 0.5, "theta_alpha": 1.5, "theta_beta": 0.1, "theta_gamma": 1.5, "iterations": 5}"#,
    )
    .unwrap();

    let p_out = root.join("mask.tsr");
    let out = esupp(&[
        "crf",
        "--probs",
        p_probs.to_str().unwrap(),
        "--image",
        p_image.to_str().unwrap(),
        "--params",
        p_params.to_str().unwrap(),
        "--out",
        p_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "crf");
    let mask = esupp_core::io::tsr::read_tensor(&p_out).unwrap();
    assert!(mask.is_binary());
    assert_eq!(mask.data()[3 * 8 + 3], 1.0);
    assert_eq!(mask.data()[0], 0.0);
}

#[test]
fn grad_check_smoke() {
    let out = esupp(&["grad-check", "--reps", "1"]);
    assert_ok(&out, "grad-check");
    assert!(String::from_utf8_lossy(&out.stdout).contains("all within"));
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // validation error: size not divisible by 16 → exit 2
    let out = esupp(&[
        "synth",
        "--cases",
        "3",
        "--size",
        "15",
        "--out",
        root.join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // runtime error: missing checkpoint path → exit 3
    let out = esupp(&[
        "prune-bench",
        "--checkpoint",
        root.join("nope").to_str().unwrap(),
        "--levels",
        "1",
        "--n",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // clap usage error stays 2
    let out = esupp(&["synth", "--cases"]);
    assert_eq!(out.status.code(), Some(2));
}
