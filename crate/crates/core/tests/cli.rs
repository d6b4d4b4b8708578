use std::path::Path;
use std::process::{Command, Output};

use octforge::preprocess::RgbImage;
use serde_json::Value;

fn octforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn octforge")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn manifest_rows(dir: &Path) -> usize {
    let text = std::fs::read_to_string(dir.join("manifest.csv")).unwrap();
    text.lines().count() - 1
}

#[test]
fn synth_counts_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = stdout_json(&octforge(&["synth", "--out", a.to_str().unwrap(), "--count", "10", "--seed", "7"]));
    assert_eq!(out["rows"], 40);
    assert_eq!(manifest_rows(&a), 40);
    stdout_json(&octforge(&["synth", "--out", b.to_str().unwrap(), "--count", "10", "--seed", "7"]));
    assert_eq!(std::fs::read(a.join("manifest.csv")).unwrap(), std::fs::read(b.join("manifest.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("nearest/fake/00003.png")).unwrap(),
        std::fs::read(b.join("nearest/fake/00003.png")).unwrap()
    );

    let c = tmp.path().join("c");
    let out = octforge(&["synth", "--out", c.to_str().unwrap(), "--count", "10", "--seed", "7", "--families", "nearest"]);
    assert_eq!(stdout_json(&out)["rows"], 20);
    assert_eq!(manifest_rows(&c), 20);
}

#[test]
fn inspect_gray_and_fake() {
    let tmp = tempfile::tempdir().unwrap();
    let gray = tmp.path().join("gray.png");
    RgbImage::filled(128, 128, [90, 90, 90]).save_png(&gray).unwrap();
    let dump = tmp.path().join("cdi.png");
    let si = tmp.path().join("si.png");
    let out = stdout_json(&octforge(&[
        "inspect",
        gray.to_str().unwrap(),
        "--dump-cdi",
        dump.to_str().unwrap(),
        "--dump-si",
        si.to_str().unwrap(),
    ]));
    assert_eq!(out["hf_cdi"], 0.0);
    let img = RgbImage::load_png(&dump).unwrap();
    let first = img.pixel(0, 0);
    assert!(first.iter().all(|&c| c == 128), "{first:?}");
    for y in 0..img.height() {
        for x in 0..img.width() {
            assert_eq!(img.pixel(y, x), first);
        }
    }
    assert!(si.exists());

    let corpus = tmp.path().join("corpus");
    stdout_json(&octforge(&["synth", "--out", corpus.to_str().unwrap(), "--count", "3", "--seed", "11"]));
    for i in 0..3 {
        let real = corpus.join(format!("camera/real/{i:05}.png"));
        let fake = corpus.join(format!("nearest/fake/{i:05}.png"));
        let hr = stdout_json(&octforge(&["inspect", real.to_str().unwrap()]))["hf_cdi"].as_f64().unwrap();
        let hf = stdout_json(&octforge(&["inspect", fake.to_str().unwrap()]))["hf_cdi"].as_f64().unwrap();
        assert!(hf > hr, "image {i}: fake {hf} real {hr}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let out = octforge(&["inspect", "/nonexistent/x.png"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    assert_eq!(octforge(&["synth", "--count", "3"]).status.code(), Some(2));
    assert_eq!(octforge(&["bogus"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let out = octforge(&[
        "synth", "--out", tmp.path().to_str().unwrap(), "--count", "2", "--seed", "1", "--families", "bicubic",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 3\n").unwrap();
    let out = octforge(&[
        "train", "--manifest", "m.csv", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", "o",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = octforge(&["protocol", "--spec", "n9-synth", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let run = tmp.path().join("run");
    stdout_json(&octforge(&[
        "synth", "--out", corpus.to_str().unwrap(), "--count", "10", "--seed", "3", "--families", "nearest,bilinear",
    ]));
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nstage1_max_epochs = 1\nstage2_max_epochs = 1\n").unwrap();
    let manifest = corpus.join("manifest.csv");
    let out = stdout_json(&octforge(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--lambda",
        "0.5",
        "--out",
        run.to_str().unwrap(),
    ]));
    assert_eq!(out["stage"], 2);
    assert_eq!(out["lambda"], 0.5);
    assert!(out["test_acc"].as_f64().is_some());
    let model = run.join("model.ckpt");
    assert!(model.exists() && run.join("train_log.csv").exists());

    let img = corpus.join("nearest/fake/00000.png");
    let v = stdout_json(&octforge(&["eval", "--model", model.to_str().unwrap(), "--image", img.to_str().unwrap()]));
    assert!(matches!(v["verdict"].as_str(), Some("real" | "fake")));
    let w = &v["mean_fusion_weights"];
    assert!((w["cdi"].as_f64().unwrap() + w["si"].as_f64().unwrap() - 1.0).abs() < 1e-5);
    assert_eq!(v["crops"].as_array().unwrap().len(), 1);

    let all = stdout_json(&octforge(&["eval", "--model", model.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]));
    assert_eq!(all["images"], 30);

    let out = octforge(&["train", "--manifest", manifest.to_str().unwrap(), "--seed", "3", "--stage", "2", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
