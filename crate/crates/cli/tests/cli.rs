use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};

fn rtcan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtcan"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rtcan(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const DESK: &str = r#"
[data]
manifest = "data/manifest.json"
target_size = [128, 160]

[model]
base_width = 16

[train]
epochs = 5

[output]
directory = "run"
"#;

fn desk(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--count", "10", "--seed", "7", "--train-fraction", "0.8"]);
    fs::write(dir.join("run.toml"), DESK).unwrap();
}

#[test]
fn synth_is_deterministic_and_validates_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let printed = ok(d, &["synth", "--out", "a", "--count", "8", "--seed", "7", "--difficulty", "easy"]);
    assert_eq!(printed.trim(), Path::new("a").join("manifest.json").to_str().unwrap());
    ok(d, &["synth", "--out", "b", "--count", "8", "--seed", "7", "--difficulty", "easy"]);
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 8 * 3 + 1);
    assert_eq!(a, b);

    let out = rtcan(d, &["synth", "--out", "c", "--count", "0"]);
    assert!(!out.status.success());
    assert!(!d.join("c").exists());
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "a", "--count", "2", "--seed", "1"]);
    let before = tree(&d.join("a"));
    let out = rtcan(d, &["synth", "--out", "a", "--count", "3", "--seed", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert_eq!(tree(&d.join("a")), before);
    ok(d, &["synth", "--out", "a", "--count", "2", "--seed", "1", "--force"]);
    assert_eq!(tree(&d.join("a")), before);
}

#[test]
fn split_command_assigns_all_three_parts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "a", "--count", "10", "--seed", "1"]);
    let line = ok(d, &["split", "--manifest", "a/manifest.json", "--seed", "4"]);
    assert!(line.contains("train 7, val 1, test 2"), "{line}");
}

#[test]
fn train_validates_config_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[data]\n[output]\ndirectory = \"run\"\n").unwrap();
    let out = rtcan(d, &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    assert!(!d.join("run").exists());

    fs::write(d.join("typo.toml"), DESK.replace("epochs", "epoch")).unwrap();
    assert!(!rtcan(d, &["train", "--config", "typo.toml"]).status.success());
}

#[test]
fn desk_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk(d);
    ok(d, &["train", "--config", "run.toml"]);
    let run = d.join("run");
    for f in [
        "history.jsonl",
        "best.safetensors",
        "best.json",
        "test_report.json",
        "test_diagnostics.json",
        "config.toml",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 5);
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    for line in ["lr = 0.02", "momentum = 0.9", "weight_decay = 0.0005", "batch_size = 4"] {
        assert!(echoed.contains(line), "{line} not in\n{echoed}");
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("test_report.json")).unwrap()).unwrap();
    let mut keys: Vec<_> = report.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["accuracy", "beta", "conventions", "f2", "iou", "precision", "recall"]);

    // eval prints and writes the same report; a second run needs --force
    let printed = ok(d, &["eval", "--checkpoint", "run/best.safetensors", "--manifest", "data", "--split", "test"]);
    assert_eq!(printed, fs::read_to_string(run.join("eval_test.json")).unwrap());
    assert_eq!(printed, fs::read_to_string(run.join("test_report.json")).unwrap());
    let args = ["eval", "--checkpoint", "run/best.safetensors", "--manifest", "data", "--split", "test"];
    assert!(!rtcan(d, &args).status.success());

    // wrong architecture
    fs::write(d.join("c.toml"), DESK.replace("base_width = 16", "base_width = 16\nscheme = \"C\"")).unwrap();
    let out = rtcan(
        d,
        &["eval", "--checkpoint", "run/best.safetensors", "--manifest", "data", "--config", "c.toml", "--out", "x.json"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    assert!(!d.join("x.json").exists());

    // odd-sized input comes back at its own size
    let rgb = RgbImage::from_fn(45, 37, |x, y| Rgb([(3 * x) as u8, (5 * y) as u8, 90]));
    let th = GrayImage::from_fn(45, 37, |x, y| Luma([(x * y % 256) as u8]));
    rgb.save(d.join("rgb.png")).unwrap();
    th.save(d.join("th.png")).unwrap();
    ok(d, &["predict", "--checkpoint", "run/best.safetensors", "--rgb", "rgb.png", "--thermal", "th.png", "--out", "pred"]);
    let mask = image::open(d.join("pred/mask.png")).unwrap().to_luma8();
    let over = image::open(d.join("pred/overlay.png")).unwrap().to_rgb8();
    assert_eq!(mask.dimensions(), (45, 37));
    assert_eq!(over.dimensions(), (45, 37));
    for ((m, o), i) in mask.pixels().zip(over.pixels()).zip(rgb.pixels()) {
        match m.0[0] {
            0 => assert_eq!(o, i),
            255 => {
                let want: [u8; 3] =
                    std::array::from_fn(|c| ((i.0[c] as f64 + [0.0, 255.0, 0.0][c]) * 0.5).round() as u8);
                assert_eq!(o.0, want);
            }
            v => panic!("mask value {v}"),
        }
    }

    let out = rtcan(d, &["predict", "--checkpoint", "run/best.safetensors", "--rgb", "missing.png", "--thermal", "th.png", "--out", "p2"]);
    assert!(!out.status.success());
    fs::write(d.join("junk.png"), b"not a png").unwrap();
    let out = rtcan(d, &["predict", "--checkpoint", "run/best.safetensors", "--rgb", "junk.png", "--thermal", "th.png", "--out", "p3"]);
    assert!(!out.status.success());
}

#[test]
fn ablate_desk_table_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk(d);
    let cfg = DESK.replace("epochs = 5", "epochs = 2");
    fs::write(d.join("a.toml"), cfg.replace("\"run\"", "\"ab1\"")).unwrap();
    fs::write(d.join("b.toml"), cfg.replace("\"run\"", "\"ab2\"")).unwrap();
    let text = ok(d, &["ablate", "--config", "a.toml"]);
    ok(d, &["ablate", "--config", "b.toml"]);
    let j1 = fs::read_to_string(d.join("ab1/ablation.json")).unwrap();
    assert_eq!(j1, fs::read_to_string(d.join("ab2/ablation.json")).unwrap());
    assert_eq!(text, fs::read_to_string(d.join("ab1/ablation.txt")).unwrap());

    let table: serde_json::Value = serde_json::from_str(&j1).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let schemes: Vec<_> = rows.iter().map(|r| r["scheme"].as_str().unwrap()).collect();
    assert_eq!(schemes, ["A", "B", "C"]);
    for r in rows {
        for k in ["accuracy", "iou", "f2"] {
            let v = r[k].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{k} = {v}");
        }
    }
    assert!(text.lines().count() == 4 && text.lines().skip(1).all(|l| l.split_whitespace().count() == 5));
}
