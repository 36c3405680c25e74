//! End-to-end runs of the `gradmap` binary on a tiny synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gradmap::data::{encode_idx_images, encode_idx_labels};
use gradmap::rng::CounterRng;
use gradmap::viz::{RenderedImage, LABEL_HEIGHT};
use gradmap::Tensor;

fn gradmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmap")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = gradmap(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Class `k` is a bright vertical bar at column `2 + 2k` over faint noise.
fn synthetic_split(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = CounterRng::new(seed);
    let mut data = Vec::with_capacity(n * 784);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for &k in &labels {
        for _ in 0..28 {
            for c in 0..28 {
                let bar = if c / 2 == 1 + k { 1.0 } else { 0.0 };
                data.push((bar + 0.1 * rng.next_f64() as f32).min(1.0));
            }
        }
    }
    (Tensor::new(vec![n, 28, 28, 1], data).unwrap(), labels)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        std::fs::create_dir_all(&data).unwrap();
        for (prefix, n, seed) in [("train", 200, 1), ("t10k", 40, 2)] {
            let (images, labels) = synthetic_split(n, seed);
            std::fs::write(data.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&images).unwrap()).unwrap();
            std::fs::write(data.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
        }
        let model = root.join("model.ckpt");
        ok(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "1", "--batch", "20", "--seed", "3"]);
        Fixture {
            _dir: dir,
            root,
            data,
            model,
        }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_metrics_and_manifest() {
    let f = fixture();
    assert!(f.model.exists());
    let metrics = std::fs::read_to_string(f.root.join("model.ckpt.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_accuracy,test_accuracy"));
    assert_eq!(lines.count(), 1);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.root.join("model.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["invocation"]["epochs"], 1);
    assert!(manifest["outputs"]["model.ckpt"].is_string());
}

#[test]
fn usage_errors_exit_1() {
    let f = fixture();
    let out = f.root.join("usage");
    assert_eq!(code(&gradmap(&["train", "--out", s(&out), "--epochs", "0"])), 1);
    assert_eq!(code(&gradmap(&["frobnicate"])), 1);
    let base = ["--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "0", "--out-dir", s(&out)];
    let mut same = vec!["diff", "--class-a", "3", "--class-b", "3"];
    same.extend(base);
    assert_eq!(code(&gradmap(&same)), 1);
    let mut bad_method = vec!["attribute", "--method", "lrp"];
    bad_method.extend(base);
    let o = gradmap(&bad_method);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--method"));
    let mut empty = vec!["sweep", "--sweep", "noise", "--values", "", "--out", "x.png", "--mnist-indices", "0"];
    empty.extend(["--model", s(&f.model)]);
    assert_eq!(code(&gradmap(&empty)), 1);
    assert_eq!(code(&gradmap(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let f = fixture();
    let out = f.root.join("data_err");
    let missing = f.root.join("nope.ckpt");
    let o = gradmap(&["attribute", "--model", s(&missing), "--data", s(&f.data), "--mnist-index", "0", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = gradmap(&["attribute", "--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "0", "--class", "12", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = gradmap(&["attribute", "--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "999", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = gradmap(&["train", "--data", s(&f.root.join("empty")), "--out", s(&out.join("m.ckpt"))]);
    assert_eq!(code(&o), 2);
}

fn attribute_run(dir: &Path, extra: &[&str]) {
    let f = fixture();
    let mut args = vec!["attribute", "--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "4"];
    args.extend(["--out-dir", s(dir)]);
    args.extend(extra);
    ok(&args);
}

#[test]
fn attribute_outputs_and_replay() {
    let f = fixture();
    let dir = f.root.join("attr");
    attribute_run(&dir, &["--smooth", "--samples", "4", "--seed", "11"]);
    let png = RenderedImage::load_png(dir.join("map.png")).unwrap();
    assert_eq!((png.width(), png.height()), (112, 112));
    let raw = gradmap::data::load_raw_map(dir.join("map.sgmap")).unwrap();
    assert_eq!(raw.shape(), &[28, 28, 1]);
    let manifest = dir.join("manifest.json");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    assert!(m["resolved"]["class"].as_u64().is_some());
    assert_eq!(m["invocation"]["method"]["samples"], 4);

    let again = f.root.join("attr_replay");
    let o = ok(&["replay", "--manifest", s(&manifest), "--out-dir", s(&again)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduced bitwise"));
    assert_eq!(std::fs::read(dir.join("map.png")).unwrap(), std::fs::read(again.join("map.png")).unwrap());

    // A manifest whose recorded output no longer matches the run.
    let mut tampered = m.clone();
    tampered["outputs"]["map.png"] = serde_json::Value::String("0".repeat(64));
    let bad = f.root.join("tampered.json");
    std::fs::write(&bad, serde_json::to_vec(&tampered).unwrap()).unwrap();
    let o = gradmap(&["replay", "--manifest", s(&bad), "--out-dir", s(&f.root.join("attr_bad"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn replay_refuses_changed_inputs() {
    let f = fixture();
    let img = f.root.join("input.png");
    gradmap::data::save_image(&img, &synthetic_split(1, 9).0.batch_item(0).unwrap()).unwrap();
    let dir = f.root.join("attr_png");
    ok(&["attribute", "--model", s(&f.model), "--input", s(&img), "--out-dir", s(&dir)]);
    gradmap::data::save_image(&img, &synthetic_split(2, 10).0.batch_item(1).unwrap()).unwrap();
    let o = gradmap(&["replay", "--manifest", s(&dir.join("manifest.json")), "--out-dir", s(&f.root.join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seeds_control_smooth_maps() {
    let f = fixture();
    let (a, b, c) = (f.root.join("seed_a"), f.root.join("seed_b"), f.root.join("seed_c"));
    attribute_run(&a, &["--smooth", "--samples", "3", "--seed", "1"]);
    attribute_run(&b, &["--smooth", "--samples", "3", "--seed", "1", "--threads", "1"]);
    attribute_run(&c, &["--smooth", "--samples", "3", "--seed", "2"]);
    let read = |d: &Path| std::fs::read(d.join("map.sgmap")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn noise_sweep_grid_layout() {
    let f = fixture();
    let out = f.root.join("sweep.png");
    ok(&[
        "sweep", "--model", s(&f.model), "--data", s(&f.data), "--sweep", "noise",
        "--values", "0,0.05,0.1,0.2,0.3,0.5", "--mnist-indices", "0,1,2,3,4",
        "--samples", "2", "--scale", "1", "--out", s(&out),
    ]);
    let img = RenderedImage::load_png(&out).unwrap();
    let pad = 2;
    assert_eq!(img.width(), pad + 7 * (28 + pad));
    assert_eq!(img.height(), pad + 5 * (28 + LABEL_HEIGHT + pad));
    ok(&["replay", "--manifest", s(&f.root.join("sweep.png.manifest.json")), "--out-dir", s(&f.root.join("sweep_r"))]);

    let samples = f.root.join("samples.png");
    ok(&[
        "sweep", "--model", s(&f.model), "--data", s(&f.data), "--sweep", "samples",
        "--values", "1,5,10", "--mnist-indices", "7", "--scale", "1", "--out", s(&samples),
    ]);
    let img = RenderedImage::load_png(&samples).unwrap();
    assert_eq!((img.width(), img.height()), (pad + 4 * (28 + pad), pad + 28 + LABEL_HEIGHT + pad));
    let o = gradmap(&[
        "sweep", "--model", s(&f.model), "--data", s(&f.data), "--sweep", "samples",
        "--values", "2.5", "--mnist-indices", "7", "--out", s(&samples),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn probe_csv_and_replay() {
    let f = fixture();
    let dir = f.root.join("probe");
    ok(&[
        "probe", "--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "2",
        "--pixel", "14,6", "--t-steps", "6", "--seed", "5", "--out-dir", s(&dir),
    ]);
    let csv = std::fs::read_to_string(dir.join("probe.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,deriv_ch0,predicted_class,flagged");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[6].starts_with("1,"));
    let plot = RenderedImage::load_png(dir.join("probe.png")).unwrap();
    assert_eq!((plot.width(), plot.height()), (320, 200));
    ok(&["replay", "--manifest", s(&dir.join("manifest.json")), "--out-dir", s(&f.root.join("probe_r"))]);
}

#[test]
fn diff_and_grid_compose() {
    let f = fixture();
    let dir = f.root.join("diff");
    ok(&[
        "diff", "--model", s(&f.model), "--data", s(&f.data), "--mnist-index", "3",
        "--class-a", "3", "--class-b", "5", "--scale", "2", "--out-dir", s(&dir),
    ]);
    let d = RenderedImage::load_png(dir.join("diff.png")).unwrap();
    assert_eq!((d.width(), d.height(), d.channels()), (56, 56, 3));
    let cells: Vec<String> = ["diff.png", "diff.png", "diff.png"].iter().map(|c| s(&dir.join(c)).to_string()).collect();
    let grid = f.root.join("grid.png");
    ok(&["grid", "--cells", &cells.join(","), "--rows", "1", "--cols", "3", "--labels", "a,b,c", "--out", s(&grid)]);
    let g = RenderedImage::load_png(&grid).unwrap();
    assert_eq!((g.width(), g.height()), (2 + 3 * 58, 2 + 56 + LABEL_HEIGHT + 2));
    ok(&["replay", "--manifest", s(&f.root.join("grid.png.manifest.json")), "--out-dir", s(&f.root.join("grid_r"))]);
    ok(&["replay", "--manifest", s(&dir.join("manifest.json")), "--out-dir", s(&f.root.join("diff_r"))]);
    let o = gradmap(&["grid", "--cells", &cells.join(","), "--rows", "1", "--cols", "2", "--out", s(&grid)]);
    assert_eq!(code(&o), 1);
    let o = gradmap(&["grid", "--cells", s(&f.root.join("missing.png")), "--rows", "1", "--cols", "1", "--out", s(&grid)]);
    assert_eq!(code(&o), 2);
}
