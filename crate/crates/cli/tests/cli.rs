use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use naturalize_core::image::decode_png;
use naturalize_core::model::{decode_checkpoint, encode_checkpoint, ArchSpec, HNetParams};
use naturalize_core::training::{canonical_log_hash, read_metrics_log};
use serde_json::Value;
use tempfile::TempDir;

fn naturalize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_naturalize")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = naturalize(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    naturalize(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Natural and CG corpora of `count` images each at side `size`.
fn corpora(dir: &Path, count: usize, size: usize) -> (PathBuf, PathBuf) {
    let (n, c) = (dir.join("nat"), dir.join("cg"));
    let (count, size) = (count.to_string(), size.to_string());
    for (kind, out, seed) in [("natural", &n, "1"), ("cg", &c, "2")] {
        ok(&["synth", "--kind", kind, "--count", &count, "--size", &size, "--seed", seed, "--out", s(out)]);
    }
    (n, c)
}

fn image_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == "ppm"))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_files_and_manifest_deterministically() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--kind", "cg", "--count", "50", "--size", "64", "--seed", "7", "--out", s(out)]);
    }
    let files = image_files(&a);
    assert_eq!(files.len(), 50);
    assert!(a.join("manifest.json").exists());
    assert_eq!(read_json(&a.join("manifest.json")).as_array().unwrap().len(), 50);
    for f in &files {
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(f.file_name().unwrap())).unwrap());
    }
    let run = read_json(&a.join("run-manifest.json"));
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seeds"]["seed"], 7);
}

#[test]
fn synth_usage_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("x");
    assert_eq!(code(&["synth", "--kind", "cg", "--count", "0", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--kind", "paint", "--count", "3", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--kind", "cg", "--count", "3", "--bogus", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--kind", "cg", "--count", "3", "--dataset", "9", "--out", s(&out)]), 2);
}

#[test]
fn config_file_precedence() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.json");
    std::fs::write(&cfg, r#"{"kind": "natural", "count": 2, "size": 16, "seed": 3}"#).unwrap();
    let out = t.path().join("o");
    ok(&["synth", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);
    let run = read_json(&out.join("run-manifest.json"));
    assert_eq!(run["config"]["count"], 2);
    assert_eq!(run["config"]["seed"], 4);
    assert_eq!(run["config"]["format"], "png");
    assert_eq!(image_files(&out).len(), 2);

    std::fs::write(&cfg, r#"{"kidn": "natural"}"#).unwrap();
    assert_eq!(code(&["synth", "--config", s(&cfg), "--out", s(&out)]), 2);
}

#[test]
fn train_detector_variants_and_missing_corpus() {
    let t = TempDir::new().unwrap();
    let (n, c) = corpora(t.path(), 24, 32);
    for variant in ["mlp", "flda"] {
        let out = t.path().join(format!("{variant}.dtct"));
        ok(&[
            "train-detector",
            "--corpus",
            s(&n),
            "--corpus",
            s(&c),
            "--variant",
            variant,
            "--size",
            "32",
            "--out",
            s(&out),
        ]);
        let bytes = std::fs::read(&out).unwrap();
        assert_eq!(&bytes[..4], b"DTCT");
        let tag = if variant == "mlp" { 0 } else { 1 };
        assert_eq!(bytes[8], tag, "variant byte follows magic and version");
    }
    let missing = t.path().join("nope");
    let out = t.path().join("d.dtct");
    assert_eq!(code(&["train-detector", "--corpus", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(code(&["train-detector", "--corpus", s(&n), "--out", s(&out)]), 2, "one class only");
}

struct Trained {
    _dir: TempDir,
    nat: PathBuf,
    cg: PathBuf,
    detector: PathBuf,
}

fn trained_setup() -> Trained {
    let dir = TempDir::new().unwrap();
    let (nat, cg) = corpora(dir.path(), 12, 16);
    let detector = dir.path().join("det.dtct");
    ok(&[
        "train-detector",
        "--corpus",
        s(&nat),
        "--corpus",
        s(&cg),
        "--variant",
        "flda",
        "--size",
        "16",
        "--out",
        s(&detector),
    ]);
    Trained { _dir: dir, nat, cg, detector }
}

fn train_args<'a>(t: &'a Trained, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--corpus",
        s(&t.nat),
        "--corpus",
        s(&t.cg),
        "--detector",
        s(&t.detector),
        "--size",
        "16",
        "--batch-size",
        "2",
        "--iterations-per-epoch",
        "3",
        "--seed",
        "5",
        "--out",
        out,
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn zero_epochs_writes_initialized_checkpoint_and_echoes_alpha() {
    let t = trained_setup();
    let out = t._dir.path().join("h0.hnet");
    ok(&train_args(&t, s(&out), &["--epochs", "0"]));
    let expected = HNetParams::<f32>::init(&ArchSpec::with_size(16), 5).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), encode_checkpoint(&expected));
    let run = read_json(&PathBuf::from(format!("{}.manifest.json", out.display())));
    assert_eq!(run["config"]["alpha"], 0.005);
    assert_eq!(run["config"]["epochs"], 0);
    assert!(run["inputs"].as_object().unwrap().contains_key(s(&t.detector)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let t = trained_setup();
    let d = t._dir.path();
    let (full, part) = (d.join("full.hnet"), d.join("part.hnet"));
    ok(&train_args(&t, s(&full), &["--epochs", "2"]));
    ok(&train_args(&t, s(&part), &["--epochs", "2", "--stop-after", "2"]));
    let partial = read_metrics_log(&std::fs::read_to_string(format!("{}.metrics.ndjson", part.display())).unwrap());
    assert_eq!(partial.unwrap().len(), 8);
    ok(&train_args(&t, s(&part), &["--epochs", "2", "--resume", s(&part)]));

    let log = |p: &Path| {
        read_metrics_log(&std::fs::read_to_string(format!("{}.metrics.ndjson", p.display())).unwrap()).unwrap()
    };
    let (a, b) = (log(&full), log(&part));
    assert_eq!(a.len(), 24);
    assert_eq!(canonical_log_hash(&a), canonical_log_hash(&b));
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
    decode_checkpoint::<f32>(&std::fs::read(&full).unwrap()).unwrap();
}

#[test]
fn transform_single_and_directory_modes_agree() {
    let t = trained_setup();
    let d = t._dir.path();
    let ckpt = d.join("h.hnet");
    ok(&train_args(&t, s(&ckpt), &["--epochs", "1"]));
    let out_dir = d.join("out");
    ok(&["transform", "--checkpoint", s(&ckpt), "--input", s(&t.cg), "--out", s(&out_dir)]);
    let outputs = image_files(&out_dir);
    assert_eq!(outputs.len(), 12);
    for src in image_files(&t.cg).iter().take(3) {
        let single = d.join("single.png");
        ok(&["transform", "--checkpoint", s(&ckpt), "--input", s(src), "--out", s(&single)]);
        let bytes = std::fs::read(&single).unwrap();
        assert_eq!(bytes, std::fs::read(out_dir.join(src.file_name().unwrap())).unwrap());
        let img = decode_png(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }
    let missing = d.join("missing.hnet");
    assert_eq!(code(&["transform", "--checkpoint", s(&missing), "--input", s(&t.cg), "--out", s(&out_dir)]), 2);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn assert_json_matches_csv(dir: &Path) {
    let json = read_json(&dir.join("reports.json"));
    let rows = csv_rows(&dir.join("reports.csv"));
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), rows.len());
    for (r, row) in reports.iter().zip(&rows) {
        assert_eq!(row[1], r["phase"].as_str().unwrap());
        for (col, key) in [(3, "n_tp"), (4, "n_tn"), (5, "n_fp"), (6, "n_fn")] {
            assert_eq!(row[col].parse::<u64>().unwrap(), r[key].as_u64().unwrap());
        }
        assert_eq!(row[7].parse::<f64>().unwrap(), r["accuracy"].as_f64().unwrap());
        assert_eq!(row[8].parse::<f64>().unwrap(), r["detection_rate"].as_f64().unwrap());
    }
}

#[test]
fn evaluate_emits_matching_json_and_csv_with_exit_codes() {
    let t = trained_setup();
    let d = t._dir.path();
    let ckpt = d.join("h.hnet");
    ok(&train_args(&t, s(&ckpt), &["--epochs", "0"]));
    let eval = d.join("eval");
    ok(&["synth", "--kind", "natural", "--count", "6", "--size", "16", "--seed", "9", "--out", s(&eval)]);
    ok(&["synth", "--kind", "cg", "--count", "6", "--size", "16", "--seed", "9", "--out", s(&d.join("evalcg"))]);

    // natural-only corpus: detection rate has no positives
    let out = d.join("r0");
    let args = ["evaluate", "--detector", s(&t.detector), "--corpus", s(&eval), "--out-dir", s(&out)];
    assert_eq!(code(&args), 1);

    let mixed = d.join("mixed");
    std::fs::create_dir_all(&mixed).unwrap();
    let mut manifest = Vec::new();
    for (src, label) in [(&eval, "natural"), (&d.join("evalcg"), "cg")] {
        for f in image_files(src) {
            let name = f.file_name().unwrap().to_str().unwrap().to_string();
            std::fs::copy(&f, mixed.join(&name)).unwrap();
            let id = name.trim_end_matches(".png").to_string();
            manifest.push(serde_json::json!({"id": id, "label": label, "file": name}));
        }
    }
    std::fs::write(mixed.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = d.join("r1");
    ok(&[
        "evaluate",
        "--detector",
        s(&t.detector),
        "--corpus",
        s(&mixed),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(&out),
    ]);
    assert_json_matches_csv(&out);
    assert_eq!(read_json(&out.join("reports.json")).as_array().unwrap().len(), 2);

    let split = d.join("r2");
    let evalcg = d.join("evalcg");
    ok(&[
        "evaluate",
        "--detector",
        s(&t.detector),
        "--corpus",
        s(&eval),
        "--corpus",
        s(&evalcg),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(&split),
    ]);
    assert_eq!(read_json(&split.join("reports.json")), read_json(&out.join("reports.json")));

    let missing = d.join("nothing");
    assert_eq!(code(&["evaluate", "--detector", s(&t.detector), "--corpus", s(&missing), "--out-dir", s(&out)]), 2);
    assert_eq!(code(&["evaluate", "--out-dir", s(&out)]), 2);
}

#[test]
fn evaluate_scenario_runs_the_pipeline() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"size": 16, "batch_size": 2, "iterations_per_epoch": 2, "epochs": 1,
            "train_per_class": 8, "detector_per_class": 24, "eval_per_class": 4, "adversary": "flda"}"#,
    )
    .unwrap();
    let out = t.path().join("scn");
    ok(&["evaluate", "--scenario", "1", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_json_matches_csv(&out);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["adversary_hash_before"], summary["adversary_hash_after"]);
    assert_eq!(read_json(&out.join("reports.json")).as_array().unwrap().len(), 4);
    assert_eq!(image_files(&out.join("transformed")).len(), 4);
    assert_eq!(code(&["evaluate", "--scenario", "3", "--out-dir", s(&out)]), 2);
}

#[test]
fn thread_count_from_environment() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("o");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_naturalize"))
            .args(["synth", "--kind", "cg", "--count", "2", "--size", "8", "--out", s(&out)])
            .env("NATURALIZE_THREADS", threads)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(run("1"), Some(0));
    assert_eq!(run("zero"), Some(2));
}
