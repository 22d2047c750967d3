use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 1,
  "model": {"height": 32, "width": 32, "patch": 8, "depth": 1, "dim": 16, "mlp_dim": 32, "heads": 2, "att_hidden": 8},
  "train": {"epochs": 2, "freeze_epochs": 1, "batch_size": 4, "base_lr": 0.001}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fakeformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_toy_writes_balanced_manifest_and_unit_peak_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("a");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "synth", "--toy", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let records = lines(&out.join("manifest.jsonl"));
    assert_eq!(records.len(), 20);
    let fakes: Vec<&Value> = records.iter().filter(|r| r["label"] == "fake").collect();
    assert_eq!(fakes.len(), 10);
    for f in fakes {
        let img = f["image"].as_str().unwrap();
        let side = img.trim_end_matches(".png").to_string() + "_heatmap.json";
        let heat: Value = serde_json::from_str(&fs::read_to_string(out.join(side)).unwrap()).unwrap();
        assert_eq!(heat["side"], 4);
        let max = heat["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
    }
    let effective: Value = serde_json::from_str(&fs::read_to_string(out.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["lambda"], 10.0);
    assert_eq!(effective["model"]["seed"], 1);
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&run(&["--config", s(&cfg), "--out", s(out), "synth", "--toy", "4"])), 0);
    }
    let mut files: Vec<PathBuf> = Vec::new();
    for sub in ["", "real", "fake"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            let p = e.unwrap().path();
            // The config echo records the output directory itself.
            if p.is_file() && p.file_name().unwrap() != "effective_config.json" {
                files.push(p.strip_prefix(&a).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() > 20);
    for f in files {
        assert!(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["synth", "--toy", "2", "--out", s(dir.path())])), 1, "seed is mandatory");
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--seed", "x", "synth"])), 1);
    let cfg = write_config(dir.path(), r#"{"seed": 1, "trian": {}}"#);
    let o = run(&["--config", s(&cfg), "synth", "--toy", "2"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("trian"));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 2, \"lambda\": 0"));
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["--config", s(&cfg), "--out", s(&data), "synth", "--toy", "6"])), 0);

    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|r| dir.path().join(r)).collect();
    for out in &runs {
        let o = run(&[
            "--config", s(&cfg), "--out", s(out), "train", "--toy", "6", "--val-toy", "3", "--checkpoint-every", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let history = lines(&runs[0].join("history.jsonl"));
    assert_eq!(history.len(), 2);
    for h in &history {
        assert_eq!(h["total_loss"], h["cls_loss"], "λ = 0 leaves only the classification term");
        assert!(h["val_auc"].is_number());
    }
    assert!(runs[0].join("checkpoint_epoch001.fkf1").exists());
    let weights = runs[0].join("weights.fkf1");
    assert_eq!(fs::read(&weights).unwrap(), fs::read(runs[1].join("weights.fkf1")).unwrap());

    // Evaluation on the synthesized manifest, stratified and perturbed.
    let ev = dir.path().join("ev");
    let manifest = data.join("manifest.jsonl");
    let o = run(&[
        "--config", s(&cfg), "--out", s(&ev), "eval", "--weights", s(&weights), "--manifest", s(&manifest),
        "--stratify", "--perturb",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let clean = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&clean));
    assert_eq!(report["n_pos"], 6);
    let rows = report["perturbations"].as_array().unwrap();
    assert_eq!(rows.len(), 5 * 6);
    for r in rows.iter().filter(|r| r["severity"] == 0) {
        assert_eq!(r["auc"].as_f64().unwrap(), clean, "identity severity");
    }
    let binned: u64 = report["bins"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(binned, 6);
    assert!(fs::read_to_string(ev.join("report.csv")).unwrap().starts_with("section,key,auc,ap,count"));
    assert_eq!(lines(&ev.join("scores.jsonl")).len(), 12);

    // A single stratum spanning all Mask-SSIM values reproduces the overall AUC.
    let one_bin = write_config(dir.path(), &SMALL.replace("\"seed\": 1,", "\"seed\": 1, \"eval\": {\"bins\": [0.0, 1.0]},"));
    let ev1 = dir.path().join("ev1");
    let o = run(&[
        "--config", s(&one_bin), "--out", s(&ev1), "eval", "--weights", s(&weights), "--manifest", s(&manifest),
        "--stratify",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r1: Value = serde_json::from_str(&fs::read_to_string(ev1.join("report.json")).unwrap()).unwrap();
    assert_eq!(r1["bins"][0]["auc"], r1["auc"]);

    // Inference on one real frame.
    let records = lines(&manifest);
    let image = data.join(records[0]["image"].as_str().unwrap());
    let landmarks = data.join(records[0]["landmarks"].as_str().unwrap());
    let inf = dir.path().join("inf");
    let args = [
        "--out", s(&inf), "infer", "--weights", s(&weights), s(&image), "--landmarks", s(&landmarks),
    ];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(stdout(&first), stdout(&run(&args)));
    let v: Value = serde_json::from_str(stdout(&first).trim()).unwrap();
    let score = v["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let png = fs::read(v["heatmap"].as_str().unwrap()).unwrap();
    // IHDR width and height, big-endian, at bytes 16..24.
    assert_eq!(&png[16..24], &[0, 0, 0, 4, 0, 0, 0, 4]);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["--config", s(&cfg), "--out", s(&data), "synth", "--toy", "3"])), 0);
    let train = dir.path().join("t");
    assert_eq!(code(&run(&["--config", s(&cfg), "--out", s(&train), "train", "--toy", "3"])), 0);
    let weights = train.join("weights.fkf1");

    // Only reals: AUC is undefined.
    let manifest = data.join("manifest.jsonl");
    let reals: Vec<String> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"real\""))
        .map(String::from)
        .collect();
    let only_real = data.join("reals.jsonl");
    fs::write(&only_real, reals.join("\n")).unwrap();
    let ev = dir.path().join("ev");
    let o = run(&["--config", s(&cfg), "--out", s(&ev), "eval", "--weights", s(&weights), "--manifest", s(&only_real)]);
    assert_eq!(code(&o), 2);

    // A missing image, and a non-PNG image.
    let broken = data.join("broken.jsonl");
    fs::write(&broken, reals[0].replace("real/", "nowhere/")).unwrap();
    let o = run(&["--config", s(&cfg), "--out", s(&ev), "eval", "--weights", s(&weights), "--manifest", s(&broken)]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not a png").unwrap();
    let o = run(&["--out", s(&ev), "infer", "--weights", s(&weights), s(&junk)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_clean_and_names_an_injected_fault() {
    let o = run(&["verify", "--seeds", "1", "--cases", "30"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS") && !text.contains("FAIL"));

    let o = run(&["verify", "--seeds", "1", "--cases", "30", "--fault", "softmax"]);
    assert_eq!(code(&o), 3);
    let failing: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert!(failing.iter().any(|l| l.contains("softmax")), "{failing:?}");
}
