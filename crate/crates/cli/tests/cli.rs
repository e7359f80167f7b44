use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "synth": {"num_acronyms": 3, "sentences_per_long_form": 6},
  "tokenizer": {"bpe_merges": 60, "wordpiece_size": 300, "max_len": 40},
  "train": {"epochs": 1, "batch_size": 8}
}"#;

fn acrodis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acrodis"))
        .args(args)
        .env("AD_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = acrodis(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.json")
    }

    fn gen(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["gen", "--config", s(&self.config()), "--out", s(&out)]);
        out
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic() {
    let fx = Fixture::new();
    let a = fx.gen("a");
    let b = fx.gen("b");
    assert_eq!(files(&a), files(&b));
    let names: Vec<String> = files(&a).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["config.json", "dev.json", "dictionary.json", "test.json", "train.json"]);
    let c = fx.path("c");
    ok(&["gen", "--config", s(&fx.config()), "--seed", "1", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("train.json")).unwrap(), fs::read(c.join("train.json")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let fx = Fixture::new();
    fs::write(fx.path("seeded.json"), r#"{"seed": 5}"#).unwrap();
    let out = fx.path("o");
    ok(&["gen", "--config", s(&fx.path("seeded.json")), "--seed", "7", "--out", s(&out)]);
    let cfg = json(&out.join("config.json"));
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["synth"]["seed"], 7);
    assert_eq!(cfg["train"]["seed"], 7);
}

#[test]
fn pairs_with_upsampling() {
    let fx = Fixture::new();
    fs::write(
        fx.path("dict.json"),
        r#"{"CNN": ["Convolutional Neural Network", "Cable News Network", "Condensed Nearest Neighbor"]}"#,
    )
    .unwrap();
    fs::write(
        fx.path("samples.json"),
        r#"[{"id": "TR-1", "tokens": ["They", "use", "CNN", "in", "the", "model", "."], "acronym_index": 2,
             "long_form": "Convolutional Neural Network"}]"#,
    )
    .unwrap();
    let (dict, samples) = (fx.path("dict.json"), fx.path("samples.json"));
    let base = ["pairs", "--dict", s(&dict), s(&samples)];
    let count = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        let out = ok(&args);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let pairs = v.as_array().unwrap().clone();
        (pairs.len(), pairs.iter().filter(|p| p["label"] == 0).count())
    };
    assert_eq!(count(&[]), (3, 2));
    assert_eq!(count(&["--upsample"]), (5, 2));
    assert_eq!(count(&["--upsample-mode", "balanced"]), (4, 2));
}

#[test]
fn field_mapping_and_stats() {
    let fx = Fixture::new();
    fs::write(fx.path("dict.json"), r#"{"RF": ["Random Forest", "Regression Forest"]}"#).unwrap();
    fs::write(
        fx.path("native.json"),
        r#"[{"id": "DEV-1", "tokens": ["a", "random", "RF", "model"], "acronym": 2, "expansion": "Random Forest"}]"#,
    )
    .unwrap();
    fs::write(fx.path("map.json"), r#"{"acronym_index": "acronym", "long_form": "expansion"}"#).unwrap();
    let out = ok(&[
        "stats",
        "--dict",
        s(&fx.path("dict.json")),
        "--field-map",
        s(&fx.path("map.json")),
        s(&fx.path("native.json")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["num_acronyms"], 1);
    assert_eq!(v["overlap_ratio"], 1.0);
    assert_eq!(v["avg_sentence_length"], 4.0);
    assert_eq!(v["split_sizes"]["native"], 1);
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let missing = fx.path("nope.json");
    assert_eq!(acrodis(&["stats", "--dict", s(&missing), s(&missing)]).status.code(), Some(2));
    fs::write(fx.path("dup.json"), r#"{"RF": ["Regression Forest", "Regression Forest"]}"#).unwrap();
    fs::write(fx.path("empty.json"), "[]").unwrap();
    assert_eq!(
        acrodis(&["stats", "--dict", s(&fx.path("dup.json")), s(&fx.path("empty.json"))]).status.code(),
        Some(1)
    );
    assert_eq!(acrodis(&["gen", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(acrodis(&["gen"]).status.code(), Some(1));
    fs::write(fx.path("bad.json"), r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    let out = fx.path("o");
    assert_eq!(acrodis(&["gen", "--config", s(&fx.path("bad.json")), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn tokenizer_subcommands_are_deterministic() {
    let fx = Fixture::new();
    let data = fx.gen("data");
    let dict = data.join("dictionary.json");
    let train = data.join("train.json");
    for sub in ["tok-train-bpe", "tok-train-wp"] {
        let a = ok(&[sub, "--config", s(&fx.config()), "--dict", s(&dict), s(&train)]).stdout;
        let b = ok(&[sub, "--config", s(&fx.config()), "--dict", s(&dict), s(&train)]).stdout;
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }
    let bpe = ok(&["tok-train-bpe", "--merges", "7", "--dict", s(&dict), s(&train)]).stdout;
    assert_eq!(String::from_utf8(bpe).unwrap().lines().count(), 8);
}

#[test]
fn train_predict_eval_roundtrip() {
    let fx = Fixture::new();
    let data = fx.gen("data");
    let m1 = fx.path("m1");
    let m2 = fx.path("m2");
    for m in [&m1, &m2] {
        ok(&["train", "--config", s(&fx.config()), "--data", s(&data), "--out", s(m)]);
    }
    assert_eq!(files(&m1), files(&m2));
    let names: Vec<String> = files(&m1).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["best.ckpt", "bpe.txt", "config.json", "loss.csv", "model.ckpt", "tokenizer.json", "wordpiece.txt"]
    );
    let csv = fs::read_to_string(m1.join("loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,split,loss\n0,0,dev,"));

    let unlabeled = fx.path("unlabeled.json");
    let test: serde_json::Value = json(&data.join("test.json"));
    let stripped: Vec<serde_json::Value> = test
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.as_object_mut().unwrap().remove("long_form");
            r
        })
        .collect();
    fs::write(&unlabeled, serde_json::to_vec(&stripped).unwrap()).unwrap();
    let p = ok(&["predict", "--model", s(&m1), "--dict", s(&data.join("dictionary.json")), s(&unlabeled)]).stdout;
    let preds: serde_json::Value = serde_json::from_slice(&p).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), stripped.len());

    let e1 = fx.path("e1");
    let e2 = fx.path("e2");
    for e in [&e1, &e2] {
        let spec = format!("dual={}", s(&m1));
        ok(&["eval", "--data", s(&data), "--split", "test", "--model", &spec, "--mf", "--out", s(e)]);
    }
    assert_eq!(files(&e1), files(&e2));
    let rows = json(&e1.join("comparison.json"));
    let systems: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["system"].as_str().unwrap()).collect();
    assert_eq!(systems, ["mf", "dual"]);
    assert!(fs::read_to_string(e1.join("comparison.md")).unwrap().starts_with("| System |"));
}

#[test]
fn paper_preset_is_echoed() {
    let fx = Fixture::new();
    let data = fx.gen("data");
    let m = fx.path("m");
    ok(&["train", "--config", s(&fx.config()), "--preset", "paper", "--data", s(&data), "--out", s(&m)]);
    let cfg = json(&m.join("config.json"));
    assert_eq!(cfg["train"]["learning_rate"], 2e-5);
    assert_eq!(cfg["train"]["epochs"], 5);
}

#[test]
fn eval_perfect_cached_predictions() {
    let fx = Fixture::new();
    let data = fx.gen("data");
    let dev = json(&data.join("dev.json"));
    let perfect: Vec<serde_json::Value> = dev
        .as_array()
        .unwrap()
        .iter()
        .map(|r| serde_json::json!({"id": r["id"], "prediction": r["long_form"], "scores": {}}))
        .collect();
    let cached = fx.path("perfect.json");
    fs::write(&cached, serde_json::to_vec(&perfect).unwrap()).unwrap();
    let out = fx.path("e");
    let spec = format!("oracle={}", s(&cached));
    let res = acrodis(&["eval", "--data", s(&data), "--predictions", &spec, "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let m = json(&out.join("metrics_oracle.json"));
    assert_eq!(m["macro_f1"], 1.0);
    assert_eq!(m["macro_precision"], 1.0);
}
