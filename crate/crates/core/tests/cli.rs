//! End-to-end runs of the `entrec` binary on the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn entrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3
[model]
dim = 8
entity_dim = 8
ffn_dim = 16
pool_hidden = 8
title_heads = 2
see_heads = 2
user_heads = 2
title_layers = 1
see_layers = 1
[pretrain]
batch_size = 16
epochs = 1
[recsys]
batch_size = 16
epochs = 1
validation_fraction = 0.1
[data]
min_token_freq = 1
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Run { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }

    fn pretrain(&self, epochs: &str) -> Output {
        entrec(&[
            "pretrain",
            "--config",
            s(&self.config()),
            "--news",
            s(&fixture("mind_tiny/news.tsv")),
            "--out",
            s(&self.path("pre")),
            "--epochs",
            epochs,
        ])
    }

    fn train(&self, extra: &[&str]) -> Output {
        let (config, out) = (self.config(), self.path("model"));
        let (news, behaviors) = (
            fixture("mind_tiny/news.tsv"),
            fixture("mind_tiny/behaviors.tsv"),
        );
        let mut args = vec![
            "train",
            "--config",
            s(&config),
            "--news",
            s(&news),
            "--behaviors",
            s(&behaviors),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        entrec(&args)
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&entrec(&["--help"])), 0);
    assert_eq!(code(&entrec(&["--version"])), 0);
    assert_eq!(code(&entrec(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&entrec(&[])), 1);
    assert_eq!(code(&entrec(&["train", "--bogus"])), 1);
    let o = entrec(&[
        "recommend",
        "--checkpoint",
        "x",
        "--news",
        "y",
        "--history",
        "a",
        "--candidates",
        "b",
        "--top-k",
        "many",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_config_values_exit_one() {
    let run = Run::new();
    let o = entrec(&[
        "pretrain",
        "--config",
        s(&run.config()),
        "--set",
        "pretrain.tau_entity_title=-1",
        "--news",
        s(&fixture("mind_tiny/news.tsv")),
        "--out",
        s(&run.path("pre")),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(
        !run.path("pre").exists(),
        "nothing is written before validation"
    );
}

#[test]
fn missing_input_is_a_data_error() {
    let run = Run::new();
    let o = entrec(&[
        "pretrain",
        "--news",
        "/nonexistent/news.tsv",
        "--out",
        s(&run.path("x")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/news.tsv"));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let run = Run::new();
    let spec = run.path("spec.json");
    std::fs::write(
        &spec,
        r#"{"articles": 120, "users": 40, "impressions": 300}"#,
    )
    .unwrap();
    for d in ["a", "b"] {
        let o = entrec(&["synth", "--spec", s(&spec), "--out", s(&run.path(d))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "train/news.tsv",
        "train/behaviors.tsv",
        "test/behaviors.tsv",
    ] {
        let a = std::fs::read(run.path("a").join(f)).unwrap();
        let b = std::fs::read(run.path("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    let o = entrec(&[
        "synth",
        "--spec",
        s(&spec),
        "--out",
        s(&run.path("c")),
        "--seed",
        "99",
    ]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        std::fs::read(run.path("a/train/behaviors.tsv")).unwrap(),
        std::fs::read(run.path("c/train/behaviors.tsv")).unwrap()
    );
}

#[test]
fn synth_rejects_invalid_spec_naming_fields() {
    let run = Run::new();
    let spec = run.path("bad.json");
    std::fs::write(&spec, r#"{"topics": 0, "mention_rate": 2.0}"#).unwrap();
    let o = entrec(&["synth", "--spec", s(&spec), "--out", s(&run.path("d"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(
        err.contains("topics") && err.contains("mention_rate"),
        "{err}"
    );
}

#[test]
fn zero_epoch_pretrain_writes_the_initial_encoder() {
    let run = Run::new();
    let o = run.pretrain("0");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "encoder.ckpt",
        "config.toml",
        "probe.json",
        "pretrain_log.jsonl",
    ] {
        assert!(run.path("pre").join(f).is_file(), "{f} missing");
    }
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.path("pre/probe.json")).unwrap())
            .unwrap();
    assert!(probe["top1_rate"].as_f64().unwrap() >= 0.0);
    let echoed = std::fs::read_to_string(run.path("pre/config.toml")).unwrap();
    assert!(echoed.contains("epochs = 0"));
}

#[test]
fn two_stage_training_then_eval_and_recommend_agree() {
    let run = Run::new();
    assert_eq!(code(&run.pretrain("1")), 0);
    let ckpt = run.path("pre/encoder.ckpt");
    let o = run.train(&["--init-checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "model.ckpt",
        "config.toml",
        "train_log.jsonl",
        "validation.json",
    ] {
        assert!(run.path("model").join(f).is_file(), "{f} missing");
    }

    let model = run.path("model/model.ckpt");
    let o = entrec(&[
        "eval",
        "--checkpoint",
        s(&model),
        "--data",
        s(&fixture("mind_tiny")),
        "--out",
        s(&run.path("eval")),
        "--per-impression",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.path("eval/report.json")).unwrap())
            .unwrap();
    let auc = report["filtered"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(run.path("eval/config.toml").is_file());

    // The first CSV row's scores must equal what `recommend` prints for the
    // same history and candidates.
    let mut rdr = csv::Reader::from_path(run.path("eval/impressions.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let field = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
    let id = field("impression_id");
    let scores: Vec<f64> = field("scores")
        .split(' ')
        .map(|x| x.parse().unwrap())
        .collect();
    let line = std::fs::read_to_string(fixture("mind_tiny/behaviors.tsv"))
        .unwrap()
        .lines()
        .find(|l| l.split('\t').next() == Some(id.as_str()))
        .unwrap()
        .to_string();
    let cols: Vec<&str> = line.split('\t').collect();
    let history: Vec<&str> = cols[3].split(' ').collect();
    let history = history[history.len().saturating_sub(50)..].join(",");
    let cands: Vec<&str> = cols[4]
        .split(' ')
        .map(|c| c.rsplit_once('-').unwrap().0)
        .collect();
    let o = entrec(&[
        "recommend",
        "--checkpoint",
        s(&model),
        "--news",
        s(&fixture("mind_tiny/news.tsv")),
        "--history",
        &history,
        "--candidates",
        &cands.join(","),
        "--top-k",
        "100",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ranked: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        ranked.len(),
        cands.len(),
        "top-k beyond the list returns everything"
    );
    for r in &ranked {
        let i = cands
            .iter()
            .position(|c| *c == r["id"].as_str().unwrap())
            .unwrap();
        let got = r["score"].as_f64().unwrap();
        assert!(
            (got - scores[i]).abs() <= 1e-9 * (1.0 + got.abs()),
            "{got} vs {}",
            scores[i]
        );
    }
    for w in ranked.windows(2) {
        assert!(w[0]["score"].as_f64().unwrap() >= w[1]["score"].as_f64().unwrap());
    }

    // Unknown ids are listed.
    let o = entrec(&[
        "recommend",
        "--checkpoint",
        s(&model),
        "--news",
        s(&fixture("mind_tiny/news.tsv")),
        "--history",
        "N1,NOPE1",
        "--candidates",
        "N2,NOPE2",
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("NOPE1") && err.contains("NOPE2"), "{err}");

    // A pre-training checkpoint cannot score.
    let o = entrec(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fixture("mind_tiny")),
        "--out",
        s(&run.path("eval2")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn mismatched_init_checkpoint_names_the_tensor() {
    let run = Run::new();
    assert_eq!(code(&run.pretrain("0")), 0);
    let o = run.train(&[
        "--init-checkpoint",
        s(&run.path("pre/encoder.ckpt")),
        "--set",
        "model.dim=16",
        "--set",
        "model.pool_hidden=16",
    ]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("news."), "{}", stderr(&o));
}

#[test]
fn same_seed_same_training_log() {
    let run = Run::new();
    let mut logs = Vec::new();
    for k in 0..2 {
        let out = run.path(&format!("m{k}"));
        let o = entrec(&[
            "train",
            "--config",
            s(&run.config()),
            "--news",
            s(&fixture("mind_tiny/news.tsv")),
            "--behaviors",
            s(&fixture("mind_tiny/behaviors.tsv")),
            "--out",
            s(&out),
            "--seed",
            "11",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        // Wall-clock fields differ between runs; compare the losses.
        let losses: Vec<String> = log
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["loss"].to_string()
            })
            .collect();
        logs.push(losses);
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
}
