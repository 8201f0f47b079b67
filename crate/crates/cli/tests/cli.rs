//! End-to-end runs of the `lincir` binary on tiny budgets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lincir_cli::{ABLATION_HEADER, NOISE_HEADER};
use lincir_core::checkpoint::Container;
use lincir_core::retrieval::PromptTemplate;
use tempfile::TempDir;

fn lincir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lincir"))
        .args(args)
        .env("LINCIR_THREADS", "1")
        .output()
        .expect("spawn lincir")
}

fn ok(args: &[&str]) {
    let out = lincir(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 5-step encoder shared by the tests that only need some checkpoint.
fn encoder() -> &'static Path {
    static DIR: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("enc");
        ok(&["pretrain", "--steps", "5", "--batch", "8", "--out", s(&out)]);
        (dir, out.join("encoder.lncr"))
    })
    .1
}

fn quick_train(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--encoder-ckpt",
        s(encoder()),
        "--steps",
        "6",
        "--eval-every",
        "3",
        "--batch",
        "8",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn pretrain_writes_a_loadable_checkpoint_into_a_new_directory() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("nested/deeper");
    ok(&["pretrain", "--steps", "3", "--batch", "8", "--out", s(&out)]);
    let bytes = std::fs::read(out.join("encoder.lncr")).unwrap();
    let c = Container::from_bytes(&bytes).unwrap();
    assert_eq!(c.to_bytes().unwrap(), bytes);
    assert!(read(out.join("pretrain_losses.csv")).starts_with("step,loss\n1,"));
    let summary: serde_json::Value = serde_json::from_str(&read(out.join("pretrain.json"))).unwrap();
    assert!(summary["heldout_recall_at_1"].is_number());
    let config: serde_json::Value = serde_json::from_str(&read(out.join("config.json"))).unwrap();
    assert_eq!(config["steps"], 3);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "pretrain",
            "--seed",
            "7",
            "--steps",
            "3",
            "--batch",
            "8",
            "--out",
            s(&out),
        ]);
        quick_train(&out.join("t"), &["--seed", "7"]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "encoder.lncr",
        "pretrain_losses.csv",
        "pretrain.json",
        "t/phi.lncr",
        "t/history.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_history_and_noise_flags() {
    let dir = TempDir::new().unwrap();
    for noise in ["none", "scaled-gaussian", "student-t:3"] {
        let out = dir.path().join(noise);
        quick_train(&out, &["--noise", noise]);
        let history = read(out.join("history.csv"));
        let mut lines = history.lines();
        assert_eq!(lines.next(), Some("step,loss,val_score"));
        assert_eq!(lines.count(), 6);
        let report: serde_json::Value = serde_json::from_str(&read(out.join("train.json"))).unwrap();
        assert!(report["best_score"].is_number());
    }
    let bad = lincir(&[
        "train",
        "--encoder-ckpt",
        s(encoder()),
        "--noise",
        "pink",
        "--out",
        s(dir.path()),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("trainer:"));
}

#[test]
fn eval_schema_and_baselines() {
    let dir = TempDir::new().unwrap();
    let phi = dir.path().join("t");
    quick_train(&phi, &[]);
    let phi_ckpt = phi.join("phi.lncr");
    let metrics = |baseline: &str| {
        let out = dir.path().join(baseline);
        ok(&[
            "eval",
            "--encoder-ckpt",
            s(encoder()),
            "--phi-ckpt",
            s(&phi_ckpt),
            "--baseline",
            baseline,
            "--k",
            "3",
            "--out",
            s(&out),
        ]);
        let results = read(out.join("results.csv"));
        assert!(results.starts_with("query_id,rank,item_id,score\n"));
        assert_eq!(results.lines().count(), 1 + 200 * 3);
        serde_json::from_str::<serde_json::Value>(&read(out.join("metrics.json"))).unwrap()
    };

    let composed = metrics("composed");
    for key in [
        "queries",
        "recall_at_1",
        "recall_at_5",
        "recall_at_10",
        "map_at_5",
        "map_at_10",
        "modality_gap",
    ] {
        assert!(composed["metrics"][key].is_number(), "missing {key}");
    }
    assert!(composed["recall_at_k"].is_number() && composed["map_at_k"].is_number());
    assert_eq!(composed["config"]["k"], 3);

    let oracle = metrics("oracle");
    assert_eq!(oracle["metrics"]["recall_at_1"], 1.0);
    assert_eq!(oracle["metrics"]["map_at_5"], 1.0);
    for b in ["text-only", "image-only", "random-phi"] {
        let m = metrics(b);
        let r = m["metrics"]["recall_at_1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    assert!(metrics("text-only")["metrics"].get("modality_gap").is_none());
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn missing_inputs_fail_with_a_module_name() {
    let dir = TempDir::new().unwrap();
    let out = lincir(&["eval", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error: cli:"));

    let out = lincir(&[
        "eval",
        "--encoder-ckpt",
        s(&dir.path().join("nope.lncr")),
        "--out",
        s(dir.path()),
    ]);
    assert!(error_line(&out).starts_with("error: io:"));

    std::fs::write(dir.path().join("junk.lncr"), b"JUNKJUNK").unwrap();
    let out = lincir(&[
        "eval",
        "--encoder-ckpt",
        s(&dir.path().join("junk.lncr")),
        "--out",
        s(dir.path()),
    ]);
    assert!(error_line(&out).starts_with("error: checkpoint:"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"steps": 4, "eval-every": 2, "batch": 8, "noise": "none", "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("t");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--encoder-ckpt",
        s(encoder()),
        "--seed",
        "5",
        "--out",
        s(&out),
    ]);
    let echo: serde_json::Value = serde_json::from_str(&read(out.join("config.json"))).unwrap();
    assert_eq!(echo["steps"], 4);
    assert_eq!(echo["noise"], "none");
    assert_eq!(echo["seed"], 5);
    assert_eq!(echo["lr"], 1e-3);

    // the echo replays the run
    let replay = dir.path().join("replay");
    ok(&["train", "--config", s(&out.join("config.json")), "--out", s(&replay)]);
    assert_eq!(
        std::fs::read(out.join("phi.lncr")).unwrap(),
        std::fs::read(replay.join("phi.lncr")).unwrap()
    );
}

#[test]
fn synth_export_feeds_eval() {
    let dir = TempDir::new().unwrap();
    let bench = dir.path().join("bench");
    ok(&["synth", "--seed", "2", "--out", s(&bench)]);
    assert_eq!(read(bench.join("gallery.jsonl")).lines().count(), 288);
    assert_eq!(read(bench.join("dev.jsonl")).lines().count(), 100);
    assert_eq!(read(bench.join("test.jsonl")).lines().count(), 200);
    assert!(!read(bench.join("corpus.txt")).is_empty());

    let from_file = dir.path().join("file");
    let from_seed = dir.path().join("seed");
    let common = ["eval", "--encoder-ckpt", s(encoder()), "--baseline", "image-only"];
    ok(&[&common[..], &["--benchmark", s(&bench), "--out", s(&from_file)]].concat());
    ok(&[&common[..], &["--seed", "2", "--out", s(&from_seed)]].concat());
    assert_eq!(read(from_file.join("results.csv")), read(from_seed.join("results.csv")));
}

fn ablation_rows(path: &Path) -> Vec<Vec<String>> {
    let text = read(path);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>().join(","),
        ABLATION_HEADER
    );
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn ablation_tables() {
    let dir = TempDir::new().unwrap();
    let tiny = ["--steps", "2", "--eval-every", "1", "--batch", "8"];
    let run = |table: &str, extra: &[&str]| {
        let out = dir.path().join(table);
        ok(&[
            &["ablate", table, "--encoder-ckpt", s(encoder()), "--out", s(&out)][..],
            &tiny,
            extra,
        ]
        .concat());
        ablation_rows(&out.join(format!("ablate_{table}.csv")))
    };

    let sup = run("supervision", &[]);
    assert_eq!(sup.len(), 3);
    assert_eq!(sup[0][4], "not implemented");
    assert!(sup[1..].iter().all(|r| r[4] == "ok" && !r[6].is_empty()));

    let masking = run("masking", &[]);
    let labels: Vec<&str> = masking.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(labels.len(), 7);
    assert!(labels.contains(&"Random token"));

    let phi = dir.path().join("t");
    quick_train(&phi, &[]);
    let prompts = run("prompts", &["--phi-ckpt", s(&phi.join("phi.lncr"))]);
    assert_eq!(prompts.len(), PromptTemplate::builtin().len());
    assert_eq!(prompts[0][1], PromptTemplate::default().text());
}

#[test]
fn noise_analysis_csv_and_histogram() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "analyze-noise",
            "--samples",
            "500",
            "--dims",
            "8,16",
            "--bins",
            "4",
            "--out",
            s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let csv = read(a.join("noise_norms.csv"));
    assert_eq!(csv.lines().next(), Some(NOISE_HEADER));
    assert_eq!(csv.lines().count(), 1 + 7 * 2);
    assert!(csv.contains("\nscaled-gaussian,16,500,"));
    let hist = read(a.join("noise_histogram.csv"));
    assert_eq!(hist.lines().count(), 1 + 7 * 2 * 4);
    assert_eq!(csv, read(b.join("noise_norms.csv")));
    assert_eq!(hist, read(b.join("noise_histogram.csv")));
}
