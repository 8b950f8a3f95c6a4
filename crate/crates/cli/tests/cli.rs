use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn kprompt(args: &[&str]) -> Output {
    kprompt_env(args, None)
}

fn kprompt_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kprompt"));
    cmd.args(args).env_remove("TKDP_SEED");
    if let Some(s) = seed_env {
        cmd.env("TKDP_SEED", s);
    }
    cmd.output().expect("spawn kprompt")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("data");
    ok(&kprompt(&["gen-data", "--n", "20", "--seed", "3", "--out", p(&dir)]));
    dir
}

fn write_config(tmp: &TempDir, name: &str, json: &str) -> PathBuf {
    let path = tmp.path().join(name);
    fs::write(&path, json).unwrap();
    path
}

fn resolved_seed(dir: &Path) -> u64 {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("resolved-config.json")).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn protocol_report_has_five_episodes_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let cfg = write_config(&tmp, "c.json", r#"{"epochs": 2, "encoder": {"d_h": 8, "d_ff": 16}}"#);
    let run = |name: &str, jobs: &str| {
        let out = tmp.path().join(name);
        ok(&kprompt(&[
            "protocol",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--k",
            "5",
            "--mode",
            "tkdp",
            "--seed",
            "9",
            "--jobs",
            jobs,
            "--out",
            p(&out),
        ]));
        fs::read(out.join("report.json")).unwrap()
    };
    let a = run("a", "1");
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["episodes"].as_array().unwrap().len(), 5);
    for key in ["P", "R", "F1"] {
        assert!(report["mean"][key].is_number() && report["std"][key].is_number());
    }
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "2"));
}

#[test]
fn gradcheck_passes_on_desk_config() {
    let tmp = TempDir::new().unwrap();
    let out = kprompt(&["gradcheck", "--out", p(tmp.path())]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check passed"));
    assert!(tmp.path().join("gradcheck.json").exists());
}

#[test]
fn modes_give_distinct_checkpoints_and_eval_matches_train() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let cfg = write_config(&tmp, "c.json", r#"{"epochs": 3, "encoder": {"d_h": 8, "d_ff": 16}}"#);
    let train = |mode: &str| {
        let out = tmp.path().join(mode);
        ok(&kprompt(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--mode",
            mode,
            "--seed",
            "1",
            "--out",
            p(&out),
        ]));
        out
    };
    let (dpt, tkdp) = (train("dpt"), train("tkdp"));
    let read = |d: &Path| fs::read(d.join("checkpoint.json")).unwrap();
    assert_ne!(read(&dpt), read(&tkdp));
    for f in [
        "model.json",
        "lexicon.json",
        "train-log.jsonl",
        "metrics.json",
        "resolved-config.json",
    ] {
        assert!(tkdp.join(f).exists(), "{f}");
    }

    let eval_dir = tmp.path().join("eval");
    ok(&kprompt(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&tkdp),
        "--out",
        p(&eval_dir),
    ]));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tkdp.join("metrics.json")).unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["F1"], eval["F1"]);
    let preds = fs::read_to_string(eval_dir.join("predictions.conll")).unwrap();
    assert!(preds
        .lines()
        .filter(|l| !l.is_empty())
        .all(|l| l.split('\t').count() == 3));
}

#[test]
fn resolved_config_replays_exactly() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let first = tmp.path().join("first");
    ok(&kprompt(&[
        "train",
        "--data",
        p(&data),
        "--k",
        "2",
        "--lp",
        "2",
        "--np",
        "1",
        "--seed",
        "5",
        "--out",
        p(&first),
        "--config",
        p(&write_config(&tmp, "c.json", r#"{"epochs": 2}"#)),
    ]));
    let replay = tmp.path().join("replay");
    let resolved = first.join("resolved-config.json");
    ok(&kprompt(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&resolved),
        "--out",
        p(&replay),
    ]));
    assert_eq!(
        fs::read(first.join("checkpoint.json")).unwrap(),
        fs::read(replay.join("checkpoint.json")).unwrap()
    );
    assert_eq!(
        fs::read(&resolved).unwrap(),
        fs::read(replay.join("resolved-config.json")).unwrap()
    );
}

#[test]
fn invalid_config_reports_field_path() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let bad = write_config(&tmp, "bad.json", r#"{"encoder": {"heads": "two"}}"#);
    let out = kprompt(&[
        "train",
        "--config",
        p(&bad),
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("encoder.heads"), "{err}");

    let bad = write_config(&tmp, "bad2.json", r#"{"lr": -1.0}"#);
    let out = kprompt(&[
        "sample",
        "--config",
        p(&bad),
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn seed_precedence() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let seeded = write_config(&tmp, "seeded.json", r#"{"seed": 7}"#);
    let plain = write_config(&tmp, "plain.json", r#"{"k": 2}"#);
    let sample = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec!["sample", "--data", p(&data), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&kprompt_env(&args, env));
        resolved_seed(&out)
    };
    assert_eq!(sample("a", &[], None), 42);
    assert_eq!(sample("b", &[], Some("13")), 13);
    assert_eq!(sample("c", &["--config", p(&plain)], Some("13")), 13);
    assert_eq!(sample("d", &["--config", p(&seeded)], Some("13")), 7);
    assert_eq!(sample("e", &["--config", p(&seeded), "--seed", "99"], Some("13")), 99);
}

#[test]
fn sample_writes_plan() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let out = tmp.path().join("s");
    ok(&kprompt(&["sample", "--data", p(&data), "--k", "2", "--out", p(&out)]));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["k"], 2);
    assert_eq!(plan["episodes"].as_array().unwrap().len(), 5);
    assert!(plan["episodes"][0]["ids"].is_array() && plan["episodes"][0]["counts"].is_object());
}

#[test]
fn sweep_writes_sorted_table() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let cfg = write_config(
        &tmp,
        "c.json",
        r#"{"epochs": 1, "num_seeds": 2, "encoder": {"d_h": 8, "d_ff": 16}}"#,
    );
    let out = tmp.path().join("sw");
    ok(&kprompt(&[
        "sweep",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--axis",
        "length",
        "--values",
        "3,1",
        "--out",
        p(&out),
    ]));
    let table = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let values: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(values, ["1", "3"]);
}

#[test]
fn attention_export_has_one_column_per_prompt_row() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let model = tmp.path().join("m");
    let cfg = write_config(&tmp, "c.json", r#"{"epochs": 1}"#);
    ok(&kprompt(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--lp",
        "3",
        "--out",
        p(&model),
    ]));
    let out = tmp.path().join("att");
    ok(&kprompt(&[
        "export-attention",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--limit",
        "3",
        "--out",
        p(&out),
    ]));
    let files: Vec<_> = fs::read_dir(out.join("attention")).unwrap().collect();
    assert_eq!(files.len(), 3);
    let csv = fs::read_to_string(out.join("attention/sentence-0000.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 1 + 2 * 3);
    for row in csv.lines().skip(1) {
        let total: f64 = row.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!(total > 0.0 && total < 1.0 + 1e-12);
    }
}

#[test]
fn lexicon_validation_flags_problems() {
    let tmp = TempDir::new().unwrap();
    let clean = corpus(&tmp).join("lexicon.json");
    ok(&kprompt(&[
        "validate-lexicon",
        p(&clean),
        "--out",
        p(&tmp.path().join("v1")),
    ]));
    let dirty = write_config(
        &tmp,
        "dirty.json",
        r#"{"sememes": ["a", "a"], "words": {"x": ["a", "zz"], "X": ["a"]}}"#,
    );
    let out = kprompt(&["validate-lexicon", p(&dirty), "--out", p(&tmp.path().join("v2"))]);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("zz") && text.contains("duplicate"), "{text}");
}
