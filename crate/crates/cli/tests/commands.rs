use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dms")).args(args).output().expect("run dms")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny_train(steps: usize) -> Value {
    json!({
        "seed": 3,
        "corpus": {"synthetic": {"documents": 40}},
        "model": {"vocab": 256, "d_model": 16, "n_layers": 1, "n_q_heads": 2, "n_kv_heads": 1, "d_ff": 32, "max_seq": 64},
        "pretrain": {"steps": steps, "batch": 2, "seq_len": 32},
        "retrofit": {"steps": steps, "batch": 2, "seq_len": 32, "window": 4, "eval_sequences": 2,
                     "schedule": {"steps_per_cr": 2, "final_cr": 2.0}}
    })
}

#[test]
fn train_with_zero_steps_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.json", &tiny_train(0));
    let out = dir.path().join("run");
    let o = dms(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1);
    let header: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["header"], true);
    assert_eq!(header["seed"], 3);
    let teacher = std::fs::read(out.join("teacher/weights.bin")).unwrap();
    let student = std::fs::read(out.join("checkpoint/weights.bin")).unwrap();
    assert_eq!(teacher, student);
    assert_eq!(read_json(&out.join("checkpoint/manifest.json"))["seed"], 3);
    assert_eq!(read_json(&out.join("summary.json"))["seed"], 3);
}

#[test]
fn train_logs_every_step_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.json", &tiny_train(2));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dms(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let log = std::fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 2);
    for f in ["train_log.jsonl", "summary.json", "checkpoint/weights.bin", "checkpoint/manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_rejects_bad_fields_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_train(0);
    v["retrofit"]["window"] = json!(0);
    let cfg = write_config(dir.path(), "bad.json", &v);
    let o = dms(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("retrofit.window"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());

    let cfg = write_config(dir.path(), "typo.json", &json!({"modle": {}}));
    let o = dms(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("modle"), "{}", stderr(&o));
}

fn simulate(dir: &Path, v: Value, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write_config(dir, "sim.json", &v);
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (dms(&args), out)
}

fn small_model() -> Value {
    json!({"vocab": 32, "d_model": 16, "n_layers": 1, "n_q_heads": 2, "n_kv_heads": 2, "d_ff": 16, "max_seq": 128})
}

#[test]
fn simulate_vanilla_matches_dense_reads() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({"policy": "vanilla", "model": small_model(), "prompt_len": 4, "gen_len": 3, "sequences": 2});
    let (o, out) = simulate(dir.path(), v, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ledger = std::fs::read_to_string(out.join("ledger.jsonl")).unwrap();
    for line in ledger.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["reads_total"], 18.0);
        assert_eq!(r["peak_tokens"], 7.0);
        assert_eq!(r["seed"], 0);
    }
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["aggregate"]["reads_total"], 36.0);
}

#[test]
fn simulate_window_bound_with_all_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({"policy": "dms", "window": 16, "model": small_model(), "decisions": {"kind": "all"},
                   "prompt_len": 8, "gen_len": 100, "sequences": 1});
    let (o, out) = simulate(dir.path(), v, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(std::fs::read_to_string(out.join("ledger.jsonl")).unwrap().trim()).unwrap();
    assert!(r["peak_tokens"].as_f64().unwrap() <= 17.0);
    for live in r["per_head_live"].as_array().unwrap() {
        assert!(live.as_u64().unwrap() <= 16);
    }
}

#[test]
fn simulate_tova_holds_budget() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({"model": small_model(), "budget": 8, "prompt_len": 8, "gen_len": 24, "sequences": 1});
    let (o, out) = simulate(dir.path(), v, &["--policy", "tova"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(std::fs::read_to_string(out.join("ledger.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(r["peak_tokens"], 8.0);
    assert_eq!(r["policy"], "tova");
}

#[test]
fn simulate_unknown_policy_lists_names() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = simulate(dir.path(), json!({"model": small_model()}), &["--policy", "lru"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    for name in ["vanilla", "dms", "tova", "h2o", "quest"] {
        assert!(e.contains(name), "{e}");
    }
    assert!(!out.exists());
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({"policy": "h2o", "budget": 12, "model": small_model(), "prompt_len": 10, "gen_len": 30,
                   "decisions": {"kind": "bernoulli", "rate": 0.5}, "sequences": 3, "seed": 5});
    let (o, out) = simulate(dir.path(), v.clone(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(out.join("ledger.jsonl")).unwrap();
    let (o, _) = simulate(dir.path(), v.clone(), &[]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(out.join("ledger.jsonl")).unwrap());
    let (o, _) = simulate(dir.path(), v, &["--seed", "6"]);
    assert!(o.status.success());
    assert_ne!(first, std::fs::read(out.join("ledger.jsonl")).unwrap());
}

fn sweep_csv(dir: &Path, rows: &[(&str, f64, f64)]) -> PathBuf {
    let mut s = String::from("method,L,W,CR,seed,axis,budget,score\n");
    for (i, (m, b, a)) in rows.iter().enumerate() {
        s.push_str(&format!("{m},{},1,1.0,0,kv_reads,{b},{a}\n", 10 + i));
    }
    let p = dir.join("sweep.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn pareto(dir: &Path, sweep: &Path) -> (Output, PathBuf) {
    let cfg = write_config(dir, "pareto.json", &json!({"sweep_csv": sweep}));
    let out = dir.join("pareto");
    (dms(&["pareto", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), out)
}

fn improvements(out: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(out.join("improvement.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pareto_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = pareto(dir.path(), &sweep_csv(dir.path(), &[("a", 3.0, 0.2)]));
    assert!(o.status.success(), "{}", stderr(&o));
    let frontier = std::fs::read_to_string(out.join("frontier.csv")).unwrap();
    assert_eq!(frontier.lines().count(), 2);
    assert!(improvements(&out).is_empty());
}

#[test]
fn pareto_analytic_half() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [("a", 0.0, 0.0), ("a", 1.0, 2.0), ("b", 0.0, 0.0), ("b", 1.0, 1.0)];
    let (o, out) = pareto(dir.path(), &sweep_csv(dir.path(), &rows));
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = improvements(&out);
    let get = |a: &str, b: &str| -> f64 {
        rows.iter().find(|r| r[1] == a && r[2] == b).unwrap()[3].parse().unwrap()
    };
    assert!((get("a", "b") - 0.5).abs() <= 1e-9);
    assert_eq!(get("b", "a"), -get("a", "b"));
    assert!(!out.join("sweep.csv").exists());
}

#[test]
fn pareto_identical_methods_and_disjoint_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [("a", 0.0, 0.1), ("a", 2.0, 0.7), ("b", 0.0, 0.1), ("b", 2.0, 0.7), ("c", 5.0, 0.1), ("c", 6.0, 0.9)];
    let (o, out) = pareto(dir.path(), &sweep_csv(dir.path(), &rows));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for r in improvements(&out) {
        let pair = (r[1].as_str(), r[2].as_str());
        match pair {
            ("a", "b") | ("b", "a") => assert_eq!(r[3], "0"),
            _ => assert_eq!(r[3], "NA", "{pair:?}"),
        }
    }
}

#[test]
fn costmodel_prints_report() {
    let o = dms(&["costmodel", "--profile", "llama-3.1-8b", "--batch", "1", "--seq-len", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |name: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap()
            .parse()
            .unwrap()
    };
    let p = field("params_from_reads");
    assert!((7.4e9..=7.6e9).contains(&p), "{p}");
    let at = |b: &str, l: &str| {
        let o = dms(&["costmodel", "--batch", b, "--seq-len", l]);
        let t = String::from_utf8(o.stdout).unwrap();
        t.lines().find(|l| l.starts_with("kv_fraction")).unwrap().split_whitespace().nth(1).unwrap().parse::<f64>().unwrap()
    };
    assert!(at("256", "32768") > at("1", "128"));
}

#[test]
fn costmodel_unknown_profile_lists_presets() {
    let o = dms(&["costmodel", "--profile", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("llama-3.1-8b"), "{}", stderr(&o));
}
