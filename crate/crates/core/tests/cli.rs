use std::path::Path;

use clap::Parser;
use spos::cli::{execute, run_command, Cli};
use spos::cost::{count_macs, count_params, CostReport};
use spos::space::{Architecture, SupernetSpec};

fn run(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("spos").chain(args.iter().copied())).expect("valid argv");
    let mut out = Vec::new();
    execute(&cli.command, &mut out).expect("command succeeds");
    String::from_utf8(out).unwrap()
}

fn status(args: &[&str]) -> i32 {
    run_command(std::iter::once("spos").chain(args.iter().copied()))
}

fn write_config(dir: &Path) -> String {
    let config = serde_json::json!({
        "spec": { "preset": "desk" },
        "train": { "iterations": 6, "batch_size": 16, "log_interval": 2 },
        "search": { "population": 4, "iterations": 3, "topk": 2 },
        "dataset": { "source": { "format": "synthetic", "samples": 200 }, "calib_samples": 32 },
        "seed": 3
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn cost_json_totals_match_counters() {
    let spec = SupernetSpec::desk();
    for text in ["0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0", "3.0.0-2.0.0-1.0.0-0.0.0-3.0.0-2.0.0-1.0.0-0.0.0"] {
        let arch: Architecture = text.parse().unwrap();
        let report: CostReport = serde_json::from_str(&run(&["cost", "--preset", "desk", "--arch", text, "--json"])).unwrap();
        assert_eq!(report.total.macs, count_macs(&arch, &spec).unwrap());
        assert_eq!(report.total.params, count_params(&arch, &spec).unwrap());
        assert_eq!(report.rows.iter().map(|r| r.macs).sum::<u64>(), report.total.macs);
        assert_eq!(report.rows.iter().map(|r| r.params).sum::<u64>(), report.total.params);
    }
}

#[test]
fn cost_table_reports_constraint_outcome() {
    let arch = "0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0-0.0.0";
    let text = run(&["cost", "--arch", arch, "--constraint", "macs:2e6", "--constraint", "params:1000"]);
    assert!(text.contains("1239808"));
    assert!(text.lines().any(|l| l.starts_with("macs") && l.contains(": ok")));
    assert!(text.lines().any(|l| l.starts_with("params") && l.contains(": violated")));
}

#[test]
fn bad_arguments_exit_nonzero() {
    assert_ne!(status(&["cost", "--arch", "9.0.0"]), 0);
    assert_ne!(status(&["cost", "--arch", "0.0.0", "--preset", "nope"]), 0);
    assert_ne!(status(&["bogus-command"]), 0);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let missing = tmp.path().join("absent.spos");
    assert_ne!(status(&["search", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]), 0);
}

#[test]
fn train_then_search_writes_outputs_and_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    run(&["train-supernet", "--config", &cfg, "--out", o]);
    let ck = out.join("checkpoint.spos");
    let before = std::fs::read(&ck).unwrap();
    let loss = std::fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 6);

    run(&["search", "--config", &cfg, "--out", o, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(std::fs::read(&ck).unwrap(), before);
    let curve = std::fs::read_to_string(out.join("search_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
    let log = std::fs::read_to_string(out.join("search_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4 * 3);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let best = std::fs::read_to_string(out.join("best_arch.txt")).unwrap();
    assert_eq!(summary["best_arch"].as_str().unwrap(), best.trim());
    assert_eq!(summary["budget"], 12);

    let eval = run(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--arch", best.trim()]);
    let acc = serde_json::from_str::<serde_json::Value>(&eval).unwrap()["val_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
