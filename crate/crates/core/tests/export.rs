use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use alive_core::engine::config::RunConfig;
use alive_core::engine::export::{export_batches, ExportError, FORMAT_VERSION};
use alive_core::engine::run::{step_dir, BATCHES};
use alive_core::engine::stats::{run_stats, StatsError};
use alive_core::engine::{run, Engine};

fn toy_run(dir: &Path, warmup: u64, total: u64) {
    let mut cfg = RunConfig::default();
    cfg.loop_cfg.warmup_steps = warmup;
    cfg.loop_cfg.total_steps = total;
    run(&mut Engine::toy(cfg).unwrap(), dir).unwrap();
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn archive_groups_and_counts() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 1, 3);
    let out = d.path().join("archive.jsonl");
    let s = export_batches(d.path(), &out, FORMAT_VERSION).unwrap();
    assert_eq!(s.steps, 3);
    assert_eq!(s.batch_items, 265 + 137 + 137);

    let ls = lines(&out);
    let m = &ls[0]["manifest"];
    assert_eq!(m["format_version"], 1);
    assert_eq!(m["batch_items"], 539);
    assert_eq!(m["steps"], serde_json::json!([1, 2, 3]));

    let groups = |step: u64| -> Vec<(String, u64)> {
        ls[1..]
            .iter()
            .filter(|l| l["step"] == step)
            .map(|l| (l["group"].as_str().unwrap().to_string(), l["count"].as_u64().unwrap()))
            .collect()
    };
    let g1 = groups(1);
    let names: Vec<&str> = g1.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["document", "task_difficulty", "hard_verification", "soft_introspective", "verbal_diagnostic", "distill"]);
    let count = |g: &[(String, u64)], name: &str| g.iter().find(|(n, _)| n == name).map(|(_, c)| *c);
    assert_eq!(count(&g1, "document"), Some(1));
    assert_eq!(count(&g1, "verbal_diagnostic"), Some(128));
    assert_eq!(count(&g1, "distill"), Some(128));
    assert_eq!(count(&g1, "hard_verification"), Some(128));
    // constructor tasks plus their rewards
    assert_eq!(count(&g1, "task_difficulty"), Some(16));
    assert_eq!(count(&groups(2), "distill"), None);

    for l in &ls[1..] {
        assert_eq!(l["count"].as_u64().unwrap() as usize, l["records"].as_array().unwrap().len());
    }
}

#[test]
fn unsupported_version() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 0, 1);
    let err = export_batches(d.path(), &d.path().join("a"), 2).unwrap_err();
    assert!(matches!(err, ExportError::UnsupportedVersion(2)));
    assert!(!d.path().join("a").exists());
}

#[test]
fn gaps_are_reported() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 0, 4);
    fs::remove_dir_all(step_dir(d.path(), 2)).unwrap();
    fs::remove_dir_all(step_dir(d.path(), 3)).unwrap();
    match export_batches(d.path(), &d.path().join("a"), FORMAT_VERSION) {
        Err(ExportError::Gaps(g)) => assert_eq!(g, vec![2, 3]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn corrupt_record_is_located() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 0, 2);
    let path = step_dir(d.path(), 2).join(BATCHES);
    let text = fs::read_to_string(&path).unwrap();
    let mut ls: Vec<&str> = text.split_inclusive('\n').collect();
    let good: u64 = ls[..3].iter().map(|l| l.len() as u64).sum();
    ls[3] = "{\"schema_version\":1,\"kind\":\"ba\n";
    fs::write(&path, ls.concat()).unwrap();
    match export_batches(d.path(), &d.path().join("a"), FORMAT_VERSION) {
        Err(ExportError::BadRecord { file, offset, .. }) => {
            assert_eq!(file, path);
            assert_eq!(offset, good);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(!d.path().join("a").exists());
}

#[test]
fn missing_items_fail_the_count_check() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 0, 1);
    let path = step_dir(d.path(), 1).join(BATCHES);
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(20).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert!(matches!(
        export_batches(d.path(), &d.path().join("a"), FORMAT_VERSION),
        Err(ExportError::Count { step: 1, .. })
    ));
}

#[test]
fn not_a_run() {
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(export_batches(d.path(), &d.path().join("a"), FORMAT_VERSION), Err(ExportError::NotARun(_))));
}

#[test]
fn stats_windows() {
    let d = tempfile::tempdir().unwrap();
    toy_run(d.path(), 0, 7);
    let rows = run_stats(d.path(), 3).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[2].first_step, rows[2].last_step, rows[2].steps), (7, 7, 1));
    assert!(rows.iter().all(|r| r.entropy.is_some() && r.solver_acc.is_some()));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(run_stats(empty.path(), 3), Err(StatsError::NoData)));
}

fn alive(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_alive")).args(args).env("RUST_BACKTRACE", "0").output().unwrap()
}

#[test]
fn cli_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let run_dir = d.path().join("run");
    let cfg = d.path().join("cfg.toml");
    fs::write(&cfg, "warmup_steps = 1\ntotal_steps = 3\nM = 2\nN = 4\n").unwrap();
    let rd = run_dir.to_str().unwrap();

    let o = alive(&["toy-train", "--config", cfg.to_str().unwrap(), "--run-dir", rd, "--vocab-size", "12", "--modulus", "12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let snapshot = RunConfig::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!((snapshot.toy.spec.vocab_size, snapshot.loop_cfg.m), (12, 2));

    let o = alive(&["stats", "--run", rd, "--window", "2", "--json"]);
    assert!(o.status.success());
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    let out = d.path().join("a.jsonl");
    let o = alive(&["export", "--run", rd, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(lines(&out)[0]["manifest"]["batch_items"], (1 + 2 + 16) + 2 * (1 + 2 + 8));

    let o = alive(&["validate-config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    fs::write(&cfg, "M = 0\nclip.eps_low = 0.3\nclip.eps_high = 0.2\n").unwrap();
    let o = alive(&["validate-config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("M must be") && err.contains("eps_clip_low"), "{err}");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert!(!alive(&["validate-config", cfg.to_str().unwrap()]).status.success());
}
