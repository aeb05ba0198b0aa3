//! Run-directory round trips, locality counters and the `hforget` binary.

use std::process::Command;

use heston_forget::forgetting::{forget, ForgetRequest, Method};
use heston_forget_bench::config::{ExperimentConfig, DEFAULT_SEED};
use heston_forget_bench::experiment::{Experiment, CACHE_FILE, CALIBRATION_FILE, META_FILE, QUOTES_FILE};
use heston_forget_bench::locality::{default_scenarios, scenario_forget_set, shard_locality_study};
use heston_forget_bench::sweep::{bench_sweep, random_forget_set, read_rows_csv, write_rows_csv, BenchConfig, BenchRow};
use heston_forget_bench::run_experiment;

fn small() -> Experiment {
    run_experiment(&ExperimentConfig::small(DEFAULT_SEED)).unwrap()
}

#[test]
fn run_directory_round_trip() {
    let exp = small();
    let dir = tempfile::tempdir().unwrap();
    exp.write(dir.path()).unwrap();
    for f in [QUOTES_FILE, META_FILE, CALIBRATION_FILE, CACHE_FILE] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let back = Experiment::load(dir.path()).unwrap();
    assert_eq!(back.cache, exp.cache);
    assert_eq!(back.quotes, exp.quotes);
    assert_eq!(back.store.dataset_hash(), exp.store.dataset_hash());

    let ids: Vec<u64> = exp.cache.quote_ids().collect();
    let req = ForgetRequest::new(random_forget_set(&ids, 0.05, 3), Method::Recompute, exp.config.lambda_ridge);
    let a = forget(&exp.cache, &exp.store, &exp.pricer, &req).unwrap();
    let b = forget(&back.cache, &back.store, &back.pricer, &req).unwrap();
    assert_eq!(a.theta_new, b.theta_new);
}

#[test]
fn locality_counts_only_touched_shards() {
    let exp = small();
    let scenarios = default_scenarios(9, 27);
    for sc in &scenarios {
        let set = scenario_forget_set(&exp, sc).unwrap();
        assert_eq!(set.len(), sc.n_forget);
        assert_eq!(exp.cache.affected_shards(&set).unwrap().len(), sc.n_shards);
    }
    let rows = shard_locality_study(&exp, &scenarios, 1, 1).unwrap();
    for (sc, row) in scenarios.iter().zip(&rows) {
        let set = scenario_forget_set(&exp, sc).unwrap();
        let touched = exp.cache.affected_shards(&set).unwrap();
        let expected: usize = touched.iter().map(|s| exp.cache.per_shard[s].n_quotes).sum::<usize>() - set.len();
        assert_eq!(row.n_repriced, expected);
    }
}

#[test]
fn sweep_rows_survive_csv() {
    let exp = small();
    let cfg = BenchConfig { fractions: vec![0.02, 0.1], n_repeats: 2, ..BenchConfig::default() };
    let res = bench_sweep(&cfg, &exp).unwrap();
    assert!(res.violations().is_empty(), "{:?}", res.violations());
    assert_eq!(res.samples.len(), 4);
    let mut buf = Vec::new();
    write_rows_csv(&res.rows, &mut buf).unwrap();
    let back: Vec<BenchRow> = read_rows_csv(buf.as_slice()).unwrap();
    assert_eq!(back, res.rows);
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_hforget"))
            .arg("--out")
            .arg(dir.path())
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["simulate"]);
    run(&["calibrate"]);
    run(&["cache", "build"]);
    assert!(run(&["cache", "inspect"]).contains("540"));
    let report = run(&["forget", "--method", "fast", "--fraction", "0.05", "--baseline"]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["method"], "fast");

    let bad = Command::new(env!("CARGO_BIN_EXE_hforget"))
        .arg("--out")
        .arg(dir.path())
        .args(["forget", "--method", "fast", "--ids", "999999"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
