use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use heston_forget::calibration::CalibrationReport;
use heston_forget::forgetting::{cache_stability, forget, ForgetReport, ForgetRequest, Method};
use heston_forget::linalg::sym_eigenvalues;
use heston_forget::unlearn_cache::{build_cache, load_cache, save_cache};
use heston_forget::{FdPolicy, HestonPricer, PARAM_NAMES};
use heston_forget_bench::config::{ConfigName, ExperimentConfig, DEFAULT_SEED};
use heston_forget_bench::experiment::{
    calibrate, read_json, read_quotes, simulate, write_json, write_quotes, Experiment, RunMeta, BENCH_FILE,
    CACHE_FILE, CALIBRATION_FILE, LOCALITY_FILE, META_FILE, QUOTES_FILE, SCALING_FILE,
};
use heston_forget_bench::locality::{default_scenarios, max_monotonicity_drop, shard_locality_study};
use heston_forget_bench::scaling::{scaling_study, ScalingConfig};
use heston_forget_bench::sweep::{bench_sweep, random_forget_set, write_rows_csv, BenchConfig};

#[derive(Parser, Debug)]
#[command(name = "hforget", version, about = "Heston calibration with exact quote removal")]
struct Cli {
    /// Experiment preset.
    #[arg(long, global = true, default_value = "small")]
    config: ConfigName,

    /// Run directory for inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Dataset seed (path and noise streams derive from it).
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Thread cap for timed sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a path and write quotes.csv and meta.json.
    Simulate,
    /// Run Levenberg-Marquardt on quotes.csv and write calibration.json.
    Calibrate,
    /// Build or inspect the sufficient-statistics cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Remove quotes with one method and print a JSON report.
    Forget(ForgetArgs),
    /// Sweep forget fractions over all methods; write bench.csv.
    Bench(BenchArgs),
    /// Recompute/retrain time against the number of touched shards; write locality.csv.
    Locality(LocalityArgs),
    /// Fit cost scaling exponents; write scaling.csv.
    Scaling(ScalingArgs),
}

#[derive(Subcommand, Debug)]
enum CacheAction {
    /// Build cache.bin at the calibrated parameters.
    Build,
    /// Print header, shard table and eigenvalue summary of cache.bin.
    Inspect,
}

#[derive(Args, Debug)]
struct ForgetArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Comma-separated quote ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "fraction", required_unless_present = "fraction")]
    ids: Vec<u64>,
    /// Uniformly random fraction of quotes to forget.
    #[arg(long)]
    fraction: Option<f64>,
    /// Seed for --fraction sampling.
    #[arg(long = "forget-seed", default_value_t = 0)]
    forget_seed: u64,
    /// Also run retrain and report the parameter distance and stability bounds.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.02, 0.05, 0.10, 0.25])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct LocalityArgs {
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    /// Forget size per scenario; defaults to 5% of quotes.
    #[arg(long)]
    forget: Option<usize>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: heston_forget::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info,heston_forget::forgetting=error")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = ExperimentConfig::preset(cli.config, cli.seed);
    let dir = cli.out.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, dir)?,
        Command::Calibrate => cmd_calibrate(dir)?,
        Command::Cache { action: CacheAction::Build } => cmd_cache_build(dir)?,
        Command::Cache { action: CacheAction::Inspect } => cmd_cache_inspect(dir)?,
        Command::Forget(args) => cmd_forget(dir, args)?,
        Command::Bench(args) => return cmd_bench(&cfg, dir, cli.threads, args),
        Command::Locality(args) => cmd_locality(&cfg, dir, cli.threads, args)?,
        Command::Scaling(args) => cmd_scaling(&cfg, dir, cli.threads, args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pricer = HestonPricer::new(cfg.quadrature)?;
    let (quotes, meta) = simulate(cfg, &pricer)?;
    write_quotes(&dir.join(QUOTES_FILE), &quotes)?;
    write_json(&dir.join(META_FILE), &meta)?;
    println!(
        "{} quotes in {} shards ({} negative), hash {}",
        meta.dataset.n_quotes, meta.dataset.n_shards, meta.dataset.n_negative_prices, meta.dataset.dataset_hash
    );
    Ok(())
}

fn load_inputs(dir: &Path) -> Result<(RunMeta, Vec<heston_forget::market_sim::Quote>, HestonPricer)> {
    let meta: RunMeta = read_json(&dir.join(META_FILE)).context("run `hforget simulate` first")?;
    let quotes = read_quotes(&dir.join(QUOTES_FILE))?;
    let pricer = HestonPricer::new(meta.experiment.quadrature)?;
    Ok((meta, quotes, pricer))
}

fn cmd_calibrate(dir: &Path) -> Result<()> {
    let (meta, quotes, pricer) = load_inputs(dir)?;
    let report = calibrate(&meta.experiment, &quotes, &pricer)?;
    write_json(&dir.join(CALIBRATION_FILE), &report)?;
    println!("stop: {:?} after {} iterations", report.stop, report.iterations);
    let star = report.theta_star.to_array();
    for (name, v) in PARAM_NAMES.iter().zip(star) {
        println!("  {name:>8} = {v:.6}");
    }
    println!("rmse = {:.6e}, loss {:.6e} -> {:.6e}", report.final_rmse, report.loss_initial, report.loss_final);
    Ok(())
}

fn cmd_cache_build(dir: &Path) -> Result<()> {
    let (meta, quotes, pricer) = load_inputs(dir)?;
    let report: CalibrationReport = read_json(&dir.join(CALIBRATION_FILE)).context("run `hforget calibrate` first")?;
    let cache = build_cache(&quotes, &report.theta_star, meta.experiment.lambda_ridge, &pricer, &FdPolicy::default())?;
    save_cache(&cache, dir.join(CACHE_FILE))?;
    println!("cached {} quotes in {} shards", cache.meta.n_quotes, cache.meta.n_shards);
    Ok(())
}

fn cmd_cache_inspect(dir: &Path) -> Result<()> {
    let cache = load_cache(dir.join(CACHE_FILE))?;
    println!("{}", serde_json::to_string_pretty(&cache.meta)?);
    println!("theta_ref    = {:?}", cache.theta_ref.to_array());
    println!("lambda_ridge = {:e}", cache.lambda_ridge);
    println!("{:>6} {:>8} {:>14} {:>14} {:>14}", "shard", "quotes", "min eig H_k", "max eig H_k", "|G_k|");
    for (k, agg) in &cache.per_shard {
        let ev = sym_eigenvalues(&agg.h);
        println!("{k:>6} {:>8} {:>14.6e} {:>14.6e} {:>14.6e}", agg.n_quotes, ev[0], ev[4], agg.g.norm());
    }
    let ev = sym_eigenvalues(&cache.global.h);
    println!("global eigenvalues of H: {}", ev.map(|e| format!("{e:.6e}")).join(" "));
    println!("condition number: {:.6e}", ev[4] / ev[0]);
    println!("|G|_inf = {:.6e}", cache.global.g.amax());
    println!("partition consistency (rel. Frobenius): {:.3e}", cache.check_consistency()?);
    Ok(())
}

fn cmd_forget(dir: &Path, args: &ForgetArgs) -> Result<()> {
    let exp = Experiment::load(dir).context("run simulate, calibrate and cache build first")?;
    let ids: BTreeSet<u64> = match args.fraction {
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                bail!("--fraction must lie in (0, 1)");
            }
            let all: Vec<u64> = exp.cache.quote_ids().collect();
            random_forget_set(&all, f, args.forget_seed)
        }
        None => args.ids.iter().copied().collect(),
    };
    let lambda = exp.cache.lambda_ridge;
    let out = forget(&exp.cache, &exp.store, &exp.pricer, &ForgetRequest::new(ids.clone(), args.method, lambda))?;
    let mut report = ForgetReport::new(&out, &exp.cache, exp.quotes.len());
    if args.baseline {
        let base = forget(&exp.cache, &exp.store, &exp.pricer, &ForgetRequest::new(ids.clone(), Method::Retrain, lambda))?;
        report.dist_to_retrain = Some(out.param_distance(&base));
        report.stability = Some(cache_stability(&exp.cache, &ids)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_bench(cfg: &ExperimentConfig, dir: &Path, threads: usize, args: &BenchArgs) -> Result<ExitCode> {
    let exp = Experiment::load_or_run(cfg, dir)?;
    let bench = BenchConfig { fractions: args.fractions.clone(), n_repeats: args.repeats, threads, ..BenchConfig::default() };
    let result = bench_sweep(&bench, &exp)?;
    write_rows_csv(&result.rows, BufWriter::new(File::create(dir.join(BENCH_FILE))?))?;
    println!(
        "{:>8} {:>12} {:>12} {:>12} {:>10} {:>12} {:>12} {:>10}",
        "fraction", "retrain_s", "recompute_s", "fast_s", "speedup", "rmse_fast", "rmse_retr", "max_dist"
    );
    for r in &result.rows {
        println!(
            "{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.0} {:>12.4e} {:>12.4e} {:>10.2e}",
            r.fraction,
            r.retrain_s,
            r.recompute_s,
            r.fast_s,
            r.speedup,
            r.rmse_kept_fast,
            r.rmse_kept_retrain,
            r.param_dist_fast_retrain.max(r.param_dist_recompute_retrain)
        );
    }
    let violations = result.violations();
    if violations.is_empty() {
        println!("all invariants hold");
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_locality(cfg: &ExperimentConfig, dir: &Path, threads: usize, args: &LocalityArgs) -> Result<()> {
    let exp = Experiment::load_or_run(cfg, dir)?;
    let n_shards = exp.store.shard_ids().count();
    let n_forget = args.forget.unwrap_or(((exp.quotes.len() as f64) * 0.05).round() as usize).max(n_shards);
    let rows = shard_locality_study(&exp, &default_scenarios(n_shards, n_forget), args.repeats, threads)?;
    write_rows_csv(&rows, BufWriter::new(File::create(dir.join(LOCALITY_FILE))?))?;
    println!("{:>7} {:>9} {:>11} {:>11}", "shards", "repriced", "ratio_cnt", "ratio_time");
    for r in &rows {
        println!("{:>7} {:>9} {:>11.4} {:>11.4}", r.n_affected_shards, r.n_repriced, r.n_repriced_ratio, r.time_ratio);
    }
    println!("largest monotonicity drop: {:.4}", max_monotonicity_drop(&rows));
    Ok(())
}

fn cmd_scaling(cfg: &ExperimentConfig, dir: &Path, threads: usize, args: &ScalingArgs) -> Result<()> {
    let sc = ScalingConfig { n_repeats: args.repeats, threads, ..ScalingConfig::standard() };
    let result = scaling_study(cfg, &sc)?;
    write_rows_csv(&result.rows, BufWriter::new(File::create(dir.join(SCALING_FILE))?))?;
    let s = result.slopes;
    println!("retrain time vs N:        slope {:.3}", s.retrain_vs_n);
    println!("fast time vs N:           slope {:.3}", s.fast_vs_n);
    println!("fast time vs |F|:         slope {:.3}", s.fast_vs_forget);
    println!("retrain time vs nodes:    slope {:.3}", s.retrain_vs_nodes);
    Ok(())
}
