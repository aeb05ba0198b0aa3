//! Forget-fraction sweep comparing retrain, sharded recompute and fast refactor.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::time::Duration;

use anyhow::{ensure, Result};
use heston_forget::calibration::rmse;
use heston_forget::forgetting::{fast_solve, forget, ForgetRequest, Method};
use heston_forget::N_PARAMS;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experiment::Experiment;
use crate::timing::{median, per_call_seconds, with_threads};

/// Agreement bar between each unlearning operator and retraining.
pub const PARAM_DIST_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub fractions: Vec<f64>,
    pub n_repeats: usize,
    pub seed: u64,
    /// Thread cap inside timed sections.
    pub threads: usize,
    /// Minimum measuring window for one fast-operator timing.
    pub fast_window: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.02, 0.05, 0.10, 0.25],
            n_repeats: 10,
            seed: 7,
            threads: 1,
            fast_window: Duration::from_millis(5),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.fractions.is_empty(), "no forget fractions given");
        ensure!(self.fractions.iter().all(|&f| f > 0.0 && f < 1.0), "fractions must lie in (0, 1)");
        ensure!(self.n_repeats >= 1, "n_repeats must be >= 1");
        ensure!(self.threads >= 1, "threads must be >= 1");
        Ok(())
    }
}

/// Uniformly random subset of `ids` with `round(fraction·n)` elements (at least one).
pub fn random_forget_set(ids: &[u64], fraction: f64, seed: u64) -> BTreeSet<u64> {
    let k = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, ids.len(), k).into_iter().map(|i| ids[i]).collect()
}

/// Seed for repeat `rep` of fraction `fi`.
pub fn repeat_seed(base: u64, fi: usize, rep: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((fi as u64) << 32 | rep as u64)
}

/// One forget set, all three methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub fraction: f64,
    pub repeat: usize,
    pub n_forget: usize,
    pub n_affected_shards: usize,
    pub n_repriced_recompute: usize,
    /// Retained quotes inside affected shards, counted from the store.
    pub expected_repriced: usize,
    pub retrain_s: f64,
    pub recompute_s: f64,
    pub fast_s: f64,
    pub dist_fast_retrain: f64,
    pub dist_recompute_retrain: f64,
    /// `θ_fast − θ_retrain` per parameter.
    pub diff_fast_retrain: [f64; N_PARAMS],
    pub rmse_kept_fast: f64,
    pub rmse_kept_retrain: f64,
}

/// Medians over the repeats of one fraction; distances are maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub fraction: f64,
    pub n_forget: usize,
    pub n_repeats: usize,
    pub retrain_s: f64,
    pub recompute_s: f64,
    pub fast_s: f64,
    pub rmse_kept_fast: f64,
    pub rmse_kept_retrain: f64,
    pub speedup: f64,
    pub param_dist_fast_retrain: f64,
    pub param_dist_recompute_retrain: f64,
    pub n_affected_shards: usize,
    pub n_repriced_recompute: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub samples: Vec<BenchSample>,
}

/// Same value at three significant figures.
pub fn same_3sf(a: f64, b: f64) -> bool {
    format!("{a:.2e}") == format!("{b:.2e}")
}

impl BenchResult {
    /// Human-readable descriptions of every invariant violation.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.samples {
            let tag = format!("fraction {} repeat {}", s.fraction, s.repeat);
            if !(s.dist_fast_retrain < PARAM_DIST_TOL) {
                out.push(format!("{tag}: |theta_fast - theta_retrain| = {:e}", s.dist_fast_retrain));
            }
            if !(s.dist_recompute_retrain < PARAM_DIST_TOL) {
                out.push(format!("{tag}: |theta_recompute - theta_retrain| = {:e}", s.dist_recompute_retrain));
            }
            if s.n_repriced_recompute != s.expected_repriced {
                out.push(format!(
                    "{tag}: recompute repriced {} quotes, expected {}",
                    s.n_repriced_recompute, s.expected_repriced
                ));
            }
        }
        for r in &self.rows {
            if !(r.speedup > 0.0 && r.speedup.is_finite()) {
                out.push(format!("fraction {}: speedup {}", r.fraction, r.speedup));
            }
            if !(r.rmse_kept_fast.is_finite() && r.rmse_kept_retrain.is_finite()) {
                out.push(format!("fraction {}: non-finite RMSE", r.fraction));
            } else if !same_3sf(r.rmse_kept_fast, r.rmse_kept_retrain) {
                out.push(format!(
                    "fraction {}: kept RMSE differs at 3 s.f. ({:e} vs {:e})",
                    r.fraction, r.rmse_kept_fast, r.rmse_kept_retrain
                ));
            }
        }
        out
    }
}

fn run_sample(exp: &Experiment, cfg: &BenchConfig, fraction: f64, repeat: usize, ids: BTreeSet<u64>) -> Result<BenchSample> {
    let lambda = exp.cache.lambda_ridge;
    let req = |m| ForgetRequest::new(ids.clone(), m, lambda);
    let retrain = forget(&exp.cache, &exp.store, &exp.pricer, &req(Method::Retrain))?;
    let recompute = forget(&exp.cache, &exp.store, &exp.pricer, &req(Method::Recompute))?;
    let fast = forget(&exp.cache, &exp.store, &exp.pricer, &req(Method::Fast))?;
    let fast_s = per_call_seconds(|| fast_solve(&exp.cache, &ids, lambda), cfg.fast_window);

    let affected = exp.cache.affected_shards(&ids)?;
    let in_affected: usize = affected.iter().map(|&k| exp.store.shard(k).len()).sum();
    let kept = exp.store.retained(&ids);
    let (tf, tr) = (fast.theta_new.to_array(), retrain.theta_new.to_array());
    Ok(BenchSample {
        fraction,
        repeat,
        n_forget: ids.len(),
        n_affected_shards: affected.len(),
        n_repriced_recompute: recompute.n_repriced,
        expected_repriced: in_affected - ids.len(),
        retrain_s: retrain.wall_time,
        recompute_s: recompute.wall_time,
        fast_s,
        dist_fast_retrain: fast.param_distance(&retrain),
        dist_recompute_retrain: recompute.param_distance(&retrain),
        diff_fast_retrain: std::array::from_fn(|k| tf[k] - tr[k]),
        rmse_kept_fast: rmse(&kept, &fast.theta_new, &exp.pricer)?,
        rmse_kept_retrain: rmse(&kept, &retrain.theta_new, &exp.pricer)?,
    })
}

fn summarize(fraction: f64, samples: &[BenchSample]) -> BenchRow {
    let col = |f: fn(&BenchSample) -> f64| median(&samples.iter().map(f).collect::<Vec<_>>());
    let max = |f: fn(&BenchSample) -> f64| samples.iter().map(f).fold(0.0_f64, f64::max);
    let retrain_s = col(|s| s.retrain_s);
    let fast_s = col(|s| s.fast_s);
    BenchRow {
        fraction,
        n_forget: samples[0].n_forget,
        n_repeats: samples.len(),
        retrain_s,
        recompute_s: col(|s| s.recompute_s),
        fast_s,
        rmse_kept_fast: col(|s| s.rmse_kept_fast),
        rmse_kept_retrain: col(|s| s.rmse_kept_retrain),
        speedup: retrain_s / fast_s,
        param_dist_fast_retrain: max(|s| s.dist_fast_retrain),
        param_dist_recompute_retrain: max(|s| s.dist_recompute_retrain),
        n_affected_shards: samples.iter().map(|s| s.n_affected_shards).max().unwrap_or(0),
        n_repriced_recompute: samples.iter().map(|s| s.n_repriced_recompute).max().unwrap_or(0),
    }
}

/// Runs every method on `n_repeats` random forget sets per fraction.
/// One discarded warm-up run precedes the measurements.
pub fn bench_sweep(cfg: &BenchConfig, exp: &Experiment) -> Result<BenchResult> {
    cfg.validate()?;
    let ids: Vec<u64> = exp.cache.quote_ids().collect();
    with_threads(cfg.threads, || {
        run_sample(exp, cfg, cfg.fractions[0], 0, random_forget_set(&ids, cfg.fractions[0], !cfg.seed))?;
        let mut rows = Vec::new();
        let mut samples = Vec::new();
        for (fi, &fraction) in cfg.fractions.iter().enumerate() {
            let mut these = Vec::with_capacity(cfg.n_repeats);
            for rep in 0..cfg.n_repeats {
                let forget_ids = random_forget_set(&ids, fraction, repeat_seed(cfg.seed, fi, rep));
                these.push(run_sample(exp, cfg, fraction, rep, forget_ids)?);
            }
            let row = summarize(fraction, &these);
            log::info!(
                "fraction {fraction}: retrain {:.3e}s recompute {:.3e}s fast {:.3e}s speedup {:.0}",
                row.retrain_s,
                row.recompute_s,
                row.fast_s,
                row.speedup
            );
            rows.push(row);
            samples.extend(these);
        }
        Ok(BenchResult { rows, samples })
    })
}

pub fn write_rows_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
