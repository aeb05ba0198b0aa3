//! Empirical cost scaling of retrain and fast refactor.
//!
//! Costs do not depend on where the system is linearized, so each dataset
//! size gets a cache at the calibration start point instead of a full
//! calibration.

use std::collections::BTreeSet;
use std::time::Duration;

use anyhow::{ensure, Result};
use heston_forget::forgetting::{fast_solve, retrain_full, QuoteStore};
use heston_forget::market_sim::Quote;
use heston_forget::unlearn_cache::{build_cache, UnlearnCache};
use heston_forget::{FdPolicy, HestonPricer, QuadratureConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::simulate;
use crate::sweep::random_forget_set;
use crate::timing::{loglog_slope, median, per_call_seconds, with_threads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NQuotes,
    NForget,
    NNodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    /// Dataset lengths in days; quotes scale with the grid size.
    pub days: Vec<usize>,
    /// Forget size held fixed along the quote-count axis.
    pub n_forget_fixed: usize,
    /// Forget fractions along the forget-size axis, at the largest dataset.
    pub forget_fractions: Vec<f64>,
    /// Simpson sub-interval counts along the node axis, at the smallest dataset.
    pub n_subs: Vec<usize>,
    pub n_repeats: usize,
    pub threads: usize,
    pub seed: u64,
    pub fast_window: Duration,
}

impl ScalingConfig {
    /// `N ∈ {540, 1080, 2700}` on the large grid, `|F| ∈ {1%, 5%, 25%}`, `N_u ∈ {180, 400, 800}`.
    pub fn standard() -> Self {
        Self {
            days: vec![36, 72, 180],
            n_forget_fixed: 27,
            forget_fractions: vec![0.01, 0.05, 0.25],
            n_subs: vec![180, 400, 800],
            n_repeats: 5,
            threads: 1,
            seed: 11,
            fast_window: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub axis: Axis,
    pub n_quotes: usize,
    pub n_forget: usize,
    pub n_sub: usize,
    /// Median seconds; absent where the axis does not time retrain.
    pub retrain_s: Option<f64>,
    pub fast_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSlopes {
    pub retrain_vs_n: f64,
    pub fast_vs_n: f64,
    pub fast_vs_forget: f64,
    pub retrain_vs_nodes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub slopes: ScalingSlopes,
}

struct Sized {
    quotes: Vec<Quote>,
    cache: UnlearnCache,
}

fn dataset(base: &ExperimentConfig, days: usize, pricer: &HestonPricer) -> Result<Sized> {
    let cfg = ExperimentConfig { days, ..base.clone() };
    let (quotes, _) = simulate(&cfg, pricer)?;
    let cache = build_cache(&quotes, &cfg.theta_start, cfg.lambda_ridge, pricer, &FdPolicy::default())?;
    Ok(Sized { quotes, cache })
}

/// Median retrain time per job, with repeats interleaved across jobs so slow
/// drift in machine speed hits every point alike.
fn time_retrain_interleaved(jobs: &[(Vec<Quote>, &HestonPricer)], base: &ExperimentConfig, n_repeats: usize) -> Result<Vec<f64>> {
    let run = |kept: &[Quote], pricer: &HestonPricer| {
        retrain_full(kept, &base.theta_start, base.lambda_ridge, pricer, &FdPolicy::default()).map(|o| o.wall_time)
    };
    for (kept, pricer) in jobs {
        run(kept, pricer)?;
    }
    let mut t = vec![Vec::with_capacity(n_repeats); jobs.len()];
    for _ in 0..n_repeats {
        for (j, (kept, pricer)) in jobs.iter().enumerate() {
            t[j].push(run(kept, pricer)?);
        }
    }
    Ok(t.iter().map(|v| median(v)).collect())
}

fn time_fast_interleaved(jobs: &[(&UnlearnCache, &BTreeSet<u64>)], cfg: &ScalingConfig) -> Vec<f64> {
    let mut t = vec![Vec::with_capacity(cfg.n_repeats); jobs.len()];
    for _ in 0..cfg.n_repeats {
        for (j, (cache, ids)) in jobs.iter().enumerate() {
            t[j].push(per_call_seconds(|| fast_solve(cache, ids, cache.lambda_ridge), cfg.fast_window));
        }
    }
    t.iter().map(|v| median(v)).collect()
}

pub fn scaling_study(base: &ExperimentConfig, cfg: &ScalingConfig) -> Result<ScalingResult> {
    ensure!(cfg.days.len() >= 3 && cfg.forget_fractions.len() >= 3 && cfg.n_subs.len() >= 3, "need at least 3 points per axis");
    ensure!(cfg.n_repeats >= 1, "n_repeats must be >= 1");
    let pricer = HestonPricer::new(base.quadrature)?;
    let mut days = cfg.days.clone();
    days.sort_unstable();
    with_threads(cfg.threads, || {
        let data = days.iter().map(|&d| dataset(base, d, &pricer)).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();

        // dataset size at fixed |F|
        let fixed: Vec<BTreeSet<u64>> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let ids: Vec<u64> = d.cache.quote_ids().collect();
                random_forget_set(&ids, cfg.n_forget_fixed as f64 / ids.len() as f64, cfg.seed + i as u64)
            })
            .collect();
        let jobs: Vec<(Vec<Quote>, &HestonPricer)> = data
            .iter()
            .zip(&fixed)
            .map(|(d, f)| Ok((QuoteStore::new(&d.quotes)?.retained(f), &pricer)))
            .collect::<Result<_>>()?;
        let retrain = time_retrain_interleaved(&jobs, base, cfg.n_repeats)?;
        let fast_jobs: Vec<_> = data.iter().zip(&fixed).map(|(d, f)| (&d.cache, f)).collect();
        let fast = time_fast_interleaved(&fast_jobs, cfg);
        for (((d, f), retrain_s), fast_s) in data.iter().zip(&fixed).zip(retrain).zip(fast) {
            log::info!("N = {}: retrain {retrain_s:.3e}s fast {fast_s:.3e}s", d.quotes.len());
            rows.push(ScalingRow {
                axis: Axis::NQuotes,
                n_quotes: d.quotes.len(),
                n_forget: f.len(),
                n_sub: base.quadrature.n_sub,
                retrain_s: Some(retrain_s),
                fast_s: Some(fast_s),
            });
        }

        // forget size on the largest dataset
        let largest = data.last().expect("at least one size");
        let ids: Vec<u64> = largest.cache.quote_ids().collect();
        let sets: Vec<BTreeSet<u64>> = cfg
            .forget_fractions
            .iter()
            .enumerate()
            .map(|(i, &frac)| random_forget_set(&ids, frac, cfg.seed + 100 + i as u64))
            .collect();
        let fast_jobs: Vec<_> = sets.iter().map(|f| (&largest.cache, f)).collect();
        for (f, fast_s) in sets.iter().zip(time_fast_interleaved(&fast_jobs, cfg)) {
            log::info!("|F| = {}: fast {fast_s:.3e}s", f.len());
            rows.push(ScalingRow {
                axis: Axis::NForget,
                n_quotes: ids.len(),
                n_forget: f.len(),
                n_sub: base.quadrature.n_sub,
                retrain_s: None,
                fast_s: Some(fast_s),
            });
        }

        // quadrature nodes on the smallest dataset
        let small = &data[0].quotes;
        let small_ids: Vec<u64> = small.iter().map(|q| q.quote_id).collect();
        let f = random_forget_set(&small_ids, cfg.n_forget_fixed as f64 / small_ids.len() as f64, cfg.seed + 200);
        let kept = QuoteStore::new(small)?.retained(&f);
        let pricers = cfg
            .n_subs
            .iter()
            .map(|&n_sub| HestonPricer::new(QuadratureConfig { n_sub, ..base.quadrature }))
            .collect::<heston_forget::Result<Vec<_>>>()?;
        let jobs: Vec<(Vec<Quote>, &HestonPricer)> = pricers.iter().map(|p| (kept.clone(), p)).collect();
        for (&n_sub, retrain_s) in cfg.n_subs.iter().zip(time_retrain_interleaved(&jobs, base, cfg.n_repeats)?) {
            log::info!("n_sub = {n_sub}: retrain {retrain_s:.3e}s");
            rows.push(ScalingRow {
                axis: Axis::NNodes,
                n_quotes: small.len(),
                n_forget: f.len(),
                n_sub,
                retrain_s: Some(retrain_s),
                fast_s: None,
            });
        }
        let slopes = slopes(&rows);
        Ok(ScalingResult { rows, slopes })
    })
}

pub fn slopes(rows: &[ScalingRow]) -> ScalingSlopes {
    let fit = |axis: Axis, x: fn(&ScalingRow) -> usize, y: fn(&ScalingRow) -> Option<f64>| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.axis == axis)
            .filter_map(|r| y(r).map(|v| (x(r) as f64, v)))
            .unzip();
        if xs.len() < 2 {
            f64::NAN
        } else {
            loglog_slope(&xs, &ys)
        }
    };
    ScalingSlopes {
        retrain_vs_n: fit(Axis::NQuotes, |r| r.n_quotes, |r| r.retrain_s),
        fast_vs_n: fit(Axis::NQuotes, |r| r.n_quotes, |r| r.fast_s),
        fast_vs_forget: fit(Axis::NForget, |r| r.n_forget, |r| r.fast_s),
        retrain_vs_nodes: fit(Axis::NNodes, |r| r.n_sub, |r| r.retrain_s),
    }
}
