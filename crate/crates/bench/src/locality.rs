//! Recompute cost as a function of how many shards a forget set touches.

use std::collections::BTreeSet;

use anyhow::{ensure, Result};
use heston_forget::forgetting::{forget, ForgetRequest, Method};
use serde::{Deserialize, Serialize};

use crate::experiment::Experiment;
use crate::timing::{median, with_threads};

/// A forget set of `n_forget` quotes spread evenly over the first
/// `n_shards` shards (in ascending shard id).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityScenario {
    pub n_shards: usize,
    pub n_forget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityRow {
    pub n_affected_shards: usize,
    pub n_forget: usize,
    pub n_repriced: usize,
    /// `n_repriced / |D∖F|`
    pub n_repriced_ratio: f64,
    pub recompute_s: f64,
    pub retrain_s: f64,
    /// `recompute_s / retrain_s`
    pub time_ratio: f64,
}

/// `0..=n_shards` affected shards with a fixed forget size.
pub fn default_scenarios(n_shards: usize, n_forget: usize) -> Vec<LocalityScenario> {
    (0..=n_shards)
        .map(|k| LocalityScenario { n_shards: k, n_forget: if k == 0 { 0 } else { n_forget } })
        .collect()
}

/// Picks quotes round-robin across the chosen shards, taking every
/// `stride`-th quote inside each shard.
pub fn scenario_forget_set(exp: &Experiment, sc: &LocalityScenario) -> Result<BTreeSet<u64>> {
    let shards: Vec<u32> = exp.store.shard_ids().take(sc.n_shards).collect();
    ensure!(shards.len() == sc.n_shards, "only {} shards available", shards.len());
    if sc.n_forget == 0 {
        return Ok(BTreeSet::new());
    }
    ensure!(sc.n_forget >= sc.n_shards, "need at least one forgotten quote per shard");
    let mut ids = BTreeSet::new();
    for (i, &k) in shards.iter().enumerate() {
        let quotes = exp.store.shard(k);
        let take = sc.n_forget / sc.n_shards + usize::from(i < sc.n_forget % sc.n_shards);
        ensure!(take < quotes.len(), "shard {k} too small for {take} forgotten quotes");
        let stride = quotes.len() / take;
        ids.extend(quotes.iter().step_by(stride).take(take).map(|q| q.quote_id));
    }
    Ok(ids)
}

/// Times recompute against retrain for each scenario, medians over `n_repeats`.
pub fn shard_locality_study(
    exp: &Experiment,
    scenarios: &[LocalityScenario],
    n_repeats: usize,
    threads: usize,
) -> Result<Vec<LocalityRow>> {
    ensure!(n_repeats >= 1, "n_repeats must be >= 1");
    let lambda = exp.cache.lambda_ridge;
    with_threads(threads, || {
        let mut rows = Vec::new();
        for sc in scenarios {
            let ids = scenario_forget_set(exp, sc)?;
            let run = |m| forget(&exp.cache, &exp.store, &exp.pricer, &ForgetRequest::new(ids.clone(), m, lambda));
            // warm-up
            run(Method::Recompute)?;
            let mut rec_t = Vec::new();
            let mut ret_t = Vec::new();
            let mut n_repriced = 0;
            for _ in 0..n_repeats {
                let rec = run(Method::Recompute)?;
                let ret = run(Method::Retrain)?;
                n_repriced = rec.n_repriced;
                rec_t.push(rec.wall_time);
                ret_t.push(ret.wall_time);
            }
            let (recompute_s, retrain_s) = (median(&rec_t), median(&ret_t));
            let kept = exp.quotes.len() - ids.len();
            let row = LocalityRow {
                n_affected_shards: sc.n_shards,
                n_forget: ids.len(),
                n_repriced,
                n_repriced_ratio: n_repriced as f64 / kept as f64,
                recompute_s,
                retrain_s,
                time_ratio: recompute_s / retrain_s,
            };
            log::info!("{} shards: time ratio {:.3}, repriced {}", row.n_affected_shards, row.time_ratio, row.n_repriced);
            rows.push(row);
        }
        Ok(rows)
    })
}

/// Largest drop in `time_ratio` when rows are ordered by `n_repriced`.
pub fn max_monotonicity_drop(rows: &[LocalityRow]) -> f64 {
    let mut sorted: Vec<&LocalityRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.n_repriced);
    let mut running_max = f64::NEG_INFINITY;
    let mut drop = 0.0_f64;
    for r in sorted {
        drop = drop.max(running_max - r.time_ratio);
        running_max = running_max.max(r.time_ratio);
    }
    drop
}
