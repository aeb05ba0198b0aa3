//! Removing quotes from a calibrated model.
//!
//! Three paths solve the same damped normal equations on the retained set
//! `D∖F`, all linearized at the cache reference `θ_ref`:
//!
//! - [`retrain_full`] reprices every retained quote;
//! - [`sharded_recompute`] reprices only retained quotes in shards touched by `F`;
//! - [`fast_refactor`] subtracts cached per-quote statistics and refactors,
//!   reading nothing but the cache.
//!
//! [`stability_report`] and [`relinearize_once`] quantify how far the
//! fixed-linearization answer is from the perturbed and refitted ones.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{assemble, quote_stats, solve_damped, GnAggregates};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spectral_norm, sym_spectral_norm, Mat5, Vec5};
use crate::market_sim::{dataset_hash, Quote};
use crate::pricing::{FdPolicy, HestonParams, HestonPricer, N_PARAMS};
use crate::unlearn_cache::{subtract_quotes, UnlearnCache};

/// `λ_min(H') < CONDITIONING_RATIO·‖H'‖₂` triggers a warning.
pub const CONDITIONING_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Retrain,
    Recompute,
    Fast,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Retrain, Method::Recompute, Method::Fast];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Recompute => "recompute",
            Method::Fast => "fast",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrain" => Ok(Method::Retrain),
            "recompute" => Ok(Method::Recompute),
            "fast" => Ok(Method::Fast),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetRequest {
    pub forget_ids: BTreeSet<u64>,
    pub method: Method,
    pub lambda_ridge: f64,
}

impl ForgetRequest {
    pub fn new(forget_ids: BTreeSet<u64>, method: Method, lambda_ridge: f64) -> Self {
        Self { forget_ids, method, lambda_ridge }
    }
}

/// Result of one forgetting operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetOutcome {
    pub method: Method,
    /// `θ_ref + Δθ'`.
    pub theta_new: HestonParams,
    pub delta_theta: Vec5,
    /// Seconds spent in the operator itself (assembly or downdate, and the solve).
    pub wall_time: f64,
    /// Quotes whose price and Jacobian were re-evaluated.
    pub n_repriced: usize,
    pub n_affected_shards: usize,
    /// Retained-set system `(H', G')`.
    pub system: GnAggregates,
    pub min_eig_hprime: f64,
    pub warnings: Vec<String>,
}

impl ForgetOutcome {
    pub fn param_distance(&self, other: &ForgetOutcome) -> f64 {
        self.theta_new.distance(&other.theta_new)
    }
}

fn check_lambda(cache: &UnlearnCache, lambda: f64) -> Result<()> {
    if cache.lambda_ridge.to_bits() != lambda.to_bits() {
        return Err(Error::LambdaMismatch { cache: cache.lambda_ridge, request: lambda });
    }
    Ok(())
}

fn to_params(theta_ref: &HestonParams, delta: &Vec5) -> HestonParams {
    let base = theta_ref.to_array();
    HestonParams::from_array(std::array::from_fn(|k| base[k] + delta[k]))
}

/// Solves `(H' + λI)Δθ' = G'`, attaching the Weyl bound when `H` is known.
fn solve_system(system: &GnAggregates, lambda: f64, before: Option<&GnAggregates>) -> Result<Vec5> {
    solve_damped(&system.h, &system.g, lambda).map_err(|e| match e {
        Error::NotPositiveDefinite { min_eig, .. } => Error::NotPositiveDefinite {
            min_eig,
            weyl_bound: before.map(|b| min_eigenvalue(&b.h) - sym_spectral_norm(&(b.h - system.h))),
        },
        other => other,
    })
}

fn conditioning_warnings(system: &GnAggregates) -> (f64, Vec<String>) {
    let min_eig = min_eigenvalue(&system.h);
    let norm = sym_spectral_norm(&system.h);
    let mut warnings = Vec::new();
    if min_eig < CONDITIONING_RATIO * norm {
        warnings.push(format!(
            "ill-conditioned retained curvature: min eigenvalue {min_eig:e} below {CONDITIONING_RATIO:e} x norm {norm:e}"
        ));
        log::warn!("{}", warnings[0]);
    }
    (min_eig, warnings)
}

#[allow(clippy::too_many_arguments)]
fn outcome(
    method: Method,
    theta_ref: &HestonParams,
    delta: Vec5,
    wall_time: f64,
    n_repriced: usize,
    n_affected_shards: usize,
    system: GnAggregates,
) -> ForgetOutcome {
    let (min_eig_hprime, warnings) = conditioning_warnings(&system);
    ForgetOutcome {
        method,
        theta_new: to_params(theta_ref, &delta),
        delta_theta: delta,
        wall_time,
        n_repriced,
        n_affected_shards,
        system,
        min_eig_hprime,
        warnings,
    }
}

/// Assembles `(H*, G*)` on `quotes_retained` at `theta_ref` and takes one
/// damped Gauss–Newton step.
pub fn retrain_full(
    quotes_retained: &[Quote],
    theta_ref: &HestonParams,
    lambda_ridge: f64,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<ForgetOutcome> {
    if quotes_retained.is_empty() {
        return Err(Error::EmptyRetainedSet);
    }
    let start = Instant::now();
    let (system, _) = assemble(quotes_retained, theta_ref, pricer, fd)?;
    let delta = solve_system(&system, lambda_ridge, None)?;
    let wall_time = start.elapsed().as_secs_f64();
    let shards: BTreeSet<u32> = quotes_retained.iter().map(|q| q.shard_id).collect();
    Ok(outcome(Method::Retrain, theta_ref, delta, wall_time, quotes_retained.len(), shards.len(), system))
}

/// Quotes grouped by shard, each group sorted by id, with the dataset hash
/// used to pair the store with a cache.
#[derive(Debug, Clone)]
pub struct QuoteStore {
    by_shard: BTreeMap<u32, Vec<Quote>>,
    shard_of: BTreeMap<u64, u32>,
    hash: String,
}

impl QuoteStore {
    pub fn new(quotes: &[Quote]) -> Result<Self> {
        let mut by_shard: BTreeMap<u32, Vec<Quote>> = BTreeMap::new();
        let mut shard_of = BTreeMap::new();
        for q in quotes {
            if shard_of.insert(q.quote_id, q.shard_id).is_some() {
                return Err(Error::InvalidQuote { quote_id: q.quote_id, reason: "duplicate id".into() });
            }
            by_shard.entry(q.shard_id).or_default().push(*q);
        }
        for v in by_shard.values_mut() {
            v.sort_by_key(|q| q.quote_id);
        }
        Ok(Self { by_shard, shard_of, hash: dataset_hash(quotes) })
    }

    pub fn dataset_hash(&self) -> &str {
        &self.hash
    }

    pub fn len(&self) -> usize {
        self.shard_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shard_of.is_empty()
    }

    pub fn shard(&self, id: u32) -> &[Quote] {
        self.by_shard.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn shard_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_shard.keys().copied()
    }

    pub fn shard_of(&self, quote_id: u64) -> Result<u32> {
        self.shard_of.get(&quote_id).copied().ok_or(Error::UnknownQuoteId(quote_id))
    }

    /// All quotes not in `forget_ids`, ascending id.
    pub fn retained(&self, forget_ids: &BTreeSet<u64>) -> Vec<Quote> {
        let mut v: Vec<Quote> = self
            .by_shard
            .values()
            .flatten()
            .filter(|q| !forget_ids.contains(&q.quote_id))
            .copied()
            .collect();
        v.sort_by_key(|q| q.quote_id);
        v
    }
}

/// Reprices retained quotes only in shards containing forgotten quotes;
/// untouched shards contribute their cached sums and fully forgotten
/// shards are dropped without repricing.
pub fn sharded_recompute(
    cache: &UnlearnCache,
    store: &QuoteStore,
    pricer: &HestonPricer,
    req: &ForgetRequest,
) -> Result<ForgetOutcome> {
    if cache.meta.dataset_hash != store.dataset_hash() {
        return Err(Error::DatasetHashMismatch {
            cache: cache.meta.dataset_hash.clone(),
            store: store.dataset_hash().to_string(),
        });
    }
    if *pricer.config() != cache.meta.quadrature {
        return Err(Error::InvalidConfig("pricer quadrature differs from the cache's".into()));
    }
    check_lambda(cache, req.lambda_ridge)?;
    let start = Instant::now();
    let mut affected = BTreeSet::new();
    for &id in &req.forget_ids {
        affected.insert(store.shard_of(id)?);
    }
    if req.forget_ids.len() >= store.len() {
        return Err(Error::EmptyRetainedSet);
    }
    let reprice: Vec<Quote> = affected
        .iter()
        .flat_map(|&k| store.shard(k).iter().filter(|q| !req.forget_ids.contains(&q.quote_id)))
        .copied()
        .collect();
    let stats = quote_stats(&reprice, &cache.theta_ref, pricer, &cache.meta.fd)?;
    let mut fresh: BTreeMap<u32, GnAggregates> = BTreeMap::new();
    for s in &stats {
        fresh.entry(s.shard_id).or_default().add_stats(s);
    }
    let mut system = GnAggregates::zero();
    if affected.is_empty() {
        system = cache.global.clone();
    }
    for (k, cached) in cache.per_shard.iter().filter(|_| !affected.is_empty()) {
        if !affected.contains(k) {
            system.add(cached);
        } else if let Some(agg) = fresh.get(k) {
            system.add(agg);
        }
    }
    let delta = solve_system(&system, req.lambda_ridge, Some(&cache.global))?;
    let wall_time = start.elapsed().as_secs_f64();
    Ok(outcome(Method::Recompute, &cache.theta_ref, delta, wall_time, reprice.len(), affected.len(), system))
}

/// Downdate plus a fresh Cholesky solve: the timed core of [`fast_refactor`].
pub fn fast_solve(cache: &UnlearnCache, forget_ids: &BTreeSet<u64>, lambda_ridge: f64) -> Result<(GnAggregates, Vec5)> {
    let system = subtract_quotes(cache, forget_ids)?;
    let delta = solve_system(&system, lambda_ridge, Some(&cache.global))?;
    Ok((system, delta))
}

/// Data-free forgetting: reads only the cache.
pub fn fast_refactor(cache: &UnlearnCache, req: &ForgetRequest) -> Result<ForgetOutcome> {
    check_lambda(cache, req.lambda_ridge)?;
    if req.forget_ids.len() >= cache.per_quote.len() {
        // a superset with unknown ids is reported as such below
        if req.forget_ids.iter().all(|&id| cache.position(id).is_some()) {
            return Err(Error::EmptyRetainedSet);
        }
    }
    let start = Instant::now();
    let (system, delta) = fast_solve(cache, &req.forget_ids, req.lambda_ridge)?;
    let wall_time = start.elapsed().as_secs_f64();
    let n_affected = cache.affected_shards(&req.forget_ids)?.len();
    Ok(outcome(Method::Fast, &cache.theta_ref, delta, wall_time, 0, n_affected, system))
}

/// Dispatches on `req.method`.
pub fn forget(
    cache: &UnlearnCache,
    store: &QuoteStore,
    pricer: &HestonPricer,
    req: &ForgetRequest,
) -> Result<ForgetOutcome> {
    match req.method {
        Method::Fast => fast_refactor(cache, req),
        Method::Recompute => sharded_recompute(cache, store, pricer, req),
        Method::Retrain => {
            for &id in &req.forget_ids {
                store.shard_of(id)?;
            }
            let kept = store.retained(&req.forget_ids);
            retrain_full(&kept, &cache.theta_ref, req.lambda_ridge, pricer, &cache.meta.fd)
        }
    }
}

/// Perturbation diagnostics for moving from `(H, G)` to `(H', G')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `‖H − H'‖₂`
    pub delta_h_norm: f64,
    /// `‖G − G'‖₂`
    pub delta_g_norm: f64,
    pub lambda_min_h: f64,
    pub lambda_min_hprime: f64,
    /// `‖(H' + λI)⁻¹‖₂`
    pub inv_norm_hprime: f64,
    /// `‖(H'+λI)⁻¹‖₂ (‖ΔG‖₂ + ‖ΔH‖₂ ‖Δθ‖₂)`
    pub bound: f64,
    /// Measured `‖Δθ' − Δθ‖₂`.
    pub deviation: f64,
    /// `‖(H+λI)⁻¹ ΔH‖₂`; the Neumann bound applies when this is below 1.
    pub neumann_ratio: f64,
    /// `‖(H+λI)⁻¹‖₂ / (1 − neumann_ratio)` when applicable.
    pub neumann_bound: Option<f64>,
    /// `λ_min(H) − ‖ΔH‖₂`
    pub weyl_lower: f64,
}

impl StabilityReport {
    pub fn bound_holds(&self) -> bool {
        self.deviation <= self.bound
    }

    pub fn weyl_holds(&self) -> bool {
        self.lambda_min_hprime >= self.weyl_lower
    }
}

pub fn stability_report(
    before: &GnAggregates,
    after: &GnAggregates,
    delta_theta_before: &Vec5,
    delta_theta_after: &Vec5,
    lambda_ridge: f64,
) -> Result<StabilityReport> {
    let eye = Mat5::identity();
    let dh = before.h - after.h;
    let dg = before.g - after.g;
    let delta_h_norm = sym_spectral_norm(&dh);
    let delta_g_norm = dg.norm();
    let lambda_min_h = min_eigenvalue(&before.h);
    let lambda_min_hprime = min_eigenvalue(&after.h);
    let shifted_min = min_eigenvalue(&(after.h + eye * lambda_ridge));
    if shifted_min <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            min_eig: shifted_min,
            weyl_bound: Some(lambda_min_h - delta_h_norm),
        });
    }
    let inv_norm_hprime = 1.0 / shifted_min;
    let bound = inv_norm_hprime * (delta_g_norm + delta_h_norm * delta_theta_before.norm());
    let a = before.h + eye * lambda_ridge;
    let (neumann_ratio, neumann_bound) = match a.try_inverse() {
        Some(a_inv) => {
            let q = spectral_norm(&(a_inv * dh));
            let b = (q < 1.0).then(|| sym_spectral_norm(&a_inv) / (1.0 - q));
            (q, b)
        }
        None => (f64::INFINITY, None),
    };
    Ok(StabilityReport {
        delta_h_norm,
        delta_g_norm,
        lambda_min_h,
        lambda_min_hprime,
        inv_norm_hprime,
        bound,
        deviation: (delta_theta_after - delta_theta_before).norm(),
        neumann_ratio,
        neumann_bound,
        weyl_lower: lambda_min_h - delta_h_norm,
    })
}

/// Full-data step versus fast-forget step, both from the cache.
pub fn cache_stability(cache: &UnlearnCache, forget_ids: &BTreeSet<u64>) -> Result<StabilityReport> {
    let lambda = cache.lambda_ridge;
    let before = solve_system(&cache.global, lambda, None)?;
    let (after_sys, after) = fast_solve(cache, forget_ids, lambda)?;
    stability_report(&cache.global, &after_sys, &before, &after, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relinearization {
    pub theta_hat: HestonParams,
    /// `‖θ̂ − θ'‖₂`
    pub refinement: f64,
}

/// One fresh Gauss–Newton assembly and solve on the retained data at `theta_prime`.
pub fn relinearize_once(
    quotes_retained: &[Quote],
    theta_prime: &HestonParams,
    lambda_ridge: f64,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<Relinearization> {
    if quotes_retained.is_empty() {
        return Err(Error::EmptyRetainedSet);
    }
    let (agg, _) = assemble(quotes_retained, theta_prime, pricer, fd)?;
    let step = solve_system(&agg, lambda_ridge, None)?;
    let theta_hat = to_params(theta_prime, &step);
    Ok(Relinearization { theta_hat, refinement: step.norm() })
}

/// JSON record of one forgetting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetReport {
    pub method: Method,
    pub n_forget: usize,
    pub forget_fraction: f64,
    pub theta_new: HestonParams,
    pub delta_theta: [f64; N_PARAMS],
    /// `‖θ_method − θ_retrain‖₂` when a baseline was computed.
    pub dist_to_retrain: Option<f64>,
    pub wall_time: f64,
    pub n_repriced: usize,
    pub n_affected_shards: usize,
    pub min_eig_h: f64,
    pub min_eig_hprime: f64,
    pub stability: Option<StabilityReport>,
    pub warnings: Vec<String>,
}

impl ForgetReport {
    pub fn new(o: &ForgetOutcome, cache: &UnlearnCache, n_total: usize) -> Self {
        Self {
            method: o.method,
            n_forget: n_total - o.system.n_quotes,
            forget_fraction: (n_total - o.system.n_quotes) as f64 / n_total.max(1) as f64,
            theta_new: o.theta_new,
            delta_theta: o.delta_theta.into(),
            dist_to_retrain: None,
            wall_time: o.wall_time,
            n_repriced: o.n_repriced,
            n_affected_shards: o.n_affected_shards,
            min_eig_h: min_eigenvalue(&cache.global.h),
            min_eig_hprime: o.min_eig_hprime,
            stability: None,
            warnings: o.warnings.clone(),
        }
    }
}
