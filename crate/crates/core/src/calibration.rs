//! Gauss–Newton normal equations and the Levenberg–Marquardt calibration loop.
//!
//! For quotes `i` with residual `r_i = y_i − m(x_i; θ)`, Jacobian
//! `J_i = ∇_θ m(x_i; θ)` and weight `w_i`, each quote contributes
//! `u_i = w_i J_iᵀ r_i` and `ψ_i = w_i J_iᵀ J_i`. Aggregates are sums of
//! those, always reduced sequentially in ascending quote id so that
//! partition identities reproduce to rounding.

use std::time::Instant;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, Mat5, Vec5};
use crate::market_sim::Quote;
use crate::pricing::{FdPolicy, HestonParams, HestonPricer, QuoteFeatures, N_PARAMS};

/// Per-quote sufficient statistics at a fixed reference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteStats {
    pub quote_id: u64,
    pub shard_id: u32,
    /// `w·Jᵀr`
    pub u: Vec5,
    /// `w·JᵀJ`
    pub psi: Mat5,
}

/// Curvature `H`, gradient-side vector `G` and the number of quotes summed.
#[derive(Debug, Clone, PartialEq)]
pub struct GnAggregates {
    pub h: Mat5,
    pub g: Vec5,
    pub n_quotes: usize,
}

impl Default for GnAggregates {
    fn default() -> Self {
        Self::zero()
    }
}

impl GnAggregates {
    pub fn zero() -> Self {
        Self { h: Mat5::zeros(), g: Vec5::zeros(), n_quotes: 0 }
    }

    pub fn add_stats(&mut self, s: &QuoteStats) {
        self.h += s.psi;
        self.g += s.u;
        self.n_quotes += 1;
    }

    pub fn sub_stats(&mut self, s: &QuoteStats) {
        self.h -= s.psi;
        self.g -= s.u;
        self.n_quotes -= 1;
    }

    pub fn add(&mut self, other: &GnAggregates) {
        self.h += other.h;
        self.g += other.g;
        self.n_quotes += other.n_quotes;
    }

    /// Sequential sum in iteration order.
    pub fn sum<'a>(stats: impl IntoIterator<Item = &'a QuoteStats>) -> Self {
        let mut agg = Self::zero();
        for s in stats {
            agg.add_stats(s);
        }
        agg
    }
}

fn sorted_by_id(quotes: &[Quote]) -> Vec<&Quote> {
    let mut v: Vec<&Quote> = quotes.iter().collect();
    v.sort_by_key(|q| q.quote_id);
    v
}

/// `r_i = y_i − m(x_i; θ)` in ascending quote id order.
pub fn residuals(quotes: &[Quote], params: &HestonParams, pricer: &HestonPricer) -> Result<Vec<f64>> {
    let sorted = sorted_by_id(quotes);
    let features: Vec<QuoteFeatures> = sorted.iter().map(|q| q.features).collect();
    let prices = pricer.price_many(&features, params)?;
    Ok(sorted.iter().zip(prices).map(|(q, m)| q.y - m).collect())
}

/// Weighted loss `Σ w_i r_i²`.
pub fn loss(quotes: &[Quote], params: &HestonParams, pricer: &HestonPricer) -> Result<f64> {
    let sorted = sorted_by_id(quotes);
    let r = residuals(quotes, params, pricer)?;
    Ok(sorted.iter().zip(r).map(|(q, r)| q.weight * r * r).sum())
}

pub fn rmse_of(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Unweighted root-mean-square residual.
pub fn rmse(quotes: &[Quote], params: &HestonParams, pricer: &HestonPricer) -> Result<f64> {
    Ok(rmse_of(&residuals(quotes, params, pricer)?))
}

/// `w_i = 1` if `|r_i| ≤ c`, else `c/|r_i|`.
pub fn huber_weights(residuals: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("Huber threshold must be positive, got {c}")));
    }
    Ok(residuals
        .iter()
        .map(|r| if r.abs() <= c { 1.0 } else { c / r.abs() })
        .collect())
}

/// Per-quote statistics in ascending quote id order.
pub fn quote_stats(
    quotes: &[Quote],
    params: &HestonParams,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<Vec<QuoteStats>> {
    let sorted = sorted_by_id(quotes);
    let features: Vec<QuoteFeatures> = sorted.iter().map(|q| q.features).collect();
    let sens = pricer.price_and_jacobian_many(&features, params, fd)?;
    Ok(sorted
        .iter()
        .zip(sens)
        .map(|(q, s)| {
            let r = q.y - s.price;
            let j = Vec5::from(s.grad);
            // ψ_ab = w·(J_a·J_b) keeps ψ exactly symmetric
            let psi = Mat5::from_fn(|a, b| q.weight * (j[a] * j[b]));
            QuoteStats { quote_id: q.quote_id, shard_id: q.shard_id, u: j * (q.weight * r), psi }
        })
        .collect())
}

/// Aggregates plus the per-quote statistics they were summed from.
pub fn assemble(
    quotes: &[Quote],
    params: &HestonParams,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<(GnAggregates, Vec<QuoteStats>)> {
    let stats = quote_stats(quotes, params, pricer, fd)?;
    Ok((GnAggregates::sum(&stats), stats))
}

/// Solves `(H + damping·I) Δθ = G` by Cholesky.
pub fn gn_step(agg: &GnAggregates, damping: f64) -> Result<Vec5> {
    solve_damped(&agg.h, &agg.g, damping)
}

pub fn solve_damped(h: &Mat5, g: &Vec5, damping: f64) -> Result<Vec5> {
    let a = h + Mat5::identity() * damping;
    match Cholesky::new(a) {
        Some(chol) => Ok(chol.solve(g)),
        None => Err(Error::NotPositiveDefinite { min_eig: min_eigenvalue(&a), weyl_bound: None }),
    }
}

/// Closed box constraint on θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
}

impl Default for ParamBox {
    fn default() -> Self {
        Self {
            lower: [1e-3, 1e-4, 1e-3, -0.999, 1e-4],
            upper: [20.0, 1.0, 3.0, 0.999, 1.0],
        }
    }
}

impl ParamBox {
    pub fn contains(&self, p: &HestonParams) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(k, &x)| x >= self.lower[k] && x <= self.upper[k])
    }

    pub fn clip(&self, a: [f64; N_PARAMS]) -> [f64; N_PARAMS] {
        std::array::from_fn(|k| a[k].clamp(self.lower[k], self.upper[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub lambda_ridge: f64,
    /// Initial damping; `None` uses `1e-3·trace(H)/5` at the start point.
    pub mu0: Option<f64>,
    pub mu_up: f64,
    pub mu_down: f64,
    pub max_iters: usize,
    /// Stop when `‖G‖_∞` falls to this.
    pub grad_tol: f64,
    /// Stop when the clipped step norm falls to this.
    pub step_tol: f64,
    pub param_box: ParamBox,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda_ridge: 1e-6,
            mu0: None,
            mu_up: 4.0,
            mu_down: 0.5,
            max_iters: 50,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            param_box: ParamBox::default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_ridge >= 0.0
            && self.mu0.is_none_or(|m| m > 0.0)
            && self.mu_up > 1.0
            && self.mu_down > 0.0
            && self.mu_down < 1.0
            && self.max_iters > 0
            && self.grad_tol > 0.0
            && self.step_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid LM config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    StepTol,
    MaxIters,
}

/// One trial step of the LM loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrial {
    pub iter: usize,
    /// Loss at the current iterate.
    pub loss: f64,
    pub trial_loss: f64,
    pub mu: f64,
    pub grad_inf: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResult {
    pub theta_star: HestonParams,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: Vec<LmTrial>,
}

/// Levenberg–Marquardt with `(H + (μ + λ)I)Δθ = G`, box clipping, and
/// acceptance only on strict loss decrease.
pub fn lm_calibrate(
    quotes: &[Quote],
    theta_ref: &HestonParams,
    cfg: &LmConfig,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<LmResult> {
    cfg.validate()?;
    theta_ref.validate()?;
    if !cfg.param_box.contains(theta_ref) {
        return Err(Error::InvalidParams(format!("start point {theta_ref:?} outside parameter box")));
    }
    let mut theta = *theta_ref;
    let mut current = loss(quotes, &theta, pricer)?;
    let loss_initial = current;
    let mut mu = cfg.mu0;
    let mut trace = Vec::new();

    for iter in 0..cfg.max_iters {
        let (agg, _) = assemble(quotes, &theta, pricer, fd)?;
        let grad_inf = agg.g.amax();
        let mut m = *mu.get_or_insert_with(|| 1e-3 * agg.h.trace() / N_PARAMS as f64);
        if grad_inf <= cfg.grad_tol {
            return Ok(finish(theta, loss_initial, current, iter, StopReason::GradTol, trace));
        }
        loop {
            let step = match gn_step(&agg, m + cfg.lambda_ridge) {
                Ok(s) => s,
                Err(Error::NotPositiveDefinite { .. }) if m < f64::MAX / cfg.mu_up => {
                    m = (m * cfg.mu_up).max(f64::MIN_POSITIVE);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let base = theta.to_array();
            let trial = cfg.param_box.clip(std::array::from_fn(|k| base[k] + step[k]));
            let step_norm = trial.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if step_norm <= cfg.step_tol {
                return Ok(finish(theta, loss_initial, current, iter, StopReason::StepTol, trace));
            }
            let trial = HestonParams::from_array(trial);
            let trial_loss = loss(quotes, &trial, pricer).unwrap_or(f64::INFINITY);
            let accepted = trial_loss < current;
            trace.push(LmTrial { iter, loss: current, trial_loss, mu: m, grad_inf, step_norm, accepted });
            if accepted {
                theta = trial;
                current = trial_loss;
                mu = Some(m * cfg.mu_down);
                break;
            }
            m *= cfg.mu_up;
        }
    }
    Ok(finish(theta, loss_initial, current, cfg.max_iters, StopReason::MaxIters, trace))
}

fn finish(
    theta_star: HestonParams,
    loss_initial: f64,
    loss_final: f64,
    iterations: usize,
    stop: StopReason,
    trace: Vec<LmTrial>,
) -> LmResult {
    LmResult { theta_star, loss_initial, loss_final, iterations, stop, trace }
}

/// JSON report written after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub theta_ref: HestonParams,
    pub theta_star: HestonParams,
    pub lm: LmConfig,
    pub stop: StopReason,
    pub iterations: usize,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub final_rmse: f64,
    pub wall_time_s: f64,
    pub trace: Vec<LmTrial>,
}

/// Runs [`lm_calibrate`] and packages the report.
pub fn calibrate_with_report(
    quotes: &[Quote],
    theta_ref: &HestonParams,
    cfg: &LmConfig,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<CalibrationReport> {
    let start = Instant::now();
    let res = lm_calibrate(quotes, theta_ref, cfg, pricer, fd)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(CalibrationReport {
        theta_ref: *theta_ref,
        theta_star: res.theta_star,
        lm: *cfg,
        stop: res.stop,
        iterations: res.iterations,
        loss_initial: res.loss_initial,
        loss_final: res.loss_final,
        final_rmse: rmse(quotes, &res.theta_star, pricer)?,
        wall_time_s,
        trace: res.trace,
    })
}
