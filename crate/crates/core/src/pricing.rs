//! Semi-analytic Heston European call pricing.
//!
//! Prices follow `C = S·P1 − K·e^{−rT}·P2` with
//!
//! ```text
//! P_j = 1/2 + 1/π ∫ Re[ e^{−iu ln K} φ_j(u) / (iu) ] du
//! ```
//!
//! integrated by composite Simpson on `[u_floor, u_max]`. The characteristic
//! function uses the rotation-free ("little trap") arrangement, with the
//! `(β − d)/σ²` factor rewritten as `(2u_j·iu − u²)/(β + d)` and the log term
//! taken through a complex `log1p`, so the `σ_v → 0` limit does not cancel.
//!
//! Everything except the `e^{iu(ln S + rT − ln K)}` phase depends only on
//! `(θ, T)`. A [`MaturitySlice`] holds those node values, already scaled by
//! the Simpson weights, so quotes sharing a maturity share one evaluation of
//! the characteristic function. Single-quote and batch entry points go
//! through the same slice code and return bit-identical prices.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of Heston parameters.
pub const N_PARAMS: usize = 5;

/// Parameter names in vector order.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["kappa", "theta_v", "sigma_v", "rho", "v0"];

/// Heston parameter vector `(κ, θ_v, σ_v, ρ, v0)`.
///
/// The Feller condition is not enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    /// Mean-reversion speed.
    pub kappa: f64,
    /// Long-run variance.
    pub theta_v: f64,
    /// Volatility of variance.
    pub sigma_v: f64,
    /// Spot/variance shock correlation.
    pub rho: f64,
    /// Initial variance.
    pub v0: f64,
}

impl HestonParams {
    pub const fn new(kappa: f64, theta_v: f64, sigma_v: f64, rho: f64, v0: f64) -> Self {
        Self { kappa, theta_v, sigma_v, rho, v0 }
    }

    pub const fn to_array(&self) -> [f64; N_PARAMS] {
        [self.kappa, self.theta_v, self.sigma_v, self.rho, self.v0]
    }

    pub const fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_valid(&self) -> bool {
        self.kappa > 0.0
            && self.theta_v > 0.0
            && self.sigma_v > 0.0
            && self.v0 > 0.0
            && self.rho > -1.0
            && self.rho < 1.0
            && self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{self:?}")))
        }
    }

    /// `2κθ_v ≥ σ_v²`.
    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta_v >= self.sigma_v * self.sigma_v
    }

    /// Euclidean distance between two parameter vectors.
    pub fn distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Market features of one European call quote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteFeatures {
    pub spot: f64,
    pub strike: f64,
    /// Years.
    pub maturity: f64,
    /// Continuously compounded.
    pub rate: f64,
}

impl QuoteFeatures {
    pub const fn new(spot: f64, strike: f64, maturity: f64, rate: f64) -> Self {
        Self { spot, strike, maturity, rate }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.spot > 0.0
            && self.strike > 0.0
            && self.maturity > 0.0
            && self.rate.is_finite()
            && self.spot.is_finite()
            && self.strike.is_finite()
            && self.maturity.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid quote features {self:?}")))
        }
    }

    /// Discounted intrinsic value `max(S − K·e^{−rT}, 0)`.
    pub fn lower_bound(&self) -> f64 {
        (self.spot - self.strike * (-self.rate * self.maturity).exp()).max(0.0)
    }
}

/// Lower integration bound used instead of `u = 0`.
pub const DEFAULT_U_FLOOR: f64 = 1e-8;

/// Composite Simpson settings for the `P_j` integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub u_max: f64,
    /// Even number of Simpson sub-intervals.
    pub n_sub: usize,
    pub u_floor: f64,
}

impl QuadratureConfig {
    pub const fn new(u_max: f64, n_sub: usize) -> Self {
        Self { u_max, n_sub, u_floor: DEFAULT_U_FLOOR }
    }

    /// `u_max = 50`, 180 sub-intervals.
    pub const fn small() -> Self {
        Self::new(50.0, 180)
    }

    /// `u_max = 120`, 800 sub-intervals.
    pub const fn large() -> Self {
        Self::new(120.0, 800)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u_floor > 0.0 && self.u_max > self.u_floor && self.u_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "quadrature bounds must satisfy u_max > u_floor > 0, got {self:?}"
            )));
        }
        if self.n_sub < 2 || self.n_sub % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_sub must be even and >= 2, got {}",
                self.n_sub
            )));
        }
        Ok(())
    }
}

/// Which risk-neutral probability a characteristic function belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prob {
    /// Share measure (`P1`).
    P1,
    /// Money-market measure (`P2`).
    P2,
}

/// `ln(1 + w)` without losing relative precision for small `|w|`.
fn ln_1p(w: Complex64) -> Complex64 {
    let re = 0.5 * (2.0 * w.re + w.norm_sqr()).ln_1p();
    Complex64::new(re, w.im.atan2(1.0 + w.re))
}

/// `C_j(u) + D_j(u)·v0` without the `iu(ln S + rT)` drift term.
fn cf_exponent(u: f64, prob: Prob, p: &HestonParams, maturity: f64) -> Complex64 {
    let (u_j, b_j) = match prob {
        Prob::P1 => (0.5, p.kappa - p.rho * p.sigma_v),
        Prob::P2 => (-0.5, p.kappa),
    };
    let one = Complex64::new(1.0, 0.0);
    let s2 = p.sigma_v * p.sigma_v;

    let beta = Complex64::new(b_j, -p.rho * p.sigma_v * u);
    // 2·u_j·iu − u²
    let a = Complex64::new(-u * u, 2.0 * u_j * u);
    let d = (beta * beta - a * s2).sqrt();
    let beta_plus_d = beta + d;
    // (β − d)/σ², computed without the cancellation in β − d
    let q = a / beta_plus_d;
    let g = q * s2 / beta_plus_d;
    let e = (-d * maturity).exp();

    let big_d = q * (one - e) / (one - g * e);
    let w = g * (one - e) / (one - g);
    let big_c = (q * maturity - ln_1p(w) * (2.0 / s2)) * (p.kappa * p.theta_v);
    big_c + big_d * p.v0
}

/// Characteristic function `φ_j(u)` of `ln S_T`.
pub fn char_fn(u: f64, prob: Prob, params: &HestonParams, features: &QuoteFeatures) -> Complex64 {
    let drift = features.spot.ln() + features.rate * features.maturity;
    (cf_exponent(u, prob, params, features.maturity) + Complex64::new(0.0, u * drift)).exp()
}

/// Step policy for central finite-difference Jacobians.
///
/// `h_k = max(rel_step·|θ_k|, abs_step)`, halved while either bump leaves
/// the valid parameter region, failing below `min_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdPolicy {
    pub rel_step: f64,
    pub abs_step: f64,
    pub min_step: f64,
}

impl Default for FdPolicy {
    fn default() -> Self {
        Self { rel_step: 1e-5, abs_step: 1e-7, min_step: 1e-9 }
    }
}

impl FdPolicy {
    pub fn steps(&self, params: &HestonParams) -> Result<[f64; N_PARAMS]> {
        params.validate()?;
        let base = params.to_array();
        let mut steps = [0.0; N_PARAMS];
        for (k, step) in steps.iter_mut().enumerate() {
            let mut h = (self.rel_step * base[k].abs()).max(self.abs_step);
            loop {
                let (plus, minus) = bumped(&base, k, h);
                if plus.is_valid() && minus.is_valid() {
                    break;
                }
                h *= 0.5;
                if h < self.min_step {
                    return Err(Error::StepUnderflow { index: k, step: h });
                }
            }
            *step = h;
        }
        Ok(steps)
    }
}

fn bumped(base: &[f64; N_PARAMS], k: usize, h: f64) -> (HestonParams, HestonParams) {
    let mut plus = *base;
    let mut minus = *base;
    plus[k] += h;
    minus[k] -= h;
    (HestonParams::from_array(plus), HestonParams::from_array(minus))
}

/// Characteristic-function values for one `(θ, T)` pair, pre-multiplied by
/// the Simpson weights and `1/(π u)`.
#[derive(Debug, Clone)]
pub struct MaturitySlice {
    maturity: f64,
    p1: Vec<Complex64>,
    p2: Vec<Complex64>,
}

impl MaturitySlice {
    pub fn maturity(&self) -> f64 {
        self.maturity
    }
}

/// Model price and its parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceSens {
    pub price: f64,
    pub grad: [f64; N_PARAMS],
}

/// Heston call pricer with quadrature nodes and weights fixed at construction.
#[derive(Debug, Clone)]
pub struct HestonPricer {
    cfg: QuadratureConfig,
    nodes: Vec<f64>,
    // Simpson weight / (π·u_k)
    scaled_weights: Vec<f64>,
}

impl HestonPricer {
    pub fn new(cfg: QuadratureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_sub;
        let h = (cfg.u_max - cfg.u_floor) / n as f64;
        let mut nodes = Vec::with_capacity(n + 1);
        let mut scaled_weights = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let u = if k == n { cfg.u_max } else { cfg.u_floor + h * k as f64 };
            let simpson = match k {
                0 => 1.0,
                _ if k == n => 1.0,
                _ if k % 2 == 1 => 4.0,
                _ => 2.0,
            };
            nodes.push(u);
            scaled_weights.push(simpson * h / 3.0 / (PI * u));
        }
        Ok(Self { cfg, nodes, scaled_weights })
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.cfg
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn slice(&self, params: &HestonParams, maturity: f64) -> Result<MaturitySlice> {
        params.validate()?;
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(Error::InvalidConfig(format!("maturity must be positive, got {maturity}")));
        }
        let mut p1 = Vec::with_capacity(self.nodes.len());
        let mut p2 = Vec::with_capacity(self.nodes.len());
        for (&u, &w) in self.nodes.iter().zip(&self.scaled_weights) {
            let a1 = cf_exponent(u, Prob::P1, params, maturity).exp() * w;
            let a2 = cf_exponent(u, Prob::P2, params, maturity).exp() * w;
            if !(a1.re.is_finite() && a1.im.is_finite() && a2.re.is_finite() && a2.im.is_finite()) {
                return Err(Error::NonFiniteIntegrand { u });
            }
            p1.push(a1);
            p2.push(a2);
        }
        Ok(MaturitySlice { maturity, p1, p2 })
    }

    /// Price a quote whose maturity matches `slice`.
    pub fn price_with_slice(&self, slice: &MaturitySlice, f: &QuoteFeatures) -> f64 {
        debug_assert_eq!(slice.maturity.to_bits(), f.maturity.to_bits());
        let m = f.spot.ln() + f.rate * f.maturity - f.strike.ln();
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for ((&u, a1), a2) in self.nodes.iter().zip(&slice.p1).zip(&slice.p2) {
            let (sin, cos) = (u * m).sin_cos();
            s1 += a1.re * sin + a1.im * cos;
            s2 += a2.re * sin + a2.im * cos;
        }
        let p1 = 0.5 + s1;
        let p2 = 0.5 + s2;
        f.spot * p1 - f.strike * (-f.rate * f.maturity).exp() * p2
    }

    /// `P1` and `P2` for one quote.
    pub fn probabilities(&self, f: &QuoteFeatures, params: &HestonParams) -> Result<(f64, f64)> {
        f.validate()?;
        let slice = self.slice(params, f.maturity)?;
        let m = f.spot.ln() + f.rate * f.maturity - f.strike.ln();
        let (mut s1, mut s2) = (0.0, 0.0);
        for ((&u, a1), a2) in self.nodes.iter().zip(&slice.p1).zip(&slice.p2) {
            let (sin, cos) = (u * m).sin_cos();
            s1 += a1.re * sin + a1.im * cos;
            s2 += a2.re * sin + a2.im * cos;
        }
        Ok((0.5 + s1, 0.5 + s2))
    }

    pub fn price_call(&self, f: &QuoteFeatures, params: &HestonParams) -> Result<f64> {
        f.validate()?;
        let slice = self.slice(params, f.maturity)?;
        finite_price(self.price_with_slice(&slice, f))
    }

    /// Prices for many quotes; quotes with the same maturity share one slice.
    pub fn price_many(&self, features: &[QuoteFeatures], params: &HestonParams) -> Result<Vec<f64>> {
        features.iter().try_for_each(QuoteFeatures::validate)?;
        let slices = self.slice_table(std::slice::from_ref(params), features)?;
        features
            .par_iter()
            .map(|f| finite_price(self.price_with_slice(slices.get(0, f.maturity), f)))
            .collect()
    }

    /// Central-difference gradient of the price with respect to θ.
    pub fn price_jacobian(
        &self,
        f: &QuoteFeatures,
        params: &HestonParams,
        fd: &FdPolicy,
    ) -> Result<[f64; N_PARAMS]> {
        Ok(self.price_and_jacobian_many(std::slice::from_ref(f), params, fd)?[0].grad)
    }

    /// Prices and central-difference gradients for many quotes.
    pub fn price_and_jacobian_many(
        &self,
        features: &[QuoteFeatures],
        params: &HestonParams,
        fd: &FdPolicy,
    ) -> Result<Vec<PriceSens>> {
        features.iter().try_for_each(QuoteFeatures::validate)?;
        let steps = fd.steps(params)?;
        let base = params.to_array();
        // variant 0 is θ itself, then (θ + h_k e_k, θ − h_k e_k) for each k
        let mut variants = vec![*params];
        for (k, &h) in steps.iter().enumerate() {
            let (plus, minus) = bumped(&base, k, h);
            variants.push(plus);
            variants.push(minus);
        }
        let slices = self.slice_table(&variants, features)?;
        features
            .par_iter()
            .map(|f| {
                let price = finite_price(self.price_with_slice(slices.get(0, f.maturity), f))?;
                let mut grad = [0.0; N_PARAMS];
                for (k, g) in grad.iter_mut().enumerate() {
                    let up = self.price_with_slice(slices.get(1 + 2 * k, f.maturity), f);
                    let down = self.price_with_slice(slices.get(2 + 2 * k, f.maturity), f);
                    *g = finite_price(up - down)? / (2.0 * steps[k]);
                }
                Ok(PriceSens { price, grad })
            })
            .collect()
    }

    fn slice_table(&self, variants: &[HestonParams], features: &[QuoteFeatures]) -> Result<SliceTable> {
        let maturities: BTreeMap<u64, f64> =
            features.iter().map(|f| (f.maturity.to_bits(), f.maturity)).collect();
        let jobs: Vec<(usize, f64)> = (0..variants.len())
            .flat_map(|v| maturities.values().map(move |&t| (v, t)))
            .collect();
        let built = jobs
            .par_iter()
            .map(|&(v, t)| self.slice(&variants[v], t))
            .collect::<Result<Vec<_>>>()?;
        let mut table = vec![BTreeMap::new(); variants.len()];
        for ((v, t), slice) in jobs.into_iter().zip(built) {
            table[v].insert(t.to_bits(), slice);
        }
        Ok(SliceTable(table))
    }
}

struct SliceTable(Vec<BTreeMap<u64, MaturitySlice>>);

impl SliceTable {
    fn get(&self, variant: usize, maturity: f64) -> &MaturitySlice {
        &self.0[variant][&maturity.to_bits()]
    }
}

fn finite_price(p: f64) -> Result<f64> {
    if p.is_finite() {
        Ok(p)
    } else {
        Err(Error::NonFiniteIntegrand { u: f64::NAN })
    }
}

/// Convenience wrapper building a pricer for a single evaluation.
pub fn price_call(f: &QuoteFeatures, params: &HestonParams, quad: &QuadratureConfig) -> Result<f64> {
    HestonPricer::new(*quad)?.price_call(f, params)
}
