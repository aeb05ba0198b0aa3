//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p heston-forget-bench --test acceptance`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use heston_forget::calibration::{assemble, quote_stats, GnAggregates};
use heston_forget::forgetting::{
    cache_stability, fast_refactor, relinearize_once, ForgetOutcome, ForgetRequest, Method, QuoteStore,
};
use heston_forget::linalg::{min_eigenvalue, rel_frobenius, rel_vec};
use heston_forget::market_sim::Quote;
use heston_forget::unlearn_cache::{build_cache, decode_cache, encode_cache, subtract_quotes, UnlearnCache};
use heston_forget::{FdPolicy, HestonParams, HestonPricer, QuadratureConfig, QuoteFeatures, N_PARAMS, PARAM_NAMES};
use heston_forget_bench::config::{ExperimentConfig, DEFAULT_SEED, THETA_TRUE};
use heston_forget_bench::experiment::{run_experiment, simulate, Experiment};
use heston_forget_bench::locality::{default_scenarios, max_monotonicity_drop, shard_locality_study};
use heston_forget_bench::scaling::{scaling_study, ScalingConfig};
use heston_forget_bench::sweep::{bench_sweep, random_forget_set, same_3sf, BenchConfig, BenchResult, PARAM_DIST_TOL};
use heston_forget_bench::timing::median;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

struct Ctx {
    large: Experiment,
    small: Experiment,
    bench: BenchResult,
    bench_seconds: f64,
}

type Check = (bool, String);

fn criterion_1(c: &Ctx) -> Result<Check> {
    let max_fast = c.bench.samples.iter().map(|s| s.dist_fast_retrain).fold(0.0, f64::max);
    let max_rec = c.bench.samples.iter().map(|s| s.dist_recompute_retrain).fold(0.0, f64::max);
    let all = c.bench.samples.iter().all(|s| s.dist_fast_retrain < PARAM_DIST_TOL && s.dist_recompute_retrain < PARAM_DIST_TOL);
    let pass = all && c.bench_seconds < 120.0;
    Ok((
        pass,
        format!(
            "{} repeats over {} fractions: max |fast-retrain| = {max_fast:.2e}, max |recompute-retrain| = {max_rec:.2e} (< 1e-8); sweep took {:.1} s (< 120 s)",
            c.bench.samples.len(),
            c.bench.rows.len(),
            c.bench_seconds
        ),
    ))
}

/// Two-sided exact sign test on the nonzero entries.
fn sign_test_p(xs: &[f64]) -> (usize, usize, f64) {
    let pos = xs.iter().filter(|&&x| x > 0.0).count();
    let neg = xs.iter().filter(|&&x| x < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return (0, 0, 1.0);
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    let tail = b.cdf(pos.min(neg) as u64);
    (pos, neg, (2.0 * tail).min(1.0))
}

fn criterion_2(c: &Ctx) -> Result<Check> {
    let n = c.bench.samples.len();
    ensure!(n >= 30, "only {n} runs");
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..N_PARAMS {
        let d: Vec<f64> = c.bench.samples.iter().map(|s| s.diff_fast_retrain[k]).collect();
        let med = median(&d);
        let spread = d.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        let (pos, neg, p) = sign_test_p(&d);
        pass &= med.abs() <= 1e-10 && p >= 1e-3;
        parts.push(format!("{} median {med:.1e} max {spread:.1e} +{pos}/-{neg} p={p:.2}", PARAM_NAMES[k]));
    }
    Ok((pass, format!("{n} runs; {}", parts.join("; "))))
}

fn criterion_3(c: &Ctx) -> Result<Check> {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &c.bench.rows {
        let ok = same_3sf(r.rmse_kept_fast, r.rmse_kept_retrain)
            && (4e-4..=6e-4).contains(&r.rmse_kept_fast)
            && (4e-4..=6e-4).contains(&r.rmse_kept_retrain);
        pass &= ok;
        parts.push(format!("{}: {:.3e}/{:.3e}", r.fraction, r.rmse_kept_fast, r.rmse_kept_retrain));
    }
    Ok((pass, format!("kept RMSE fast/retrain {}", parts.join(", "))))
}

fn criterion_4(c: &Ctx) -> Result<Check> {
    let rows = &c.bench.rows;
    let at_least_100 = rows.iter().filter(|r| r.fraction <= 0.25).all(|r| r.speedup >= 100.0);
    let decreasing = rows.windows(2).all(|w| w[1].speedup < w[0].speedup);
    let s: Vec<String> = rows.iter().map(|r| format!("{}: {:.0}x", r.fraction, r.speedup)).collect();
    Ok((at_least_100 && decreasing, format!("speedups {} (>= 100x, strictly decreasing: {decreasing})", s.join(", "))))
}

fn criterion_5(c: &Ctx) -> Result<Check> {
    let sc = ScalingConfig { n_repeats: 5, ..ScalingConfig::standard() };
    let res = scaling_study(&c.large.config, &sc)?;
    let s = res.slopes;
    let counters_ok = c.bench.samples.iter().all(|s| s.n_repriced_recompute == s.expected_repriced);
    let pass = (0.8..=1.2).contains(&s.retrain_vs_n)
        && (-0.2..=0.2).contains(&s.fast_vs_n)
        && (0.8..=1.2).contains(&s.fast_vs_forget)
        && counters_ok;
    Ok((
        pass,
        format!(
            "slopes retrain~N {:.3} [0.8,1.2], fast~N {:.3} [-0.2,0.2], fast~|F| {:.3} [0.8,1.2], retrain~N_u {:.3}; recompute counters exact on {} runs: {counters_ok}",
            s.retrain_vs_n,
            s.fast_vs_n,
            s.fast_vs_forget,
            s.retrain_vs_nodes,
            c.bench.samples.len()
        ),
    ))
}

/// Allowed dip in the recompute/retrain ratio between scenarios ordered by repricing count.
const LOCALITY_DIP_TOL: f64 = 0.1;

fn criterion_6(c: &Ctx) -> Result<Check> {
    let exp = &c.small;
    let n_shards = exp.store.shard_ids().count();
    ensure!(n_shards == 9, "small config has {n_shards} shards");
    let n_forget = (exp.quotes.len() as f64 * 0.05).round() as usize;
    let rows = shard_locality_study(exp, &default_scenarios(n_shards, n_forget), 9, 1)?;
    let one = rows.iter().find(|r| r.n_affected_shards == 1).context("no 1-shard row")?;
    let all = rows.iter().find(|r| r.n_affected_shards == n_shards).context("no all-shard row")?;
    let empty = rows.iter().find(|r| r.n_affected_shards == 0).context("no control row")?;
    let dip = max_monotonicity_drop(&rows);
    let pass = one.time_ratio < 0.5
        && (0.8..=1.2).contains(&all.time_ratio)
        && empty.n_repriced == 0
        && dip <= LOCALITY_DIP_TOL;
    Ok((
        pass,
        format!(
            "1/9 shards: ratio {:.3} (< 0.5), repriced {}; 9/9 shards: ratio {:.3} [0.8,1.2]; control repriced {}; largest monotonicity dip {dip:.3} (<= {LOCALITY_DIP_TOL})",
            one.time_ratio, one.n_repriced, all.time_ratio, empty.n_repriced
        ),
    ))
}

fn criterion_7(c: &Ctx) -> Result<Check> {
    let ids: Vec<u64> = c.large.cache.quote_ids().collect();
    let mut worst_slack = f64::INFINITY;
    let mut worst_weyl = f64::INFINITY;
    let mut pass = true;
    for i in 0..100u64 {
        let frac = 0.01 + 0.24 * (i as f64 / 99.0);
        let rep = cache_stability(&c.large.cache, &random_forget_set(&ids, frac, 5000 + i))?;
        pass &= rep.bound_holds() && rep.weyl_holds();
        worst_slack = worst_slack.min(rep.bound - rep.deviation);
        worst_weyl = worst_weyl.min(rep.lambda_min_hprime - rep.weyl_lower);
    }
    Ok((pass, format!("100 sets (1-25%): min bound slack {worst_slack:.3e}, min Weyl slack {worst_weyl:.3e}")))
}

fn criterion_8(c: &Ctx) -> Result<Check> {
    let cache = &c.large.cache;
    let ids: Vec<u64> = cache.quote_ids().collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, pct) in [10u32, 20, 30, 40, 50, 60, 70].into_iter().enumerate() {
        let mut worst = f64::INFINITY;
        for rep in 0..5u64 {
            let set = random_forget_set(&ids, pct as f64 / 100.0, 9000 + 100 * i as u64 + rep);
            worst = worst.min(min_eigenvalue(&subtract_quotes(cache, &set)?.h));
        }
        if pct <= 60 {
            pass &= worst > 0.0;
        }
        parts.push(format!("{pct}%: {worst:.2e}"));
    }
    Ok((pass, format!("min lambda_min(H') over 5 sets: {}", parts.join(", "))))
}

fn black_scholes_call(s: f64, k: f64, t: f64, r: f64, vol: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let sd = vol * t.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * vol * vol) * t) / sd;
    s * n.cdf(d1) - k * (-r * t).exp() * n.cdf(d1 - sd)
}

/// Discounted call payoffs per strike from a full-truncation Euler scheme.
fn monte_carlo(p: &HestonParams, t: f64, strikes: &[f64], n_paths: usize, seed: u64) -> Vec<(f64, f64)> {
    let n_steps = 96;
    let dt = t / n_steps as f64;
    let rho_c = (1.0 - p.rho * p.rho).sqrt();
    let disc = (-0.01 * t).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![(0.0, 0.0); strikes.len()];
    for _ in 0..n_paths {
        let (mut x, mut v) = (100.0_f64.ln(), p.v0);
        for _ in 0..n_steps {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let vp = v.max(0.0);
            x += (0.01 - 0.5 * vp) * dt + (vp * dt).sqrt() * (p.rho * z1 + rho_c * z2);
            v += p.kappa * (p.theta_v - vp) * dt + p.sigma_v * (vp * dt).sqrt() * z1;
        }
        for (k, &strike) in strikes.iter().enumerate() {
            let pay = disc * (x.exp() - strike).max(0.0);
            sums[k].0 += pay;
            sums[k].1 += pay * pay;
        }
    }
    let n = n_paths as f64;
    sums.iter()
        .map(|&(s, s2)| {
            let m = s / n;
            (m, ((s2 / n - m * m) * n / (n - 1.0) / n).sqrt())
        })
        .collect()
}

fn criterion_9(_: &Ctx) -> Result<Check> {
    let pricer = HestonPricer::new(QuadratureConfig::large())?;
    let mut bs_err = 0.0_f64;
    for (k, t, var) in [(90.0, 0.25, 0.04), (100.0, 0.25, 0.04), (110.0, 0.5, 0.09), (100.0, 30.0 / 252.0, 0.06)] {
        let p = HestonParams::new(2.0, var, 1e-6, 0.0, var);
        let h = pricer.price_call(&QuoteFeatures::new(100.0, k, t, 0.01), &p)?;
        bs_err = bs_err.max((h - black_scholes_call(100.0, k, t, 0.01, var.sqrt())).abs());
    }
    let strikes = [90.0, 100.0, 110.0];
    let mut max_z = 0.0_f64;
    for (i, days) in [30.0, 90.0].into_iter().enumerate() {
        let t = days / 252.0;
        for (&k, (mc, se)) in strikes.iter().zip(monte_carlo(&THETA_TRUE, t, &strikes, 200_000, 77 + i as u64)) {
            let model = pricer.price_call(&QuoteFeatures::new(100.0, k, t, 0.01), &THETA_TRUE)?;
            max_z = max_z.max(((model - mc) / se).abs());
        }
    }
    let mut refine = 0.0_f64;
    for base in [QuadratureConfig::small(), QuadratureConfig::large()] {
        let coarse = HestonPricer::new(base)?;
        let fine = HestonPricer::new(QuadratureConfig { n_sub: 2 * base.n_sub, ..base })?;
        for days in [30.0, 60.0, 90.0] {
            for k in [80.0, 90.0, 100.0, 110.0, 120.0] {
                let f = QuoteFeatures::new(100.0, k, days / 252.0, 0.01);
                refine = refine.max((coarse.price_call(&f, &THETA_TRUE)? - fine.price_call(&f, &THETA_TRUE)?).abs());
            }
        }
    }
    Ok((
        bs_err <= 1e-5 && max_z <= 3.0 && refine < 1e-8,
        format!("Black-Scholes limit err {bs_err:.2e} (<= 1e-5); MC 6 points max |z| {max_z:.2} (<= 3); n_sub doubling max change {refine:.2e} (< 1e-8)"),
    ))
}

fn criterion_10(c: &Ctx) -> Result<Check> {
    // noiseless data; the cache reference sits at distance ∝ δ from the
    // retained optimum, so the fast update Δθ' scales with δ
    let mut cfg = c.large.config.clone();
    cfg.grid.noise_sigma = 0.0;
    let pricer = HestonPricer::new(cfg.quadrature)?;
    let (quotes, _) = simulate(&cfg, &pricer)?;
    let store = QuoteStore::new(&quotes)?;
    let ids: Vec<u64> = quotes.iter().map(|q| q.quote_id).collect();
    let forget_ids = random_forget_set(&ids, 0.05, 31);
    let kept = store.retained(&forget_ids);
    let dir = [1.0, -1.0, 1.0, -1.0, 1.0];
    let base = THETA_TRUE.to_array();
    let mut pts = Vec::new();
    for delta in [0.02, 0.01, 0.005] {
        let theta_ref = HestonParams::from_array(std::array::from_fn(|k| base[k] * (1.0 + delta * dir[k])));
        let cache = build_cache(&quotes, &theta_ref, cfg.lambda_ridge, &pricer, &FdPolicy::default())?;
        let fast = fast_refactor(&cache, &ForgetRequest::new(forget_ids.clone(), Method::Fast, cfg.lambda_ridge))?;
        let r = relinearize_once(&kept, &fast.theta_new, cfg.lambda_ridge, &pricer, &FdPolicy::default())?;
        pts.push((fast.delta_theta.norm(), r.refinement));
    }
    let ratios: Vec<f64> = pts.windows(2).map(|w| w[0].1 / w[1].1).collect();
    let pass = ratios.iter().all(|r| (2.0..=6.0).contains(r));
    let desc: Vec<String> = pts.iter().map(|(d, r)| format!("|dtheta'| {d:.3e} -> refinement {r:.3e}")).collect();
    Ok((pass, format!("{}; halving ratios {:.2?} (4 +/- 50%)", desc.join(", "), ratios)))
}

/// Compile-time proof that the fast operator's inputs are the cache and the request only.
const FAST_SIGNATURE: fn(&UnlearnCache, &ForgetRequest) -> heston_forget::Result<ForgetOutcome> = fast_refactor;

fn criterion_11(c: &Ctx) -> Result<Check> {
    let exp = &c.large;
    let bytes = encode_cache(&exp.cache)?;
    let loaded = decode_cache(&bytes)?;
    let bit_exact = loaded == exp.cache && encode_cache(&loaded)? == bytes;

    let mut raw: BTreeSet<u64> = BTreeSet::new();
    for q in &exp.quotes {
        for v in [q.features.spot, q.features.strike, q.features.maturity, q.features.rate, q.y] {
            raw.insert(v.to_bits());
        }
    }
    let leaked = bytes
        .windows(8)
        .filter(|w| raw.contains(&u64::from_le_bytes((*w).try_into().expect("8 bytes"))))
        .count();

    // fast forgetting from the decoded bytes alone, checked against retrain
    let ids: Vec<u64> = loaded.quote_ids().collect();
    let probe = random_forget_set(&ids, 0.05, 404);
    let fast = FAST_SIGNATURE(&loaded, &ForgetRequest::new(probe.clone(), Method::Fast, loaded.lambda_ridge))?;
    let retrain = heston_forget::forgetting::retrain_full(
        &exp.store.retained(&probe),
        &exp.cache.theta_ref,
        exp.cache.lambda_ridge,
        &exp.pricer,
        &exp.cache.meta.fd,
    )?;
    let data_free_ok = fast.n_repriced == 0 && fast.param_distance(&retrain) < PARAM_DIST_TOL;

    // direct reassembly oracle: fresh per-quote statistics, summed over D∖F
    let fresh = quote_stats(&exp.quotes, &exp.cache.theta_ref, &exp.pricer, &exp.cache.meta.fd)?;
    let mut worst = 0.0_f64;
    let mut shortcut_ok = true;
    for i in 0..100u64 {
        let frac = [0.01, 0.05, 0.25][i as usize % 3];
        let set = random_forget_set(&ids, frac, 7000 + i);
        let down = subtract_quotes(&exp.cache, &set)?;
        let direct = GnAggregates::sum(fresh.iter().filter(|s| !set.contains(&s.quote_id)));
        if i < 3 {
            let kept: Vec<Quote> = exp.store.retained(&set);
            let (assembled, _) = assemble(&kept, &exp.cache.theta_ref, &exp.pricer, &exp.cache.meta.fd)?;
            shortcut_ok &= assembled == direct;
        }
        worst = worst.max(rel_frobenius(&down.h, &direct.h)).max(rel_vec(&down.g, &direct.g));
    }
    let pass = bit_exact && leaked == 0 && data_free_ok && shortcut_ok && worst <= 1e-12;
    Ok((
        pass,
        format!(
            "round trip bit-exact: {bit_exact} ({} bytes); raw S/K/T/r/y encodings in file: {leaked}; fast from cache alone vs retrain {:.1e}; downdate vs reassembly on 100 sets max rel {worst:.2e} (<= 1e-12)",
            bytes.len(),
            fast.param_distance(&retrain)
        ),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    println!("building fixtures (large and small experiments, benchmark sweep)...");
    let large = run_experiment(&ExperimentConfig::large(DEFAULT_SEED)).expect("large experiment");
    let small = run_experiment(&ExperimentConfig::small(DEFAULT_SEED)).expect("small experiment");
    let bench_cfg = BenchConfig { n_repeats: 6, ..BenchConfig::default() };
    let t0 = Instant::now();
    let bench = bench_sweep(&bench_cfg, &large).expect("benchmark sweep");
    let bench_seconds = t0.elapsed().as_secs_f64();
    let ctx = Ctx { large, small, bench, bench_seconds };

    let criteria: [(u32, &str, fn(&Ctx) -> Result<Check>); 11] = [
        (1, "fixed-linearization exactness", criterion_1),
        (2, "per-parameter agreement", criterion_2),
        (3, "RMSE preservation", criterion_3),
        (4, "speedup structure", criterion_4),
        (5, "complexity properties", criterion_5),
        (6, "shard locality", criterion_6),
        (7, "stability bounds", criterion_7),
        (8, "PD persistence", criterion_8),
        (9, "pricer oracles", criterion_9),
        (10, "relinearization order", criterion_10),
        (11, "cache integrity", criterion_11),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(|| check(&ctx))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!pass);
        println!("[{}] criterion {id}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of 11 criteria passed in {:.1} s", 11 - failed, start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
