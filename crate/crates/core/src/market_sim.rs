//! Synthetic Heston market: spot/variance paths, daily quote grids with
//! additive Gaussian price noise, and contiguous time shards.
//!
//! Randomness comes from ChaCha20 streams seeded with a 64-bit seed, with
//! normals drawn by `rand_distr`'s ziggurat `StandardNormal`; the pair
//! (path seed, noise seed) fixes a dataset byte-for-byte.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pricing::{HestonParams, HestonPricer, QuadratureConfig, QuoteFeatures};

/// Name recorded in dataset metadata for the generator in use.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng(seed_from_u64) + rand_distr::StandardNormal (ziggurat)";

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub days: usize,
    pub dt: f64,
    pub s0: f64,
    pub rate: f64,
    pub seed: u64,
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days >= 1 && self.dt > 0.0 && self.s0 > 0.0 && self.rate.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid path config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub spot: f64,
    pub variance: f64,
}

/// Pairs of standard normals `(Z_v, Z_S)` with `corr(Z_v, Z_S) = ρ`,
/// built as `Z_S = ρ·Z_v + √(1−ρ²)·Z⊥`.
pub struct CorrelatedNormals {
    rng: ChaCha20Rng,
    rho: f64,
    rho_perp: f64,
}

impl CorrelatedNormals {
    pub fn new(seed: u64, rho: f64) -> Self {
        Self { rng: ChaCha20Rng::seed_from_u64(seed), rho, rho_perp: (1.0 - rho * rho).sqrt() }
    }

    pub fn next_pair(&mut self) -> (f64, f64) {
        let z_v: f64 = self.rng.sample(StandardNormal);
        let z_perp: f64 = self.rng.sample(StandardNormal);
        (z_v, self.rho * z_v + self.rho_perp * z_perp)
    }
}

/// Euler–Maruyama path with full truncation of the variance.
///
/// ```text
/// v⁺      = max(v_t, 0)
/// v_{t+1} = v_t + κ(θ_v − v⁺)dt + σ_v √v⁺ √dt Z_v
/// ln S_{t+1} = ln S_t + (r − v⁺/2)dt + √v⁺ √dt Z_S
/// ```
///
/// The spot is stepped in logs so it stays positive. Reported variances are
/// the truncated `v⁺`. Returns `days + 1` points starting at `(s0, v0)`.
pub fn simulate_path(cfg: &PathConfig, params: &HestonParams) -> Result<Vec<PathPoint>> {
    cfg.validate()?;
    params.validate()?;
    let mut shocks = CorrelatedNormals::new(cfg.seed, params.rho);
    let sqrt_dt = cfg.dt.sqrt();
    let mut path = Vec::with_capacity(cfg.days + 1);
    let mut log_s = cfg.s0.ln();
    let mut v = params.v0;
    path.push(PathPoint { spot: cfg.s0, variance: v });
    for _ in 0..cfg.days {
        let (z_v, z_s) = shocks.next_pair();
        let v_pos = v.max(0.0);
        let vol = v_pos.sqrt();
        log_s += (cfg.rate - 0.5 * v_pos) * cfg.dt + vol * sqrt_dt * z_s;
        v = v + params.kappa * (params.theta_v - v_pos) * cfg.dt + params.sigma_v * vol * sqrt_dt * z_v;
        path.push(PathPoint { spot: log_s.exp(), variance: v.max(0.0) });
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Maturities in trading days, converted with `/252`.
    pub maturities_days: Vec<u32>,
    /// Absolute strike levels.
    pub strikes: Vec<f64>,
    /// Standard deviation of the additive price noise.
    pub noise_sigma: f64,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.maturities_days.is_empty()
            && self.maturities_days.iter().all(|&d| d > 0)
            && !self.strikes.is_empty()
            && self.strikes.iter().all(|&k| k > 0.0 && k.is_finite())
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid grid config {self:?}")))
        }
    }

    pub fn quotes_per_day(&self) -> usize {
        self.maturities_days.len() * self.strikes.len()
    }
}

/// One observed option price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub quote_id: u64,
    pub day_index: u32,
    pub features: QuoteFeatures,
    /// Observed price; may be negative for deep out-of-the-money quotes
    /// because the noise is additive.
    pub y: f64,
    pub shard_id: u32,
    pub weight: f64,
}

/// One quote per `(day, maturity, strike)`, ids assigned in that
/// lexicographic order. Day `d` uses the spot `path[d]` for
/// `d = 0..path.len()−1`, so a `days`-step path yields `days` quote days.
/// All quotes start in shard 0 with weight 1.
pub fn build_quotes(
    path: &[PathPoint],
    grid: &GridConfig,
    rate: f64,
    params_true: &HestonParams,
    pricer: &HestonPricer,
    noise_seed: u64,
) -> Result<Vec<Quote>> {
    grid.validate()?;
    if path.len() < 2 {
        return Err(Error::InvalidConfig("path must contain at least one step".into()));
    }
    let mut features = Vec::with_capacity((path.len() - 1) * grid.quotes_per_day());
    let mut days = Vec::with_capacity(features.capacity());
    for (day, point) in path[..path.len() - 1].iter().enumerate() {
        for &m in &grid.maturities_days {
            for &k in &grid.strikes {
                features.push(QuoteFeatures::new(point.spot, k, m as f64 / TRADING_DAYS_PER_YEAR, rate));
                days.push(day as u32);
            }
        }
    }
    let prices = pricer.price_many(&features, params_true)?;
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    let quotes = features
        .into_iter()
        .zip(days)
        .zip(prices)
        .enumerate()
        .map(|(i, ((features, day_index), price))| {
            let z: f64 = rng.sample(StandardNormal);
            Quote {
                quote_id: i as u64,
                day_index,
                features,
                y: price + grid.noise_sigma * z,
                shard_id: 0,
                weight: 1.0,
            }
        })
        .collect();
    Ok(quotes)
}

/// `shard_id = day_index / shard_days`.
pub fn shard_by_time(quotes: &mut [Quote], shard_days: u32) -> Result<()> {
    if shard_days == 0 {
        return Err(Error::InvalidConfig("shard_days must be >= 1".into()));
    }
    for q in quotes.iter_mut() {
        q.shard_id = q.day_index / shard_days;
    }
    Ok(())
}

pub fn shard_ids(quotes: &[Quote]) -> BTreeSet<u32> {
    quotes.iter().map(|q| q.shard_id).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    quote_id: u64,
    day_index: u32,
    shard_id: u32,
    #[serde(rename = "S")]
    spot: f64,
    #[serde(rename = "K")]
    strike: f64,
    #[serde(rename = "T_years")]
    maturity: f64,
    r: f64,
    y: f64,
    weight: f64,
}

/// Writes `quote_id,day_index,shard_id,S,K,T_years,r,y,weight`, sorted by
/// quote id, with shortest round-trip float formatting.
pub fn write_quotes_csv<W: Write>(quotes: &[Quote], out: W) -> Result<()> {
    let mut sorted: Vec<&Quote> = quotes.iter().collect();
    sorted.sort_by_key(|q| q.quote_id);
    let mut w = csv::Writer::from_writer(out);
    for q in sorted {
        w.serialize(CsvRow {
            quote_id: q.quote_id,
            day_index: q.day_index,
            shard_id: q.shard_id,
            spot: q.features.spot,
            strike: q.features.strike,
            maturity: q.features.maturity,
            r: q.features.rate,
            y: q.y,
            weight: q.weight,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_quotes_csv<R: Read>(input: R) -> Result<Vec<Quote>> {
    let mut r = csv::Reader::from_reader(input);
    let mut quotes = Vec::new();
    let mut seen = BTreeSet::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        let q = Quote {
            quote_id: row.quote_id,
            day_index: row.day_index,
            features: QuoteFeatures::new(row.spot, row.strike, row.maturity, row.r),
            y: row.y,
            shard_id: row.shard_id,
            weight: row.weight,
        };
        validate_quote(&q)?;
        if !seen.insert(q.quote_id) {
            return Err(Error::InvalidQuote { quote_id: q.quote_id, reason: "duplicate id".into() });
        }
        quotes.push(q);
    }
    Ok(quotes)
}

pub fn validate_quote(q: &Quote) -> Result<()> {
    q.features
        .validate()
        .map_err(|e| Error::InvalidQuote { quote_id: q.quote_id, reason: e.to_string() })?;
    if !q.y.is_finite() {
        return Err(Error::InvalidQuote { quote_id: q.quote_id, reason: "non-finite price".into() });
    }
    if !(q.weight >= 0.0 && q.weight.is_finite()) {
        return Err(Error::InvalidQuote { quote_id: q.quote_id, reason: "weight must be >= 0".into() });
    }
    Ok(())
}

pub fn quotes_csv_bytes(quotes: &[Quote]) -> Vec<u8> {
    let mut buf = Vec::new();
    // writing to a Vec cannot fail
    write_quotes_csv(quotes, &mut buf).expect("in-memory CSV write");
    buf
}

/// SHA-256 (hex) of the canonical quote CSV.
pub fn dataset_hash(quotes: &[Quote]) -> String {
    hex::encode(Sha256::digest(quotes_csv_bytes(quotes)))
}

/// JSON sidecar describing how a quote dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_name: String,
    pub path: PathConfig,
    pub noise_seed: u64,
    pub theta_true: HestonParams,
    pub grid: GridConfig,
    pub shard_days: u32,
    pub quadrature: QuadratureConfig,
    pub rng_algorithm: String,
    pub n_quotes: usize,
    pub n_shards: usize,
    pub n_negative_prices: usize,
    pub dataset_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    const THETA_TRUE: HestonParams = HestonParams::new(2.0, 0.06, 0.30, -0.6, 0.06);

    fn path_cfg(days: usize, seed: u64) -> PathConfig {
        PathConfig { days, dt: 1.0 / 252.0, s0: 100.0, rate: 0.01, seed }
    }

    fn small_grid(noise: f64) -> GridConfig {
        GridConfig { maturities_days: vec![30, 60], strikes: vec![90.0, 100.0, 110.0], noise_sigma: noise }
    }

    #[test]
    fn zero_diffusion_follows_deterministic_recursion() {
        let p = HestonParams::new(2.0, 0.06, 1e-300, -0.6, 0.04);
        let cfg = path_cfg(250, 3);
        let path = simulate_path(&cfg, &p).unwrap();
        let mut v: f64 = 0.04;
        for pt in &path {
            assert_eq!(pt.variance.to_bits(), v.to_bits());
            v = v + 2.0 * (0.06 - v) * cfg.dt;
        }
    }

    #[test]
    fn equal_seeds_give_identical_paths() {
        let a = simulate_path(&path_cfg(90, 42), &THETA_TRUE).unwrap();
        let b = simulate_path(&path_cfg(90, 42), &THETA_TRUE).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&path_cfg(90, 43), &THETA_TRUE).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 91);
        assert!(a.iter().all(|p| p.spot > 0.0 && p.variance >= 0.0));
    }

    #[test]
    fn shock_correlation_matches_rho() {
        let mut z = CorrelatedNormals::new(7, -0.6);
        let n = 100_000;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (a, b) = z.next_pair();
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        let n = n as f64;
        let cov = sxy / n - sx / n * sy / n;
        let corr = cov / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
        assert!((corr + 0.6).abs() < 0.02, "corr {corr}");
    }

    #[test]
    fn quote_counts_and_ordering() {
        let pricer = HestonPricer::new(QuadratureConfig::small()).unwrap();
        let path = simulate_path(&path_cfg(90, 1), &THETA_TRUE).unwrap();
        let quotes = build_quotes(&path, &small_grid(1e-3), 0.01, &THETA_TRUE, &pricer, 2).unwrap();
        assert_eq!(quotes.len(), 540);
        for (i, q) in quotes.iter().enumerate() {
            assert_eq!(q.quote_id, i as u64);
            assert_eq!(q.day_index as usize, i / 6);
        }
        assert_eq!(quotes[7].features.strike, 100.0);
        assert_eq!(quotes[7].features.maturity, 30.0 / 252.0);
        assert_eq!(quotes[10].features.maturity, 60.0 / 252.0);
    }

    #[test]
    fn noiseless_quotes_equal_model_prices() {
        let pricer = HestonPricer::new(QuadratureConfig::small()).unwrap();
        let path = simulate_path(&path_cfg(5, 1), &THETA_TRUE).unwrap();
        let quotes = build_quotes(&path, &small_grid(0.0), 0.01, &THETA_TRUE, &pricer, 2).unwrap();
        for q in &quotes {
            let m = pricer.price_call(&q.features, &THETA_TRUE).unwrap();
            assert!((q.y - m).abs() <= 1e-6);
        }
    }

    #[test]
    fn time_shards() {
        let pricer = HestonPricer::new(QuadratureConfig::small()).unwrap();
        let path = simulate_path(&path_cfg(90, 1), &THETA_TRUE).unwrap();
        let mut quotes = build_quotes(&path, &small_grid(1e-3), 0.01, &THETA_TRUE, &pricer, 2).unwrap();
        shard_by_time(&mut quotes, 10).unwrap();
        let ids = shard_ids(&quotes);
        assert_eq!(ids, (0..9).collect());
        for k in ids {
            let days: BTreeSet<u32> = quotes.iter().filter(|q| q.shard_id == k).map(|q| q.day_index).collect();
            assert_eq!(days, (10 * k..10 * k + 10).collect());
        }
        assert!(shard_by_time(&mut quotes, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let pricer = HestonPricer::new(QuadratureConfig::small()).unwrap();
        let path = simulate_path(&path_cfg(4, 9), &THETA_TRUE).unwrap();
        let mut quotes = build_quotes(&path, &small_grid(1e-3), 0.01, &THETA_TRUE, &pricer, 5).unwrap();
        shard_by_time(&mut quotes, 2).unwrap();
        let bytes = quotes_csv_bytes(&quotes);
        let header = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap();
        assert_eq!(header, "quote_id,day_index,shard_id,S,K,T_years,r,y,weight");
        let back = read_quotes_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, quotes);
        assert_eq!(quotes_csv_bytes(&back), bytes);
        assert_eq!(dataset_hash(&back), dataset_hash(&quotes));
    }

    #[test]
    fn csv_rejects_duplicate_ids() {
        let text = "quote_id,day_index,shard_id,S,K,T_years,r,y,weight\n\
                    0,0,0,100,100,0.1,0.01,1.5,1\n0,0,0,100,90,0.1,0.01,1.5,1\n";
        assert!(matches!(read_quotes_csv(text.as_bytes()), Err(Error::InvalidQuote { .. })));
    }
}
