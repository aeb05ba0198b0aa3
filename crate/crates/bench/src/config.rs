//! Experiment presets.

use std::fmt;
use std::str::FromStr;

use heston_forget::market_sim::{GridConfig, PathConfig, TRADING_DAYS_PER_YEAR};
use heston_forget::{Error, HestonParams, QuadratureConfig};
use serde::{Deserialize, Serialize};

pub const THETA_TRUE: HestonParams = HestonParams::new(2.0, 0.06, 0.30, -0.6, 0.06);
/// Start point of the calibration loop.
pub const THETA_START: HestonParams = HestonParams::new(1.0, 0.04, 0.20, -0.3, 0.04);
pub const RATE: f64 = 0.01;
pub const S0: f64 = 100.0;
pub const LAMBDA_RIDGE: f64 = 1e-6;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigName {
    Small,
    Large,
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfigName::Small => "small",
            ConfigName::Large => "large",
        })
    }
}

impl FromStr for ConfigName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "small" => Ok(ConfigName::Small),
            "large" => Ok(ConfigName::Large),
            other => Err(Error::InvalidConfig(format!("unknown config {other:?} (expected small or large)"))),
        }
    }
}

/// Everything needed to regenerate a dataset and its calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: ConfigName,
    pub days: usize,
    pub shard_days: u32,
    pub grid: GridConfig,
    pub quadrature: QuadratureConfig,
    pub theta_true: HestonParams,
    pub theta_start: HestonParams,
    pub rate: f64,
    pub s0: f64,
    pub lambda_ridge: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    /// 90 days, 10-day shards, 6 quotes a day, noise 1e-3.
    pub fn small(seed: u64) -> Self {
        Self {
            name: ConfigName::Small,
            days: 90,
            shard_days: 10,
            grid: GridConfig { maturities_days: vec![30, 60], strikes: vec![90.0, 100.0, 110.0], noise_sigma: 1e-3 },
            quadrature: QuadratureConfig::small(),
            theta_true: THETA_TRUE,
            theta_start: THETA_START,
            rate: RATE,
            s0: S0,
            lambda_ridge: LAMBDA_RIDGE,
            seed,
        }
    }

    /// 180 days, 30-day shards, 15 quotes a day, noise 5e-4.
    pub fn large(seed: u64) -> Self {
        Self {
            name: ConfigName::Large,
            days: 180,
            shard_days: 30,
            grid: GridConfig {
                maturities_days: vec![30, 60, 90],
                strikes: vec![80.0, 90.0, 100.0, 110.0, 120.0],
                noise_sigma: 5e-4,
            },
            quadrature: QuadratureConfig::large(),
            ..Self::small(seed)
        }
    }

    pub fn preset(name: ConfigName, seed: u64) -> Self {
        match name {
            ConfigName::Small => Self::small(seed),
            ConfigName::Large => Self::large(seed),
        }
    }

    pub fn path_config(&self) -> PathConfig {
        PathConfig { days: self.days, dt: 1.0 / TRADING_DAYS_PER_YEAR, s0: self.s0, rate: self.rate, seed: self.seed }
    }

    /// Observation noise uses its own stream, derived from the path seed.
    pub fn noise_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    pub fn n_quotes(&self) -> usize {
        self.days * self.grid.quotes_per_day()
    }

    pub fn n_shards(&self) -> usize {
        self.days.div_ceil(self.shard_days as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_sizes() {
        let s = ExperimentConfig::small(1);
        assert_eq!((s.n_quotes(), s.n_shards()), (540, 9));
        let l = ExperimentConfig::large(1);
        assert_eq!((l.n_quotes(), l.n_shards()), (2700, 6));
        assert_eq!(l.quadrature, QuadratureConfig::new(120.0, 800));
        assert_eq!(s.quadrature, QuadratureConfig::new(50.0, 180));
    }

    #[test]
    fn names_parse() {
        assert_eq!("large".parse::<ConfigName>().unwrap(), ConfigName::Large);
        assert_eq!(ConfigName::Small.to_string(), "small");
        assert!("medium".parse::<ConfigName>().is_err());
    }
}
