//! Dataset generation, calibration and cache building for one run directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use heston_forget::calibration::{calibrate_with_report, CalibrationReport, LmConfig};
use heston_forget::forgetting::QuoteStore;
use heston_forget::market_sim::{
    build_quotes, dataset_hash, read_quotes_csv, shard_by_time, simulate_path, write_quotes_csv, DatasetMeta, Quote,
    RNG_ALGORITHM,
};
use heston_forget::unlearn_cache::{build_cache, load_cache, save_cache, UnlearnCache};
use heston_forget::{FdPolicy, HestonPricer};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const QUOTES_FILE: &str = "quotes.csv";
pub const META_FILE: &str = "meta.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const CACHE_FILE: &str = "cache.bin";
pub const BENCH_FILE: &str = "bench.csv";
pub const LOCALITY_FILE: &str = "locality.csv";
pub const SCALING_FILE: &str = "scaling.csv";

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub experiment: ExperimentConfig,
    pub dataset: DatasetMeta,
}

pub fn lm_config(cfg: &ExperimentConfig) -> LmConfig {
    LmConfig { lambda_ridge: cfg.lambda_ridge, ..LmConfig::default() }
}

/// Simulated, time-sharded quotes and their metadata.
pub fn simulate(cfg: &ExperimentConfig, pricer: &HestonPricer) -> Result<(Vec<Quote>, RunMeta)> {
    let path_cfg = cfg.path_config();
    let path = simulate_path(&path_cfg, &cfg.theta_true)?;
    let mut quotes = build_quotes(&path, &cfg.grid, cfg.rate, &cfg.theta_true, pricer, cfg.noise_seed())?;
    shard_by_time(&mut quotes, cfg.shard_days)?;
    let n_shards = heston_forget::market_sim::shard_ids(&quotes).len();
    let dataset = DatasetMeta {
        config_name: cfg.name.to_string(),
        path: path_cfg,
        noise_seed: cfg.noise_seed(),
        theta_true: cfg.theta_true,
        grid: cfg.grid.clone(),
        shard_days: cfg.shard_days,
        quadrature: cfg.quadrature,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        n_quotes: quotes.len(),
        n_shards,
        n_negative_prices: quotes.iter().filter(|q| q.y < 0.0).count(),
        dataset_hash: dataset_hash(&quotes),
    };
    Ok((quotes, RunMeta { experiment: cfg.clone(), dataset }))
}

pub fn calibrate(cfg: &ExperimentConfig, quotes: &[Quote], pricer: &HestonPricer) -> Result<CalibrationReport> {
    Ok(calibrate_with_report(quotes, &cfg.theta_start, &lm_config(cfg), pricer, &FdPolicy::default())?)
}

/// A calibrated dataset with its cache at `θ*`.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub meta: RunMeta,
    pub quotes: Vec<Quote>,
    pub pricer: HestonPricer,
    pub calibration: CalibrationReport,
    pub cache: UnlearnCache,
    pub store: QuoteStore,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let pricer = HestonPricer::new(cfg.quadrature)?;
    let (quotes, meta) = simulate(cfg, &pricer)?;
    let calibration = calibrate(cfg, &quotes, &pricer)?;
    log::info!(
        "{} calibration: {:?} after {} iterations, rmse {:.3e}",
        cfg.name,
        calibration.stop,
        calibration.iterations,
        calibration.final_rmse
    );
    let cache = build_cache(&quotes, &calibration.theta_star, cfg.lambda_ridge, &pricer, &FdPolicy::default())?;
    let store = QuoteStore::new(&quotes)?;
    Ok(Experiment { config: cfg.clone(), meta, quotes, pricer, calibration, cache, store })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_quotes(path: &Path, quotes: &[Quote]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_quotes_csv(quotes, BufWriter::new(f))?;
    Ok(())
}

pub fn read_quotes(path: &Path) -> Result<Vec<Quote>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_quotes_csv(BufReader::new(f))?)
}

impl Experiment {
    /// Writes quotes, metadata, calibration report and cache into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_quotes(&dir.join(QUOTES_FILE), &self.quotes)?;
        write_json(&dir.join(META_FILE), &self.meta)?;
        write_json(&dir.join(CALIBRATION_FILE), &self.calibration)?;
        save_cache(&self.cache, dir.join(CACHE_FILE))?;
        Ok(())
    }

    /// Reads a run directory written by [`Experiment::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: RunMeta = read_json(&dir.join(META_FILE))?;
        let quotes = read_quotes(&dir.join(QUOTES_FILE))?;
        let calibration: CalibrationReport = read_json(&dir.join(CALIBRATION_FILE))?;
        let cache = load_cache(dir.join(CACHE_FILE))?;
        let store = QuoteStore::new(&quotes)?;
        if store.dataset_hash() != meta.dataset.dataset_hash || cache.meta.dataset_hash != meta.dataset.dataset_hash {
            bail!("run directory {} is inconsistent: dataset hashes differ", dir.display());
        }
        let pricer = HestonPricer::new(meta.experiment.quadrature)?;
        Ok(Self { config: meta.experiment.clone(), meta, quotes, pricer, calibration, cache, store })
    }

    /// Reuses `dir` when it holds a complete run for `cfg`, otherwise runs and writes it.
    pub fn load_or_run(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let complete = [QUOTES_FILE, META_FILE, CALIBRATION_FILE, CACHE_FILE].iter().all(|f| dir.join(f).exists());
        if complete {
            match Self::load(dir) {
                Ok(exp) if exp.config == *cfg => return Ok(exp),
                Ok(_) => log::info!("{} holds a different configuration; regenerating", dir.display()),
                Err(e) => log::warn!("ignoring unreadable run in {}: {e:#}", dir.display()),
            }
        }
        let exp = run_experiment(cfg)?;
        exp.write(dir)?;
        Ok(exp)
    }
}
