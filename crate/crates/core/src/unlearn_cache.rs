//! Sufficient-statistics cache at a fixed reference `θ_ref`, and its file format.
//!
//! The cache holds per-quote `(u_i, ψ_i)`, per-shard sums and the global sum.
//! It stores no quote features or prices, so anything that only reads a cache
//! cannot touch raw data.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "HFCACHE\0"
//! version    u32
//! hdr_len    u32
//! header     hdr_len bytes of JSON (CacheMeta)
//! theta_ref  5 × f64
//! lambda     f64
//! global     u64 count, 15 × f64 (upper ψ), 5 × f64
//! n_shards   u64, then per shard: u32 id, u64 count, 15 × f64, 5 × f64
//! n_quotes   u64, then per quote: u64 id, u32 shard, 5 × f64 u, 15 × f64 ψ
//! crc32      u32 over every preceding byte
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{quote_stats, GnAggregates, QuoteStats};
use crate::error::{Error, Result};
use crate::linalg::{pack_upper, unpack_upper, Mat5, Vec5, UPPER_LEN};
use crate::market_sim::{dataset_hash, Quote};
use crate::pricing::{FdPolicy, HestonParams, HestonPricer, QuadratureConfig, N_PARAMS};

pub const CACHE_MAGIC: [u8; 8] = *b"HFCACHE\0";
pub const CACHE_VERSION: u32 = 1;

/// Provenance of a cache: which data and which numerical settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub dataset_hash: String,
    pub quadrature: QuadratureConfig,
    pub fd: FdPolicy,
    pub n_quotes: usize,
    pub n_shards: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnCache {
    pub theta_ref: HestonParams,
    pub lambda_ridge: f64,
    pub global: GnAggregates,
    pub per_shard: BTreeMap<u32, GnAggregates>,
    /// Sorted by ascending quote id.
    pub per_quote: Vec<QuoteStats>,
    pub meta: CacheMeta,
}

impl UnlearnCache {
    /// Index of `quote_id` in `per_quote`.
    pub fn position(&self, quote_id: u64) -> Option<usize> {
        // ids are usually dense, so try the direct offset before searching
        let first = self.per_quote.first()?.quote_id;
        if let Some(i) = quote_id.checked_sub(first).and_then(|d| usize::try_from(d).ok()) {
            if self.per_quote.get(i).is_some_and(|s| s.quote_id == quote_id) {
                return Some(i);
            }
        }
        self.per_quote.binary_search_by_key(&quote_id, |s| s.quote_id).ok()
    }

    pub fn stats(&self, quote_id: u64) -> Result<&QuoteStats> {
        self.position(quote_id)
            .map(|i| &self.per_quote[i])
            .ok_or(Error::UnknownQuoteId(quote_id))
    }

    pub fn quote_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.per_quote.iter().map(|s| s.quote_id)
    }

    /// Shards holding at least one of `forget_ids`.
    pub fn affected_shards(&self, forget_ids: &BTreeSet<u64>) -> Result<BTreeSet<u32>> {
        forget_ids.iter().map(|&id| self.stats(id).map(|s| s.shard_id)).collect()
    }

    /// Checks the partition and ordering invariants; returns the largest
    /// relative Frobenius gap between the global and summed per-shard `H`.
    pub fn check_consistency(&self) -> Result<f64> {
        if !self.per_quote.windows(2).all(|w| w[0].quote_id < w[1].quote_id) {
            return Err(Error::CorruptFile("per-quote stats not strictly sorted by id".into()));
        }
        let shard_sum = self.per_shard.values().fold(GnAggregates::zero(), |mut acc, a| {
            acc.add(a);
            acc
        });
        if shard_sum.n_quotes != self.per_quote.len() || self.global.n_quotes != self.per_quote.len() {
            return Err(Error::CorruptFile("quote counts disagree".into()));
        }
        let quote_sum = GnAggregates::sum(&self.per_quote);
        let rel = |a: &Mat5, b: &Mat5| {
            if b.norm() == 0.0 {
                a.norm()
            } else {
                crate::linalg::rel_frobenius(a, b)
            }
        };
        Ok(rel(&shard_sum.h, &self.global.h).max(rel(&quote_sum.h, &self.global.h)))
    }
}

/// One assembly pass at `theta_ref` over `quotes`.
pub fn build_cache(
    quotes: &[Quote],
    theta_ref: &HestonParams,
    lambda_ridge: f64,
    pricer: &HestonPricer,
    fd: &FdPolicy,
) -> Result<UnlearnCache> {
    theta_ref.validate()?;
    if !(lambda_ridge >= 0.0 && lambda_ridge.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda_ridge must be >= 0, got {lambda_ridge}")));
    }
    let per_quote = quote_stats(quotes, theta_ref, pricer, fd)?;
    if let Some(w) = per_quote.windows(2).find(|w| w[0].quote_id == w[1].quote_id) {
        return Err(Error::InvalidQuote { quote_id: w[0].quote_id, reason: "duplicate id".into() });
    }
    let mut per_shard: BTreeMap<u32, GnAggregates> = BTreeMap::new();
    for s in &per_quote {
        per_shard.entry(s.shard_id).or_default().add_stats(s);
    }
    let global = GnAggregates::sum(&per_quote);
    let meta = CacheMeta {
        dataset_hash: dataset_hash(quotes),
        quadrature: *pricer.config(),
        fd: *fd,
        n_quotes: per_quote.len(),
        n_shards: per_shard.len(),
    };
    Ok(UnlearnCache { theta_ref: *theta_ref, lambda_ridge, global, per_shard, per_quote, meta })
}

/// `H' = H − Σ_F ψ_i`, `G' = G − Σ_F u_i`, subtracting in ascending id order.
pub fn subtract_quotes(cache: &UnlearnCache, forget_ids: &BTreeSet<u64>) -> Result<GnAggregates> {
    let mut agg = cache.global.clone();
    for &id in forget_ids {
        agg.sub_stats(cache.stats(id)?);
    }
    Ok(agg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn aggregates(&mut self, a: &GnAggregates) {
        self.u64(a.n_quotes as u64);
        self.f64s(&pack_upper(&a.h));
        self.f64s(a.g.as_slice());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptFile("unexpected end of cache body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptFile("count overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = self.f64()?;
        }
        Ok(out)
    }
    fn aggregates(&mut self) -> Result<GnAggregates> {
        let n_quotes = self.count()?;
        let h = unpack_upper(&self.array::<UPPER_LEN>()?);
        let g = Vec5::from(self.array::<N_PARAMS>()?);
        Ok(GnAggregates { h, g, n_quotes })
    }
}

pub fn encode_cache(cache: &UnlearnCache) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&cache.meta)?;
    let mut w = Writer(Vec::with_capacity(64 + header.len() + cache.per_quote.len() * 172));
    w.0.extend_from_slice(&CACHE_MAGIC);
    w.u32(CACHE_VERSION);
    w.u32(u32::try_from(header.len()).map_err(|_| Error::InvalidConfig("header too large".into()))?);
    w.0.extend_from_slice(&header);
    w.f64s(&cache.theta_ref.to_array());
    w.f64s(&[cache.lambda_ridge]);
    w.aggregates(&cache.global);
    w.u64(cache.per_shard.len() as u64);
    for (&id, agg) in &cache.per_shard {
        w.u32(id);
        w.aggregates(agg);
    }
    w.u64(cache.per_quote.len() as u64);
    for s in &cache.per_quote {
        w.u64(s.quote_id);
        w.u32(s.shard_id);
        w.f64s(s.u.as_slice());
        w.f64s(&pack_upper(&s.psi));
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn decode_cache(bytes: &[u8]) -> Result<UnlearnCache> {
    if bytes.len() < CACHE_MAGIC.len() + 12 || bytes[..8] != CACHE_MAGIC {
        return Err(Error::CorruptFile("missing cache magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CACHE_VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let hdr_len = r.u32()? as usize;
    let meta: CacheMeta = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| Error::CorruptFile(format!("bad header: {e}")))?;
    let theta_ref = HestonParams::from_array(r.array()?);
    let lambda_ridge = r.f64()?;
    let global = r.aggregates()?;
    let n_shards = r.count()?;
    let mut per_shard = BTreeMap::new();
    for _ in 0..n_shards {
        let id = r.u32()?;
        per_shard.insert(id, r.aggregates()?);
    }
    let n_quotes = r.count()?;
    let mut per_quote = Vec::with_capacity(n_quotes.min(body.len() / 172));
    for _ in 0..n_quotes {
        let quote_id = r.u64()?;
        let shard_id = r.u32()?;
        let u = Vec5::from(r.array::<N_PARAMS>()?);
        let psi = unpack_upper(&r.array::<UPPER_LEN>()?);
        per_quote.push(QuoteStats { quote_id, shard_id, u, psi });
    }
    if r.pos != body.len() {
        return Err(Error::CorruptFile("trailing bytes after cache body".into()));
    }
    if meta.n_quotes != per_quote.len() || meta.n_shards != per_shard.len() {
        return Err(Error::CorruptFile("header counts disagree with body".into()));
    }
    Ok(UnlearnCache { theta_ref, lambda_ridge, global, per_shard, per_quote, meta })
}

pub fn save_cache(cache: &UnlearnCache, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cache(cache)?)?;
    Ok(())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<UnlearnCache> {
    decode_cache(&fs::read(path)?)
}
