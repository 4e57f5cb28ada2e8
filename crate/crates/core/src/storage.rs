//! Fixed-footprint round-robin archives.
//!
//! Each archive keeps a raw tier plus coarser consolidated tiers. On disk an
//! archive is:
//!
//! ```text
//! "ENVRRA1\0"
//! u32 tier_count
//! tier_count x { u32 step_s, u32 capacity, u8 consolidation, u32 write_index }
//! for each tier: capacity x { i64 timestamp_ms, f64 value }
//! ```
//!
//! All integers little-endian. Unused slots hold `i64::MIN` and NaN. Files
//! are rewritten whole to a temp file and renamed into place on flush.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ENVRRA1\0";
const HEADER_TIER_BYTES: usize = 4 + 4 + 1 + 4;
const SLOT_BYTES: usize = 16;
const EMPTY_TS: i64 = i64::MIN;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("sample at {ts} ms is not newer than the last sample at {newest} ms")]
    OutOfOrder { ts: i64, newest: i64 },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("invalid tier layout: {0}")]
    InvalidTiers(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("unknown series {0:?}")]
    UnknownSeries(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consolidation {
    Avg,
    Min,
    Max,
    Last,
}

impl Consolidation {
    fn code(self) -> u8 {
        match self {
            Consolidation::Avg => 0,
            Consolidation::Min => 1,
            Consolidation::Max => 2,
            Consolidation::Last => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Consolidation::Avg,
            1 => Consolidation::Min,
            2 => Consolidation::Max,
            3 => Consolidation::Last,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct TierSpec {
    pub step_s: u32,
    pub capacity: u32,
    pub consolidation: Consolidation,
}

impl TierSpec {
    pub const fn new(step_s: u32, capacity: u32, consolidation: Consolidation) -> Self {
        TierSpec { step_s, capacity, consolidation }
    }
}

/// 1 h of raw samples, 1 week of minute averages, 1 year of hourly averages.
pub fn default_tiers() -> Vec<TierSpec> {
    vec![
        TierSpec::new(1, 3600, Consolidation::Last),
        TierSpec::new(60, 10080, Consolidation::Avg),
        TierSpec::new(3600, 8760, Consolidation::Avg),
    ]
}

pub fn validate_tiers(tiers: &[TierSpec]) -> Result<(), StorageError> {
    if tiers.is_empty() {
        return Err(StorageError::InvalidTiers("at least one tier required".into()));
    }
    for (i, t) in tiers.iter().enumerate() {
        if t.step_s == 0 || t.capacity == 0 {
            return Err(StorageError::InvalidTiers(format!("tier {i} has zero step or capacity")));
        }
    }
    for (i, w) in tiers.windows(2).enumerate() {
        if w[1].step_s % w[0].step_s != 0 || w[1].step_s <= w[0].step_s {
            return Err(StorageError::InvalidTiers(format!(
                "tier {} step {} is not a larger multiple of tier {i} step {}",
                i + 1,
                w[1].step_s,
                w[0].step_s
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    window: i64,
    sum: f64,
    count: u64,
    min: f64,
    max: f64,
    last: f64,
}

impl Accumulator {
    fn start(window: i64, v: f64) -> Self {
        Accumulator { window, sum: v, count: 1, min: v, max: v, last: v }
    }

    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.last = v;
    }

    fn value(&self, c: Consolidation) -> f64 {
        match c {
            Consolidation::Avg => self.sum / self.count as f64,
            Consolidation::Min => self.min,
            Consolidation::Max => self.max,
            Consolidation::Last => self.last,
        }
    }
}

#[derive(Debug, Clone)]
struct Tier {
    spec: TierSpec,
    /// Grows up to `capacity`, then wraps.
    ring: Vec<(i64, f64)>,
    write_index: u32,
    pending: Option<Accumulator>,
    /// Last window index written to this tier.
    closed_window: Option<i64>,
}

impl Tier {
    fn new(spec: TierSpec) -> Self {
        Tier { spec, ring: Vec::new(), write_index: 0, pending: None, closed_window: None }
    }

    fn push(&mut self, ts: i64, v: f64) {
        let idx = self.write_index as usize;
        if idx < self.ring.len() {
            self.ring[idx] = (ts, v);
        } else {
            self.ring.push((ts, v));
        }
        self.write_index = (self.write_index + 1) % self.spec.capacity;
    }

    /// Retained samples, oldest first.
    fn ordered(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        let split = if self.ring.len() < self.spec.capacity as usize { 0 } else { self.write_index as usize };
        self.ring[split..].iter().chain(&self.ring[..split]).copied()
    }

    fn newest(&self) -> Option<(i64, f64)> {
        if self.ring.is_empty() {
            return None;
        }
        let cap = self.spec.capacity as usize;
        let idx = (self.write_index as usize + cap - 1) % cap;
        self.ring.get(idx).copied()
    }

    fn oldest(&self) -> Option<(i64, f64)> {
        self.ordered().next()
    }

    fn window_ms(&self) -> i64 {
        self.spec.step_s as i64 * 1000
    }
}

/// Round-robin archive for one series.
#[derive(Debug, Clone)]
pub struct Archive {
    key: String,
    tiers: Vec<Tier>,
}

impl Archive {
    pub fn new(key: impl Into<String>, tiers: &[TierSpec]) -> Result<Self, StorageError> {
        validate_tiers(tiers)?;
        Ok(Archive { key: key.into(), tiers: tiers.iter().copied().map(Tier::new).collect() })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn tier_specs(&self) -> Vec<TierSpec> {
        self.tiers.iter().map(|t| t.spec).collect()
    }

    pub fn newest(&self) -> Option<(i64, f64)> {
        self.tiers[0].newest()
    }

    pub fn append(&mut self, ts: i64, value: f64) -> Result<(), StorageError> {
        if !value.is_finite() {
            return Err(StorageError::NonFinite);
        }
        if let Some((newest, _)) = self.tiers[0].newest() {
            if ts <= newest {
                return Err(StorageError::OutOfOrder { ts, newest });
            }
        }
        let raw_step_ms = self.tiers[0].window_ms();
        self.tiers[0].push(ts, value);
        for tier in &mut self.tiers[1..] {
            consolidate(tier, ts, value, raw_step_ms);
        }
        Ok(())
    }

    /// Samples of tier `index`, oldest first.
    pub fn tier_samples(&self, index: usize) -> Vec<(i64, f64)> {
        self.tiers.get(index).map(|t| t.ordered().collect()).unwrap_or_default()
    }

    /// Samples in `[t_from, t_to]` from the finest tier that still reaches
    /// back to `t_from`, window-averaged down to at most `max_points`.
    pub fn query(&self, t_from: i64, t_to: i64, max_points: usize) -> Vec<(i64, f64)> {
        if t_from > t_to || max_points == 0 {
            return Vec::new();
        }
        let tier = self
            .tiers
            .iter()
            .find(|t| t.oldest().is_some_and(|(ts, _)| ts <= t_from))
            .or_else(|| self.tiers.iter().rev().find(|t| !t.ring.is_empty()))
            .unwrap_or(&self.tiers[0]);
        let pts: Vec<(i64, f64)> = tier.ordered().filter(|(ts, _)| (t_from..=t_to).contains(ts)).collect();
        downsample(&pts, max_points)
    }

    /// Archive size on disk; fixed by the tier layout.
    pub fn file_size(&self) -> usize {
        file_size_for(&self.tier_specs())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tiers.len() as u32).to_le_bytes());
        for t in &self.tiers {
            out.extend_from_slice(&t.spec.step_s.to_le_bytes());
            out.extend_from_slice(&t.spec.capacity.to_le_bytes());
            out.push(t.spec.consolidation.code());
            out.extend_from_slice(&t.write_index.to_le_bytes());
        }
        for t in &self.tiers {
            for i in 0..t.spec.capacity as usize {
                let (ts, v) = t.ring.get(i).copied().unwrap_or((EMPTY_TS, f64::NAN));
                out.extend_from_slice(&ts.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(key: impl Into<String>, bytes: &[u8]) -> Result<Self, StorageError> {
        let corrupt = |m: &str| StorageError::CorruptArchive(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let count = cur.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        if count == 0 || count > 64 {
            return Err(corrupt("implausible tier count"));
        }
        let mut specs = Vec::with_capacity(count);
        let mut write_idx = Vec::with_capacity(count);
        for _ in 0..count {
            let step_s = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
            let capacity = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
            let code = cur.u8().ok_or_else(|| corrupt("truncated header"))?;
            let wi = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
            let consolidation = Consolidation::from_code(code).ok_or_else(|| corrupt("bad consolidation code"))?;
            if capacity == 0 || wi >= capacity {
                return Err(corrupt("write index out of range"));
            }
            specs.push(TierSpec { step_s, capacity, consolidation });
            write_idx.push(wi);
        }
        validate_tiers(&specs).map_err(|e| StorageError::CorruptArchive(e.to_string()))?;
        if bytes.len() != file_size_for(&specs) {
            return Err(corrupt(&format!("size {} does not match layout {}", bytes.len(), file_size_for(&specs))));
        }
        let mut archive = Archive::new(key, &specs)?;
        for (tier, wi) in archive.tiers.iter_mut().zip(write_idx) {
            let cap = tier.spec.capacity as usize;
            let mut slots = Vec::with_capacity(cap);
            for _ in 0..cap {
                let ts = cur.i64().ok_or_else(|| corrupt("truncated body"))?;
                let v = cur.f64().ok_or_else(|| corrupt("truncated body"))?;
                slots.push((ts, v));
            }
            let used = slots.iter().take_while(|(ts, _)| *ts != EMPTY_TS).count();
            if slots[used..].iter().any(|(ts, _)| *ts != EMPTY_TS) {
                return Err(corrupt("hole in ring"));
            }
            if used < cap && wi as usize != used {
                return Err(corrupt("write index disagrees with fill level"));
            }
            slots.truncate(used);
            tier.ring = slots;
            tier.write_index = wi;
            let ordered: Vec<_> = tier.ordered().collect();
            if ordered.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(corrupt("timestamps not increasing"));
            }
            tier.closed_window = tier.newest().map(|(ts, _)| ts.div_euclid(tier.window_ms()));
        }
        archive.rebuild_pending();
        Ok(archive)
    }

    /// Restores partially filled consolidation windows from the raw tier.
    fn rebuild_pending(&mut self) {
        let raw: Vec<(i64, f64)> = self.tiers[0].ordered().collect();
        let raw_step_ms = self.tiers[0].window_ms();
        for tier in &mut self.tiers[1..] {
            let w_ms = tier.window_ms();
            let closed = tier.closed_window;
            let mut acc: Option<Accumulator> = None;
            for &(ts, v) in &raw {
                let w = ts.div_euclid(w_ms);
                if closed.is_some_and(|c| w <= c) {
                    continue;
                }
                match &mut acc {
                    Some(a) if a.window == w => a.add(v),
                    _ => acc = Some(Accumulator::start(w, v)),
                }
            }
            // only the newest open window can still be pending
            if let Some(a) = acc {
                let newest_raw = raw.last().map(|r| r.0).unwrap_or(EMPTY_TS);
                if newest_raw.div_euclid(w_ms) == a.window && !window_done(newest_raw, a.window, w_ms, raw_step_ms) {
                    tier.pending = Some(a);
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StorageError> {
        let tmp = path.with_extension("rra.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn open(key: impl Into<String>, path: &Path) -> Result<Self, StorageError> {
        let bytes = fs::read(path)?;
        Archive::from_bytes(key, &bytes)
    }

    pub fn to_csv(&self, t_from: i64, t_to: i64, max_points: usize) -> String {
        let mut s = String::from("timestamp_ms,value\n");
        for (ts, v) in self.query(t_from, t_to, max_points) {
            s.push_str(&format!("{ts},{v}\n"));
        }
        s
    }
}

fn window_done(ts: i64, window: i64, w_ms: i64, raw_step_ms: i64) -> bool {
    ts + raw_step_ms >= (window + 1) * w_ms
}

fn consolidate(tier: &mut Tier, ts: i64, v: f64, raw_step_ms: i64) {
    let w_ms = tier.window_ms();
    let w = ts.div_euclid(w_ms);
    if tier.closed_window.is_some_and(|c| w <= c) {
        return;
    }
    if let Some(acc) = tier.pending {
        if acc.window != w {
            let value = acc.value(tier.spec.consolidation);
            tier.push(acc.window * w_ms, value);
            tier.closed_window = Some(acc.window);
            tier.pending = None;
        }
    }
    match &mut tier.pending {
        Some(acc) => acc.add(v),
        None => tier.pending = Some(Accumulator::start(w, v)),
    }
    if window_done(ts, w, w_ms, raw_step_ms) {
        let acc = tier.pending.take().expect("just set");
        tier.push(w * w_ms, acc.value(tier.spec.consolidation));
        tier.closed_window = Some(w);
    }
}

fn downsample(pts: &[(i64, f64)], max_points: usize) -> Vec<(i64, f64)> {
    if pts.len() <= max_points {
        return pts.to_vec();
    }
    let bucket = pts.len().div_ceil(max_points);
    pts.chunks(bucket)
        .map(|c| (c[0].0, c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64))
        .collect()
}

pub fn file_size_for(tiers: &[TierSpec]) -> usize {
    MAGIC.len()
        + 4
        + tiers.len() * HEADER_TIER_BYTES
        + tiers.iter().map(|t| t.capacity as usize * SLOT_BYTES).sum::<usize>()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }
    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn i64(&mut self) -> Option<i64> {
        self.take().map(i64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
}

/// File name for a series key; `:` and `/` are not kept in names.
pub fn file_name_for(key: &str) -> String {
    let mut s: String = key
        .chars()
        .map(|c| match c {
            ':' => '~',
            '/' | '\\' => '_',
            c => c,
        })
        .collect();
    s.push_str(".rra");
    s
}

pub fn key_for_file_name(name: &str) -> Option<String> {
    name.strip_suffix(".rra").map(|s| s.replace('~', ":"))
}

/// All archives of one collector, optionally backed by a directory.
#[derive(Debug)]
pub struct Storage {
    dir: Option<PathBuf>,
    tiers: Vec<TierSpec>,
    archives: BTreeMap<String, Archive>,
    rejected: u64,
    appended: u64,
}

impl Storage {
    pub fn in_memory(tiers: Vec<TierSpec>) -> Result<Self, StorageError> {
        validate_tiers(&tiers)?;
        Ok(Storage { dir: None, tiers, archives: BTreeMap::new(), rejected: 0, appended: 0 })
    }

    /// Opens `dir`, loading any archives already there.
    pub fn open_dir(dir: impl Into<PathBuf>, tiers: Vec<TierSpec>) -> Result<Self, StorageError> {
        validate_tiers(&tiers)?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut archives = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(key) = path.file_name().and_then(|n| n.to_str()).and_then(key_for_file_name) else {
                continue;
            };
            let archive = Archive::open(key.clone(), &path)?;
            archives.insert(key, archive);
        }
        Ok(Storage { dir: Some(dir), tiers, archives, rejected: 0, appended: 0 })
    }

    pub fn append(&mut self, key: &str, ts: i64, value: f64) -> Result<(), StorageError> {
        if !self.archives.contains_key(key) {
            self.archives.insert(key.to_string(), Archive::new(key, &self.tiers)?);
        }
        let res = self.archives.get_mut(key).expect("inserted").append(ts, value);
        match res {
            Ok(()) => self.appended += 1,
            Err(_) => self.rejected += 1,
        }
        res
    }

    pub fn get(&self, key: &str) -> Option<&Archive> {
        self.archives.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.archives.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.archives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.archives.is_empty()
    }

    pub fn appended(&self) -> u64 {
        self.appended
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn query(&self, key: &str, t_from: i64, t_to: i64, max_points: usize) -> Result<Vec<(i64, f64)>, StorageError> {
        self.archives
            .get(key)
            .map(|a| a.query(t_from, t_to, max_points))
            .ok_or_else(|| StorageError::UnknownSeries(key.to_string()))
    }

    pub fn flush(&self) -> Result<(), StorageError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        for (key, archive) in &self.archives {
            archive.save(&dir.join(file_name_for(key)))?;
        }
        Ok(())
    }
}
