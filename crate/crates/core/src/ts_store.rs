//! Month-partitioned time-series store.
//!
//! Each partition is one row per `(point, month)` and addresses its cells by
//! an in-month count: `count = floor(seconds_since_month_start / base_resolution)`.
//! Month boundaries are taken on the UTC clock. Timestamps are reconstructed
//! from `(month, count, base_resolution)` on read, so sub-resolution detail is
//! truncated.
//!
//! Partitions are kept behind `Arc`s so that [`TsStore::snapshot`] is O(1) and
//! later writes copy on write instead of disturbing readers.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::point_model::{parse_system_name, PointName};

pub const DEFAULT_BASE_RESOLUTION: u32 = 5;
pub const DEFAULT_CELL_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("partition {point} {month} is full ({cap} cells)")]
    CapExceeded {
        point: String,
        month: YearMonth,
        cap: usize,
    },
    #[error("refusing to store non-finite value {0}")]
    NonFinite(f64),
    #[error("store log {path}:{line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of<Tz: TimeZone>(ts: &DateTime<Tz>) -> Self {
        let utc = ts.with_timezone(&Utc);
        Self {
            year: utc.year(),
            month: utc.month(),
        }
    }

    pub fn start(&self) -> DateTime<Utc> {
        NaiveDate::from_ymd_opt(self.year, self.month, 1)
            .expect("valid year-month")
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc()
    }

    pub fn next(&self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn seconds(&self) -> i64 {
        (self.next().start() - self.start()).num_seconds()
    }
}

impl std::fmt::Display for YearMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Partition and in-month count for a timestamp.
pub fn count_for<Tz: TimeZone>(ts: &DateTime<Tz>, base_resolution: u32) -> (YearMonth, u32) {
    let month = YearMonth::of(ts);
    let since = ts.with_timezone(&Utc).timestamp() - month.start().timestamp();
    (month, (since / i64::from(base_resolution)) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionKey {
    pub point: PointName,
    pub month: YearMonth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub at: DateTime<Utc>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPartition {
    key: PartitionKey,
    base_resolution: u32,
    cells: BTreeMap<u32, f64>,
}

impl SeriesPartition {
    pub fn key(&self) -> &PartitionKey {
        &self.key
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.cells.iter().map(|(c, v)| (*c, *v))
    }

    pub fn timestamp_of(&self, count: u32) -> DateTime<Utc> {
        self.key.month.start() + chrono::Duration::seconds(i64::from(count) * i64::from(self.base_resolution))
    }

    fn samples_in(&self, lo: u32, hi: u32) -> impl Iterator<Item = Sample> + '_ {
        self.cells.range(lo..hi).map(|(c, v)| Sample {
            at: self.timestamp_of(*c),
            value: *v,
        })
    }

    fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.samples_in(0, u32::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    pub base_resolution: u32,
    pub cell_cap: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            base_resolution: DEFAULT_BASE_RESOLUTION,
            cell_cap: DEFAULT_CELL_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Overwrote,
}

type PartitionMap = BTreeMap<PartitionKey, Arc<SeriesPartition>>;

/// Single-writer store; readers take [`StoreSnapshot`]s.
#[derive(Debug)]
pub struct TsStore {
    config: StoreConfig,
    partitions: Arc<PartitionMap>,
    cells: usize,
    overwrites: u64,
    log: Option<(PathBuf, BufWriter<File>)>,
}

impl TsStore {
    pub fn new(config: StoreConfig) -> Self {
        assert!(config.base_resolution > 0, "base resolution must be positive");
        Self {
            config,
            partitions: Arc::new(BTreeMap::new()),
            cells: 0,
            overwrites: 0,
            log: None,
        }
    }

    /// Opens (or creates) a log-backed store, replaying existing puts.
    pub fn open(path: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::new(config);
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let corrupt = |reason: &str| StoreError::CorruptLog {
                    path: path.clone(),
                    line: idx + 1,
                    reason: reason.to_owned(),
                };
                let (name, ts, value) = parse_log_line(&line).map_err(corrupt)?;
                store.apply(&name, &ts, value)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.log = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    /// Stores `value` at the cell derived from `timestamp`. Same cell twice is
    /// last-writer-wins and bumps [`TsStore::overwrites`].
    pub fn put<Tz: TimeZone>(
        &mut self,
        name: &PointName,
        timestamp: &DateTime<Tz>,
        value: f64,
    ) -> Result<PutOutcome, StoreError> {
        if !value.is_finite() {
            return Err(StoreError::NonFinite(value));
        }
        let utc = timestamp.with_timezone(&Utc);
        self.check_cap(name, &utc)?;
        if let Some((_, log)) = self.log.as_mut() {
            writeln!(log, "{},{},{}", name, utc.timestamp(), value)?;
            log.flush()?;
        }
        self.apply(name, &utc, value)
    }

    fn check_cap(&self, name: &PointName, ts: &DateTime<Utc>) -> Result<(), StoreError> {
        let (month, count) = count_for(ts, self.config.base_resolution);
        let key = PartitionKey {
            point: name.clone(),
            month,
        };
        if let Some(part) = self.partitions.get(&key) {
            if part.cells.len() >= self.config.cell_cap && !part.cells.contains_key(&count) {
                return Err(StoreError::CapExceeded {
                    point: name.to_string(),
                    month,
                    cap: self.config.cell_cap,
                });
            }
        } else if self.config.cell_cap == 0 {
            return Err(StoreError::CapExceeded {
                point: name.to_string(),
                month,
                cap: 0,
            });
        }
        Ok(())
    }

    fn apply(&mut self, name: &PointName, ts: &DateTime<Utc>, value: f64) -> Result<PutOutcome, StoreError> {
        self.check_cap(name, ts)?;
        let (month, count) = count_for(ts, self.config.base_resolution);
        let key = PartitionKey {
            point: name.clone(),
            month,
        };
        let base_resolution = self.config.base_resolution;
        let map = Arc::make_mut(&mut self.partitions);
        let part = map.entry(key.clone()).or_insert_with(|| {
            Arc::new(SeriesPartition {
                key,
                base_resolution,
                cells: BTreeMap::new(),
            })
        });
        let outcome = match Arc::make_mut(part).cells.insert(count, value) {
            Some(_) => {
                self.overwrites += 1;
                PutOutcome::Overwrote
            }
            None => {
                self.cells += 1;
                PutOutcome::Inserted
            }
        };
        Ok(outcome)
    }

    pub fn overwrites(&self) -> u64 {
        self.overwrites
    }

    /// Total number of cells across all partitions.
    pub fn len(&self) -> usize {
        self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells == 0
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn partition(&self, point: &PointName, month: YearMonth) -> Option<&SeriesPartition> {
        self.partitions
            .get(&PartitionKey {
                point: point.clone(),
                month,
            })
            .map(Arc::as_ref)
    }

    pub fn query_range<Tz: TimeZone>(
        &self,
        point: &PointName,
        start: &DateTime<Tz>,
        end: &DateTime<Tz>,
    ) -> Vec<Sample> {
        query_partitions(&self.partitions, self.config.base_resolution, point, start, end)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            base_resolution: self.config.base_resolution,
            partitions: Arc::clone(&self.partitions),
        }
    }
}

fn parse_log_line(line: &str) -> Result<(PointName, DateTime<Utc>, f64), &'static str> {
    let mut parts = line.rsplitn(3, ',');
    let value = parts.next().ok_or("missing value")?;
    let secs = parts.next().ok_or("missing timestamp")?;
    let name = parts.next().ok_or("missing point name")?;
    let name = parse_system_name(name).map_err(|_| "bad point name")?;
    let secs: i64 = secs.parse().map_err(|_| "bad unix seconds")?;
    let ts = Utc.timestamp_opt(secs, 0).single().ok_or("timestamp out of range")?;
    let value: f64 = value.parse().map_err(|_| "bad value")?;
    Ok((name, ts, value))
}

fn query_partitions<Tz: TimeZone>(
    partitions: &PartitionMap,
    base_resolution: u32,
    point: &PointName,
    start: &DateTime<Tz>,
    end: &DateTime<Tz>,
) -> Vec<Sample> {
    let start = start.with_timezone(&Utc);
    let end = end.with_timezone(&Utc);
    let mut out = Vec::new();
    if start >= end {
        return out;
    }
    let (last_month, _) = count_for(&(end - chrono::Duration::seconds(1)), base_resolution);
    let mut month = YearMonth::of(&start);
    while month <= last_month {
        let key = PartitionKey {
            point: point.clone(),
            month,
        };
        if let Some(part) = partitions.get(&key) {
            let month_start = month.start();
            let res = i64::from(base_resolution);
            // first count whose reconstructed timestamp is >= start
            let lo = ((start - month_start).num_seconds().max(0) + res - 1) / res;
            let hi = ((end - month_start).num_seconds().min(month.seconds()) + res - 1) / res;
            out.extend(part.samples_in(lo as u32, hi as u32));
        }
        month = month.next();
    }
    out
}

/// Immutable view of the store at one moment. Iteration is ordered by
/// partition key (point, then month) and then by count.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    base_resolution: u32,
    partitions: Arc<PartitionMap>,
}

impl StoreSnapshot {
    pub fn base_resolution(&self) -> u32 {
        self.base_resolution
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partitions(&self) -> impl Iterator<Item = &SeriesPartition> {
        self.partitions.values().map(Arc::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PointName, Sample)> {
        self.partitions
            .values()
            .flat_map(|p| p.samples().map(move |s| (&p.key.point, s)))
    }

    pub fn points(&self) -> Vec<PointName> {
        let mut names: Vec<PointName> = self.partitions.keys().map(|k| k.point.clone()).collect();
        names.dedup();
        names
    }

    pub fn query_range<Tz: TimeZone>(
        &self,
        point: &PointName,
        start: &DateTime<Tz>,
        end: &DateTime<Tz>,
    ) -> Vec<Sample> {
        query_partitions(&self.partitions, self.base_resolution, point, start, end)
    }

    /// SHA-256 over every `(point, timestamp, value bits)` in iteration order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, sample) in self.iter() {
            hasher.update(name.to_string().as_bytes());
            hasher.update(b"\0");
            hasher.update(sample.at.timestamp().to_le_bytes());
            hasher.update(sample.value.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// One point's full history, independent of every other point.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: PointName,
    pub samples: Vec<Sample>,
}

/// Splits a snapshot into one independent series per full point name so that
/// batch jobs can run on them in parallel.
pub fn decouple_rows(snapshot: &StoreSnapshot) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for part in snapshot.partitions() {
        match out.last_mut() {
            Some(series) if series.name == part.key.point => series.samples.extend(part.samples()),
            _ => out.push(Series {
                name: part.key.point.clone(),
                samples: part.samples().collect(),
            }),
        }
    }
    out
}
