//! Batch summarization over store snapshots.
//!
//! Every series is bucketed into UTC hours, days or months and reduced to an
//! average, a minimum, a maximum, or a deficiency count. Periods with no
//! samples produce no record at all (counts included); periods with samples
//! but no deficiency produce a count of zero.
//!
//! A deficiency *episode* is a maximal run of samples violating a rule's
//! comparator. Two consecutive samples further apart than twice the base
//! resolution belong to different runs. A run counts only if it lasted at
//! least the rule's time delay, measured from its first to its last violating
//! sample, and it is attributed to the period in which it started. Anchoring
//! on the start keeps counts monotone in the delay: a longer delay can drop
//! an episode but never move it into another period.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDateTime, TimeZone, Timelike, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::point_model::{parse_system_name, PointName};
use crate::ts_store::{decouple_rows, Sample, Series, StoreSnapshot, DEFAULT_BASE_RESOLUTION};

/// Timestamp format used in every summary file.
pub const PERIOD_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("invalid rule for {selector:?}: {reason}")]
    InvalidRule { selector: String, reason: &'static str },
    #[error("unknown {kind} {value:?}")]
    Unknown { kind: &'static str, value: String },
    #[error("summary file: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Hourly,
    Daily,
    Monthly,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Hourly, Granularity::Daily, Granularity::Monthly];

    pub fn period_start(&self, ts: DateTime<Utc>) -> DateTime<Utc> {
        let date = ts.date_naive();
        let start = match self {
            Granularity::Hourly => date.and_hms_opt(ts.hour(), 0, 0),
            Granularity::Daily => date.and_hms_opt(0, 0, 0),
            Granularity::Monthly => date.with_day(1).and_then(|d| d.and_hms_opt(0, 0, 0)),
        };
        start.expect("valid period start").and_utc()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Hourly => "hourly",
            Granularity::Daily => "daily",
            Granularity::Monthly => "monthly",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = BatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| BatchError::Unknown {
                kind: "granularity",
                value: s.to_owned(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Avg,
    Min,
    Max,
    Count,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Avg, Metric::Min, Metric::Max, Metric::Count];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Avg => "avg",
            Metric::Min => "min",
            Metric::Max => "max",
            Metric::Count => "count",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = BatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BatchError::Unknown {
                kind: "metric",
                value: s.to_owned(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Comparator {
    #[serde(rename = ">")]
    Above { threshold: f64 },
    #[serde(rename = "<")]
    Below { threshold: f64 },
    #[serde(rename = "outside")]
    Outside { lo: f64, hi: f64 },
}

impl Comparator {
    pub fn violates(&self, value: f64) -> bool {
        match *self {
            Comparator::Above { threshold } => value > threshold,
            Comparator::Below { threshold } => value < threshold,
            Comparator::Outside { lo, hi } => value < lo || value > hi,
        }
    }
}

fn default_severity() -> u8 {
    1
}

/// Threshold plus time delay before a point counts as deficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficiencyRule {
    /// Point id pattern; `*` matches any run of characters. A pattern with a
    /// `.` is matched against the full point name instead.
    #[serde(rename = "point")]
    pub point_selector: String,
    pub comparator: Comparator,
    /// Seconds.
    #[serde(default)]
    pub time_delay: u64,
    /// 1 = high-level (minor) alarm; larger numbers are more severe.
    #[serde(default = "default_severity")]
    pub severity: u8,
    /// Point id the count is reported under; defaults to the matched point id.
    #[serde(default)]
    pub label: Option<String>,
}

impl DeficiencyRule {
    pub fn new(point_selector: impl Into<String>, comparator: Comparator, time_delay: u64) -> Self {
        Self {
            point_selector: point_selector.into(),
            comparator,
            time_delay,
            severity: 1,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        let invalid = |reason| BatchError::InvalidRule {
            selector: self.point_selector.clone(),
            reason,
        };
        match self.comparator {
            Comparator::Outside { lo, hi } if lo.is_nan() || hi.is_nan() || lo >= hi => {
                Err(invalid("outside requires lo < hi"))
            }
            Comparator::Above { threshold } | Comparator::Below { threshold } if !threshold.is_finite() => {
                Err(invalid("threshold must be finite"))
            }
            _ if self.severity == 0 => Err(invalid("severity starts at 1")),
            _ if self.point_selector.is_empty() => Err(invalid("empty point selector")),
            _ => Ok(()),
        }
    }

    pub fn matches(&self, name: &PointName) -> bool {
        if self.point_selector.contains('.') {
            glob_match(&self.point_selector, &name.to_string())
        } else {
            glob_match(&self.point_selector, name.point_id())
        }
    }
}

fn glob_match(pattern: &str, text: &str) -> bool {
    let mut parts = pattern.split('*');
    let first = parts.next().unwrap_or("");
    let Some(mut rest) = text.strip_prefix(first) else {
        return false;
    };
    let tail: Vec<&str> = parts.collect();
    let Some((last, middle)) = tail.split_last() else {
        return rest.is_empty();
    };
    for part in middle {
        match rest.find(part) {
            Some(at) => rest = &rest[at + part.len()..],
            None => return false,
        }
    }
    rest.ends_with(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// One per qualifying violation episode.
    #[default]
    Episodes,
    /// One per violating sample inside a qualifying episode, each in its own period.
    Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Seconds between samples; gaps above twice this break an episode.
    pub base_resolution: u32,
    pub mode: CountMode,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            base_resolution: DEFAULT_BASE_RESOLUTION,
            mode: CountMode::Episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub period_start: DateTime<Utc>,
    pub point: PointName,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
struct Accumulator {
    count: u64,
    sum: f64,
    // Neumaier compensation term
    carry: f64,
    min: f64,
    max: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            count: 0,
            sum: 0.0,
            carry: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn mean(&self) -> f64 {
        // rounding can push e.g. three equal values just outside their range
        ((self.sum + self.carry) / self.count as f64).clamp(self.min, self.max)
    }
}

fn accumulate(samples: &[Sample], granularity: Granularity) -> Vec<(DateTime<Utc>, Accumulator)> {
    let mut out: Vec<(DateTime<Utc>, Accumulator)> = Vec::new();
    for s in samples {
        let period = granularity.period_start(s.at);
        match out.last_mut() {
            Some((p, acc)) if *p == period => acc.push(s.value),
            _ => {
                let mut acc = Accumulator::new();
                acc.push(s.value);
                out.push((period, acc));
            }
        }
    }
    out
}

fn reduce(
    series: &Series,
    granularity: Granularity,
    metric: Metric,
    f: impl Fn(&Accumulator) -> f64,
) -> Vec<SummaryRecord> {
    accumulate(&series.samples, granularity)
        .into_iter()
        .map(|(period_start, acc)| SummaryRecord {
            period_start,
            point: series.name.clone(),
            metric,
            value: f(&acc),
        })
        .collect()
}

pub fn summarize_avg(series: &Series, granularity: Granularity) -> Vec<SummaryRecord> {
    reduce(series, granularity, Metric::Avg, Accumulator::mean)
}

pub fn summarize_min(series: &Series, granularity: Granularity) -> Vec<SummaryRecord> {
    reduce(series, granularity, Metric::Min, |a| a.min)
}

pub fn summarize_max(series: &Series, granularity: Granularity) -> Vec<SummaryRecord> {
    reduce(series, granularity, Metric::Max, |a| a.max)
}

/// A maximal violating run, as sample index range `[first, last]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Episode {
    pub first: usize,
    pub last: usize,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Episode {
    pub fn duration_secs(&self) -> i64 {
        (self.end - self.start).num_seconds()
    }
}

/// All maximal violating runs, regardless of duration.
pub fn violation_runs(samples: &[Sample], comparator: &Comparator, base_resolution: u32) -> Vec<Episode> {
    let max_gap = 2 * i64::from(base_resolution);
    let mut runs = Vec::new();
    let mut current: Option<Episode> = None;
    let mut prev_at: Option<DateTime<Utc>> = None;
    for (i, s) in samples.iter().enumerate() {
        let contiguous = prev_at.is_some_and(|p| (s.at - p).num_seconds() <= max_gap);
        prev_at = Some(s.at);
        if !comparator.violates(s.value) {
            runs.extend(current.take());
            continue;
        }
        match current.as_mut() {
            Some(run) if contiguous => {
                run.last = i;
                run.end = s.at;
            }
            _ => {
                runs.extend(current.take());
                current = Some(Episode {
                    first: i,
                    last: i,
                    start: s.at,
                    end: s.at,
                });
            }
        }
    }
    runs.extend(current);
    runs
}

pub fn summarize_count(
    series: &Series,
    rule: &DeficiencyRule,
    granularity: Granularity,
    options: CountOptions,
) -> Vec<SummaryRecord> {
    if !rule.matches(&series.name) {
        return Vec::new();
    }
    let point = match &rule.label {
        Some(label) => series.name.with_point_id(label).unwrap_or_else(|_| series.name.clone()),
        None => series.name.clone(),
    };
    let mut counts: BTreeMap<DateTime<Utc>, u64> = series
        .samples
        .iter()
        .map(|s| (granularity.period_start(s.at), 0))
        .collect();
    let delay = i64::try_from(rule.time_delay).unwrap_or(i64::MAX);
    for run in violation_runs(&series.samples, &rule.comparator, options.base_resolution) {
        if run.duration_secs() < delay {
            continue;
        }
        match options.mode {
            CountMode::Episodes => *counts.entry(granularity.period_start(run.start)).or_default() += 1,
            CountMode::Samples => {
                for s in &series.samples[run.first..=run.last] {
                    *counts.entry(granularity.period_start(s.at)).or_default() += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|(period_start, n)| SummaryRecord {
            period_start,
            point: point.clone(),
            metric: Metric::Count,
            value: n as f64,
        })
        .collect()
}

/// All records for one `(metric, granularity)`, ordered by period then point.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub metric: Metric,
    pub granularity: Granularity,
    records: Vec<SummaryRecord>,
}

impl SummaryTable {
    pub fn new(metric: Metric, granularity: Granularity, mut records: Vec<SummaryRecord>) -> Self {
        records.sort_by(|a, b| (a.period_start, &a.point).cmp(&(b.period_start, &b.point)));
        Self {
            metric,
            granularity,
            records,
        }
    }

    pub fn records(&self) -> &[SummaryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, period_start: DateTime<Utc>, point: &PointName) -> Option<f64> {
        self.records
            .binary_search_by(|r| (r.period_start, &r.point).cmp(&(period_start, point)))
            .ok()
            .map(|i| self.records[i].value)
    }

    pub fn file_name(metric: Metric, granularity: Granularity) -> String {
        format!("records_{metric}_{granularity}.csv")
    }

    /// Long form: `period_start,point,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), BatchError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["period_start", "point", "value"])?;
        for r in &self.records {
            wtr.write_record([
                r.period_start.format(PERIOD_FORMAT).to_string(),
                r.point.to_string(),
                r.value.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(metric: Metric, granularity: Granularity, reader: R) -> Result<Self, BatchError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let bad = || BatchError::BadRecord(format!("{row:?}"));
            let period =
                NaiveDateTime::parse_from_str(row.get(0).ok_or_else(bad)?, PERIOD_FORMAT).map_err(|_| bad())?;
            let point = parse_system_name(row.get(1).ok_or_else(bad)?).map_err(|_| bad())?;
            let value: f64 = row.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            records.push(SummaryRecord {
                period_start: Utc.from_utc_datetime(&period),
                point,
                metric,
                value,
            });
        }
        Ok(Self::new(metric, granularity, records))
    }
}

fn default_granularities() -> Vec<Granularity> {
    vec![Granularity::Hourly]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub metrics: Vec<Metric>,
    #[serde(default = "default_granularities")]
    pub granularities: Vec<Granularity>,
    #[serde(default)]
    pub rules: Vec<DeficiencyRule>,
    #[serde(default)]
    pub count: CountOptions,
}

impl JobSpec {
    pub fn from_json(text: &str) -> Result<Self, BatchError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        self.rules.iter().try_for_each(DeficiencyRule::validate)
    }
}

/// Summary tables keyed by `(metric, granularity)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTables(BTreeMap<(Metric, Granularity), SummaryTable>);

impl SummaryTables {
    pub fn get(&self, metric: Metric, granularity: Granularity) -> Option<&SummaryTable> {
        self.0.get(&(metric, granularity))
    }

    pub fn insert(&mut self, table: SummaryTable) {
        self.0.insert((table.metric, table.granularity), table);
    }

    pub fn iter(&self) -> impl Iterator<Item = &SummaryTable> {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Writes one long-form file per table, replacing any previous run.
    pub fn write_dir(&self, dir: &Path) -> Result<(), BatchError> {
        std::fs::create_dir_all(dir)?;
        for table in self.iter() {
            let path = dir.join(SummaryTable::file_name(table.metric, table.granularity));
            let tmp = path.with_extension("csv.tmp");
            table.write_csv(std::fs::File::create(&tmp)?)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(())
    }

    pub fn read_table(dir: &Path, metric: Metric, granularity: Granularity) -> Result<SummaryTable, BatchError> {
        let path = dir.join(SummaryTable::file_name(metric, granularity));
        SummaryTable::read_csv(metric, granularity, std::fs::File::open(path)?)
    }
}

fn summarize_series(series: &Series, spec: &JobSpec) -> Vec<(Granularity, SummaryRecord)> {
    let mut out = Vec::new();
    for &granularity in &spec.granularities {
        let mut push = |records: Vec<SummaryRecord>| out.extend(records.into_iter().map(|r| (granularity, r)));
        for &metric in &spec.metrics {
            match metric {
                Metric::Avg => push(summarize_avg(series, granularity)),
                Metric::Min => push(summarize_min(series, granularity)),
                Metric::Max => push(summarize_max(series, granularity)),
                Metric::Count => {
                    for rule in &spec.rules {
                        push(summarize_count(series, rule, granularity, spec.count));
                    }
                }
            }
        }
    }
    out
}

/// Runs every metric and granularity of `spec` over independent series.
/// Output does not depend on series order.
pub fn run_batch_series(series: &[Series], spec: &JobSpec) -> SummaryTables {
    let records: Vec<(Granularity, SummaryRecord)> =
        series.par_iter().flat_map_iter(|s| summarize_series(s, spec)).collect();
    let mut grouped: BTreeMap<(Metric, Granularity), Vec<SummaryRecord>> = BTreeMap::new();
    for &granularity in &spec.granularities {
        for &metric in &spec.metrics {
            grouped.entry((metric, granularity)).or_default();
        }
    }
    for (granularity, r) in records {
        grouped.entry((r.metric, granularity)).or_default().push(r);
    }
    let mut tables = SummaryTables::default();
    for ((metric, granularity), records) in grouped {
        tables.insert(SummaryTable::new(metric, granularity, records));
    }
    tables
}

pub fn run_batch(snapshot: &StoreSnapshot, spec: &JobSpec) -> SummaryTables {
    run_batch_series(&decouple_rows(snapshot), spec)
}
