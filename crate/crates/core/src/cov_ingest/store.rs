use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{parse_cov_line, CovEvent, DocId};
use crate::point_model::{LookupTable, PointName};
use crate::ts_store::{StoreConfig, StoreError, StoreSnapshot, TsStore};

#[derive(Debug, Error)]
pub enum StoreFailure {
    #[error("store unavailable")]
    Unavailable,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Duplicate,
}

/// A parsed event together with its resolved system-context name.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub point: PointName,
    pub event: CovEvent,
}

impl Document {
    pub fn doc_id(&self) -> DocId {
        self.event.doc_id
    }
}

/// Durable, doc-id keyed event storage.
pub trait EventStore: Send {
    /// Inserts unless the doc id already exists, in which case nothing changes.
    fn insert(&mut self, doc: &Document) -> Result<InsertOutcome, StoreFailure>;

    fn contains(&self, id: &DocId) -> Result<bool, StoreFailure>;
}

/// Raw event index keyed by doc id, feeding a [`TsStore`].
///
/// With a directory, raw events go to `events.log` (wire format) and series
/// cells to `series.log`; both are replayed on open.
#[derive(Debug)]
pub struct IndexedStore {
    events: BTreeMap<DocId, String>,
    series: TsStore,
    log: Option<BufWriter<File>>,
}

impl IndexedStore {
    pub fn in_memory(config: StoreConfig) -> Self {
        Self {
            events: BTreeMap::new(),
            series: TsStore::new(config),
            log: None,
        }
    }

    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreFailure> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let series = TsStore::open(dir.join("series.log"), config)?;
        let events_path = dir.join("events.log");
        let mut events = BTreeMap::new();
        if events_path.exists() {
            for line in BufReader::new(File::open(&events_path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let event = parse_cov_line(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("events.log: {e}")))?;
                events.insert(event.doc_id, line);
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&events_path)?;
        Ok(Self {
            events,
            series,
            log: Some(BufWriter::new(log)),
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &DocId> {
        self.events.keys()
    }

    pub fn get(&self, id: &DocId) -> Option<&str> {
        self.events.get(id).map(String::as_str)
    }

    pub fn series(&self) -> &TsStore {
        &self.series
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        self.series.snapshot()
    }

    /// Digest over the doc index and the series contents.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (id, line) in &self.events {
            hasher.update(id.as_bytes());
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(self.series.snapshot().digest().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Rebuilds a store from raw wire lines, e.g. an exported events.log.
    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        lookup: &LookupTable,
        config: StoreConfig,
    ) -> Result<Self, StoreFailure> {
        let mut store = Self::in_memory(config);
        for line in lines {
            let Ok(event) = parse_cov_line(line) else { continue };
            let Ok(point) = lookup.resolve(&event.network_point) else {
                continue;
            };
            store.insert(&Document {
                point: point.clone(),
                event,
            })?;
        }
        Ok(store)
    }
}

impl EventStore for IndexedStore {
    fn insert(&mut self, doc: &Document) -> Result<InsertOutcome, StoreFailure> {
        let id = doc.doc_id();
        if self.events.contains_key(&id) {
            return Ok(InsertOutcome::Duplicate);
        }
        self.series.put(&doc.point, &doc.event.timestamp, doc.event.value)?;
        let line = doc.event.canonical_line();
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{line}")?;
            log.flush()?;
        }
        self.events.insert(id, line);
        Ok(InsertOutcome::Inserted)
    }

    fn contains(&self, id: &DocId) -> Result<bool, StoreFailure> {
        Ok(self.events.contains_key(id))
    }
}

/// Shared on/off switch for a [`FlakyStore`], used to inject store downtime.
#[derive(Debug, Clone)]
pub struct StoreSwitch {
    up: Arc<AtomicBool>,
    // inserts remaining before the store goes down; negative = unlimited
    budget: Arc<AtomicI64>,
}

impl Default for StoreSwitch {
    fn default() -> Self {
        Self {
            up: Arc::new(AtomicBool::new(true)),
            budget: Arc::new(AtomicI64::new(-1)),
        }
    }
}

impl StoreSwitch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_up(&self, up: bool) {
        self.up.store(up, Ordering::SeqCst);
    }

    pub fn is_up(&self) -> bool {
        self.up.load(Ordering::SeqCst)
    }

    /// Brings the store back up with no insert budget.
    pub fn heal(&self) {
        self.budget.store(-1, Ordering::SeqCst);
        self.set_up(true);
    }

    /// Lets `n` more inserts succeed, then takes the store down.
    pub fn fail_after(&self, n: u32) {
        self.budget.store(i64::from(n), Ordering::SeqCst);
        self.set_up(true);
    }

    fn admit(&self) -> bool {
        if !self.is_up() {
            return false;
        }
        let left = self.budget.load(Ordering::SeqCst);
        if left == 0 {
            self.set_up(false);
            return false;
        }
        if left > 0 {
            self.budget.fetch_sub(1, Ordering::SeqCst);
        }
        true
    }
}

/// Wraps a store so that a [`StoreSwitch`] can make it fail.
#[derive(Debug)]
pub struct FlakyStore<S> {
    inner: S,
    switch: StoreSwitch,
}

impl<S> FlakyStore<S> {
    pub fn new(inner: S, switch: StoreSwitch) -> Self {
        Self { inner, switch }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn switch(&self) -> &StoreSwitch {
        &self.switch
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: EventStore> EventStore for FlakyStore<S> {
    fn insert(&mut self, doc: &Document) -> Result<InsertOutcome, StoreFailure> {
        if !self.switch.admit() {
            return Err(StoreFailure::Unavailable);
        }
        self.inner.insert(doc)
    }

    fn contains(&self, id: &DocId) -> Result<bool, StoreFailure> {
        if !self.switch.is_up() {
            return Err(StoreFailure::Unavailable);
        }
        self.inner.contains(id)
    }
}
