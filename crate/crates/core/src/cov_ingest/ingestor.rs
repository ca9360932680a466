use std::io;
use std::sync::Arc;

use serde::Serialize;
use tracing::{debug, warn};

use super::journal::{BackupJournal, Quarantine};
use super::store::{Document, EventStore, InsertOutcome};
use super::{parse_cov_line, CovEvent, LineError};
use crate::point_model::LookupTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    /// Durably indexed (or already present).
    Ack,
    /// Store unavailable; the line is in the backup journal.
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineOutcome {
    Accepted(IngestOutcome),
    Rejected(LineError),
}

impl LineOutcome {
    /// Whether the sender gets the ack byte.
    pub fn acknowledged(&self) -> bool {
        matches!(self, LineOutcome::Accepted(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RejectCounters {
    pub malformed_line: u64,
    pub bad_timestamp: u64,
    pub bad_value: u64,
    pub malformed_name: u64,
    pub unknown_point: u64,
}

impl RejectCounters {
    fn bump(&mut self, err: &LineError) {
        match err {
            LineError::MalformedLine(_) => self.malformed_line += 1,
            LineError::BadTimestamp(_) => self.bad_timestamp += 1,
            LineError::BadValue(_) => self.bad_value += 1,
            LineError::MalformedName(_) => self.malformed_name += 1,
            LineError::UnknownPoint(_) => self.unknown_point += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.malformed_line + self.bad_timestamp + self.bad_value + self.malformed_name + self.unknown_point
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub replayed: usize,
    pub deduped: usize,
    pub remaining: usize,
    /// Journal lines that no longer parse or resolve; moved to quarantine.
    pub quarantined: usize,
}

/// The single-writer commit path: parse, resolve, insert or journal.
#[derive(Debug)]
pub struct Ingestor<S> {
    lookup: Arc<LookupTable>,
    store: S,
    journal: BackupJournal,
    quarantine: Quarantine,
    counters: RejectCounters,
    reserved_value: Option<f64>,
}

impl<S: EventStore> Ingestor<S> {
    pub fn new(lookup: Arc<LookupTable>, store: S, journal: BackupJournal, quarantine: Quarantine) -> Self {
        Self {
            lookup,
            store,
            journal,
            quarantine,
            counters: RejectCounters::default(),
            reserved_value: Some(crate::export_map::DEFAULT_SENTINEL),
        }
    }

    /// Values equal to `value` are rejected as `BadValue` because downstream
    /// exports use it as the missing-data marker.
    pub fn with_reserved_value(mut self, value: Option<f64>) -> Self {
        self.reserved_value = value;
        self
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    pub fn journal(&self) -> &BackupJournal {
        &self.journal
    }

    pub fn quarantine(&self) -> &Quarantine {
        &self.quarantine
    }

    pub fn counters(&self) -> RejectCounters {
        self.counters
    }

    pub fn lookup(&self) -> &LookupTable {
        &self.lookup
    }

    /// Parses and resolves a line without touching any state.
    pub fn prepare(&self, line: &str) -> Result<Document, LineError> {
        let event = parse_cov_line(line)?;
        self.prepare_event(event)
    }

    fn prepare_event(&self, event: CovEvent) -> Result<Document, LineError> {
        if self.reserved_value == Some(event.value) {
            return Err(LineError::BadValue(event.value_text));
        }
        let point = self
            .lookup
            .resolve(&event.network_point)
            .map_err(|_| LineError::UnknownPoint(event.network_point.to_string()))?
            .clone();
        Ok(Document { point, event })
    }

    /// Records a rejected raw line.
    pub fn reject(&mut self, raw: &str, err: &LineError) {
        debug!(error = %err, "rejected line");
        self.counters.bump(err);
        if let Err(e) = self.quarantine.push(raw) {
            warn!(error = %e, "quarantine write failed");
        }
    }

    /// Full path for one raw line. `Err` only when the backup journal itself
    /// cannot be written, in which case nothing must be acknowledged.
    pub fn process_line(&mut self, line: &str) -> io::Result<LineOutcome> {
        match self.prepare(line) {
            Ok(doc) => self.ingest(&doc).map(LineOutcome::Accepted),
            Err(err) => {
                self.reject(line, &err);
                Ok(LineOutcome::Rejected(err))
            }
        }
    }

    /// Inserts by doc id; falls back to the journal when the store fails.
    pub fn ingest(&mut self, doc: &Document) -> io::Result<IngestOutcome> {
        match self.store.insert(doc) {
            Ok(InsertOutcome::Inserted | InsertOutcome::Duplicate) => Ok(IngestOutcome::Ack),
            Err(e) => {
                debug!(error = %e, doc_id = %doc.doc_id(), "store write failed, journaling");
                self.journal.append(&doc.event.canonical_line())?;
                Ok(IngestOutcome::Deferred)
            }
        }
    }

    /// Re-inserts journaled lines in order. A line leaves the journal only once
    /// the store reports it present; the first store failure stops the replay
    /// and keeps that line and everything after it.
    pub fn replay_backup(&mut self) -> io::Result<ReplayReport> {
        let lines = self.journal.pending()?;
        let mut report = ReplayReport::default();
        let mut done = 0;
        for line in &lines {
            let doc = match self.prepare(line) {
                Ok(doc) => doc,
                Err(err) => {
                    warn!(error = %err, "unreplayable journal line");
                    self.reject(line, &err);
                    report.quarantined += 1;
                    done += 1;
                    continue;
                }
            };
            match self.store.insert(&doc) {
                Ok(InsertOutcome::Inserted) => match self.store.contains(&doc.doc_id()) {
                    Ok(true) => report.replayed += 1,
                    _ => break,
                },
                Ok(InsertOutcome::Duplicate) => report.deduped += 1,
                Err(e) => {
                    debug!(error = %e, "replay interrupted");
                    break;
                }
            }
            done += 1;
        }
        let tail = &lines[done..];
        report.remaining = tail.len();
        self.journal.rewrite(tail)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cov_ingest::{FlakyStore, IndexedStore, StoreSwitch};
    use crate::point_model::{parse_network_name, parse_system_name};
    use crate::ts_store::StoreConfig;

    struct Fixture {
        _dir: tempfile::TempDir,
        ingestor: Ingestor<FlakyStore<IndexedStore>>,
        switch: StoreSwitch,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut lookup = LookupTable::new();
        lookup
            .insert(
                parse_network_name("DCCNAE-01/FC-1.CAV-1-10.T").unwrap(),
                parse_system_name("DCC.RM.DCC01-13.T").unwrap(),
            )
            .unwrap();
        let switch = StoreSwitch::new();
        let store = FlakyStore::new(IndexedStore::in_memory(StoreConfig::default()), switch.clone());
        let ingestor = Ingestor::new(
            Arc::new(lookup),
            store,
            BackupJournal::new(dir.path().join("backup.journal")),
            Quarantine::new(Some(dir.path().join("quarantine.log"))),
        );
        Fixture {
            _dir: dir,
            ingestor,
            switch,
        }
    }

    fn line(i: usize) -> String {
        format!(
            "2020-01-27T11:{:02}:{:02}-0500,DCCNAE-01,DCCNAE-01/FC-1.CAV-1-10.T,{}",
            i / 12,
            (i % 12) * 5,
            20.0 + i as f64 / 10.0
        )
    }

    fn stored(f: &Fixture) -> usize {
        f.ingestor.store().inner().len()
    }

    #[test]
    fn fresh_event_acks() {
        let mut f = fixture();
        assert_eq!(
            f.ingestor.process_line(&line(0)).unwrap(),
            LineOutcome::Accepted(IngestOutcome::Ack)
        );
        assert_eq!(stored(&f), 1);
    }

    #[test]
    fn duplicate_acks_twice_stores_once() {
        let mut f = fixture();
        assert!(f.ingestor.process_line(&line(0)).unwrap().acknowledged());
        assert!(f.ingestor.process_line(&line(0)).unwrap().acknowledged());
        assert_eq!(stored(&f), 1);
    }

    #[test]
    fn store_down_defers_to_journal() {
        let mut f = fixture();
        f.switch.set_up(false);
        assert_eq!(
            f.ingestor.process_line(&line(0)).unwrap(),
            LineOutcome::Accepted(IngestOutcome::Deferred)
        );
        assert_eq!(f.ingestor.journal().len().unwrap(), 1);
        assert_eq!(stored(&f), 0);
    }

    #[test]
    fn rejects_go_to_quarantine_only() {
        let mut f = fixture();
        f.switch.set_up(false);
        let unknown = "2020-01-27T11:00:00-0500,D,D/FC-1.X.T,1";
        for raw in ["a,b,c", unknown, "2020-01-27T11:00:00-0500,D,D/T.C.P,555555"] {
            assert!(!f.ingestor.process_line(raw).unwrap().acknowledged());
        }
        let c = f.ingestor.counters();
        assert_eq!((c.malformed_line, c.unknown_point, c.bad_value), (1, 1, 1));
        assert_eq!(f.ingestor.quarantine().count(), 3);
        assert!(f.ingestor.journal().is_empty().unwrap());
        assert_eq!(stored(&f), 0);
    }

    #[test]
    fn journal_write_failure_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = fixture();
        // a directory can't be opened for append
        f.ingestor.journal = BackupJournal::new(dir.path());
        f.switch.set_up(false);
        assert!(f.ingestor.process_line(&line(0)).is_err());
    }

    fn journal_lines(f: &mut Fixture, n: usize) {
        f.switch.set_up(false);
        for i in 0..n {
            f.ingestor.process_line(&line(i)).unwrap();
        }
        f.switch.heal();
    }

    #[test]
    fn replay_into_empty_store() {
        let mut f = fixture();
        journal_lines(&mut f, 5);
        let report = f.ingestor.replay_backup().unwrap();
        assert_eq!((report.replayed, report.deduped, report.remaining), (5, 0, 0));
        assert_eq!(stored(&f), 5);
        assert!(f.ingestor.journal().is_empty().unwrap());
    }

    #[test]
    fn replay_of_present_lines_dedupes() {
        let mut f = fixture();
        for i in 0..5 {
            f.ingestor.process_line(&line(i)).unwrap();
        }
        for i in 0..5 {
            f.ingestor.journal().append(&line(i)).unwrap();
        }
        let report = f.ingestor.replay_backup().unwrap();
        assert_eq!((report.replayed, report.deduped, report.remaining), (0, 5, 0));
    }

    #[test]
    fn replay_keeps_exact_tail_on_failure() {
        let mut f = fixture();
        journal_lines(&mut f, 10);
        f.switch.fail_after(4);
        let report = f.ingestor.replay_backup().unwrap();
        assert_eq!((report.replayed, report.deduped, report.remaining), (4, 0, 6));
        let tail: Vec<String> = (4..10).map(line).collect();
        assert_eq!(f.ingestor.journal().pending().unwrap(), tail);
        assert_eq!(stored(&f), 4);

        f.switch.heal();
        let report = f.ingestor.replay_backup().unwrap();
        assert_eq!((report.replayed, report.deduped, report.remaining), (6, 0, 0));
        assert_eq!(stored(&f), 10);
    }

    #[test]
    fn replay_quarantines_unresolvable_lines() {
        let mut f = fixture();
        f.ingestor
            .journal()
            .append("2020-01-27T11:00:00-0500,D,D/FC-1.X.T,1")
            .unwrap();
        f.ingestor.journal().append(&line(0)).unwrap();
        let report = f.ingestor.replay_backup().unwrap();
        assert_eq!(report.quarantined, 1);
        assert_eq!(report.replayed, 1);
        assert_eq!(report.remaining, 0);
    }
}
