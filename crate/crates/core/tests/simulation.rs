mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::DateTime;
use common::TestServer;
use covbridge::cov_ingest::{
    parse_cov_line, BackupJournal, DocId, EventStore, FlakyStore, IndexedStore, Ingestor, Quarantine, ServeOptions,
    StoreSwitch,
};
use covbridge::device_sim::{stream, Generator, Scenario, SimPoint, TcpSink, Window};
use covbridge::point_model::{parse_network_name, parse_system_name};
use covbridge::ts_store::StoreConfig;

fn scenario(points: usize, horizon: u64) -> Scenario {
    let points = (0..points)
        .map(|i| {
            let mut p = SimPoint::new(
                parse_network_name(&format!("SIM-{i}/FC-1.CTRL-{i}.T")).unwrap(),
                Generator::Ramp {
                    slope: 0.2,
                    start: 10.0 * i as f64,
                },
                0.5,
            );
            p.system = Some(parse_system_name(&format!("SIM.AIR.E{i}.T")).unwrap());
            p.noise = 0.05;
            p
        })
        .collect();
    Scenario {
        seed: 11,
        start: DateTime::parse_from_rfc3339("2019-05-02T08:00:00-04:00").unwrap(),
        horizon,
        points,
        buffer: Default::default(),
        faults: Default::default(),
        realtime: false,
    }
}

fn ingestor<S: EventStore>(s: &Scenario, store: S, dir: &std::path::Path) -> Ingestor<S> {
    Ingestor::new(
        Arc::new(s.lookup_table().unwrap()),
        store,
        BackupJournal::new(dir.join("backup.journal")),
        Quarantine::new(None),
    )
}

fn unique_ids(lines: &[String]) -> BTreeSet<DocId> {
    lines.iter().map(|l| parse_cov_line(l).unwrap().doc_id).collect()
}

#[test]
fn clean_run_delivers_every_emission() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(3, 500);
    let server = TestServer::start(
        ingestor(&s, IndexedStore::in_memory(StoreConfig::default()), dir.path()),
        ServeOptions::default(),
    );
    let report = stream(&s, &mut TcpSink::new(server.addr).unwrap(), &mut ());
    let ingestor = server.stop();
    assert!(report.emitted.len() >= 3 * 100 / 2);
    assert_eq!(report.sent, report.emitted.len());
    assert_eq!(report.acked, report.sent);
    assert!(report.rejected.is_empty() && report.unsent.is_empty());
    let stored: BTreeSet<DocId> = ingestor.store().doc_ids().copied().collect();
    assert_eq!(stored, unique_ids(&report.emitted));
}

#[test]
fn duplicated_sends_store_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scenario(3, 2000);
    s.faults.duplicate_probability = 0.1;
    let server = TestServer::start(
        ingestor(&s, IndexedStore::in_memory(StoreConfig::default()), dir.path()),
        ServeOptions::default(),
    );
    let report = stream(&s, &mut TcpSink::new(server.addr).unwrap(), &mut ());
    let ingestor = server.stop();
    assert!(report.duplicates > 0);
    assert_eq!(ingestor.store().len(), unique_ids(&report.emitted).len());
}

#[test]
fn severed_sink_conserves_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scenario(2, 300);
    s.buffer.window = Some(5);
    s.faults.sever = vec![Window(100, 110)];
    let server = TestServer::start(
        ingestor(&s, IndexedStore::in_memory(StoreConfig::default()), dir.path()),
        ServeOptions::default(),
    );
    let report = stream(&s, &mut TcpSink::new(server.addr).unwrap(), &mut ());
    assert_eq!(report.sent + report.unsent.len(), report.emitted.len());
    assert!(report.unsent.is_empty());
    assert_eq!(server.stop().store().len(), report.emitted.len());

    // a sever that outlasts the run leaves the tail unsent
    s.faults.sever = vec![Window(200, u64::MAX)];
    let server = TestServer::start(
        ingestor(&s, IndexedStore::in_memory(StoreConfig::default()), dir.path()),
        ServeOptions::default(),
    );
    let report = stream(&s, &mut TcpSink::new(server.addr).unwrap(), &mut ());
    assert_eq!(report.sent + report.unsent.len(), report.emitted.len());
    assert!(!report.unsent.is_empty());
    assert_eq!(server.stop().store().len(), report.sent);
}

#[test]
fn persistent_sink_against_persistent_server() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(4, 1000);
    let options = ServeOptions {
        persistent: true,
        ..ServeOptions::default()
    };
    let server = TestServer::start(
        ingestor(&s, IndexedStore::in_memory(StoreConfig::default()), dir.path()),
        options,
    );
    let mut sink = TcpSink::new(server.addr).unwrap().persistent(true);
    let report = stream(&s, &mut sink, &mut ());
    drop(sink);
    assert_eq!(report.acked, report.emitted.len());
    assert_eq!(server.stop().store().len(), report.emitted.len());
}

#[test]
fn store_down_window_is_recovered_by_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scenario(3, 1000);
    s.faults.store_down = vec![Window(200, 500)];
    s.faults.duplicate_probability = 0.05;
    let mut switch = StoreSwitch::new();
    let store = FlakyStore::new(IndexedStore::in_memory(StoreConfig::default()), switch.clone());
    let server = TestServer::start(ingestor(&s, store, dir.path()), ServeOptions::default());
    let report = stream(&s, &mut TcpSink::new(server.addr).unwrap(), &mut switch);
    let mut ingestor = server.stop();
    assert!(switch.is_up());
    let pending = ingestor.journal().len().unwrap();
    assert!(pending > 0);
    assert!(ingestor.store().inner().len() < report.emitted.len());

    let replay = ingestor.replay_backup().unwrap();
    assert_eq!(replay.replayed + replay.deduped, pending);
    assert_eq!(replay.remaining, 0);
    let stored: BTreeSet<DocId> = ingestor.store().inner().doc_ids().copied().collect();
    assert_eq!(stored, unique_ids(&report.emitted));
}
