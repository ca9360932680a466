#![allow(dead_code)]

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use covbridge::cov_ingest::{serve, EventStore, Ingestor, ServeOptions, SharedIngestor};
use covbridge::point_model::{parse_network_name, parse_system_name, LookupTable};
use tokio::runtime::Runtime;
use tokio::sync::oneshot;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn read_data(name: &str) -> String {
    std::fs::read_to_string(data_path(name)).unwrap()
}

/// A COV server on an ephemeral loopback port with its own runtime.
pub struct TestServer<S: EventStore + 'static> {
    pub addr: SocketAddr,
    ingestor: Option<SharedIngestor<S>>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<io::Result<()>>>,
    rt: Runtime,
}

impl<S: EventStore + 'static> TestServer<S> {
    pub fn start(ingestor: Ingestor<S>, options: ServeOptions) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        let ingestor = Arc::new(Mutex::new(ingestor));
        let (tx, rx) = oneshot::channel::<()>();
        let handle = rt.spawn(serve(listener, Arc::clone(&ingestor), options, async {
            let _ = rx.await;
        }));
        Self {
            addr,
            ingestor: Some(ingestor),
            shutdown: Some(tx),
            handle: Some(handle),
            rt,
        }
    }

    pub fn ingestor(&self) -> &SharedIngestor<S> {
        self.ingestor.as_ref().unwrap()
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    /// Stops accepting, drains connections and hands the ingestor back.
    pub fn stop(mut self) -> Ingestor<S> {
        let _ = self.shutdown.take().unwrap().send(());
        self.rt.block_on(self.handle.take().unwrap()).unwrap().unwrap();
        match Arc::try_unwrap(self.ingestor.take().unwrap()) {
            Ok(m) => m.into_inner().unwrap(),
            Err(_) => panic!("ingestor still shared"),
        }
    }
}

/// Sends one line on a fresh connection and returns every byte the server
/// wrote before closing.
pub fn send_line(addr: SocketAddr, line: &str) -> Vec<u8> {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream
        .set_read_timeout(Some(std::time::Duration::from_secs(10)))
        .unwrap();
    stream.write_all(line.as_bytes()).unwrap();
    stream.write_all(b"\n").unwrap();
    let mut reply = Vec::new();
    let _ = stream.read_to_end(&mut reply);
    reply
}

/// Lookup table with `n` synthetic points `SIM-<i>/FC-1.CTRL-<i>.T` mapped to
/// `SIM.AIR.E<i>.T`.
pub fn synthetic_lookup(n: usize) -> LookupTable {
    let mut table = LookupTable::new();
    for i in 0..n {
        table
            .insert(
                parse_network_name(&format!("SIM-{i}/FC-1.CTRL-{i}.T")).unwrap(),
                parse_system_name(&format!("SIM.AIR.E{i}.T")).unwrap(),
            )
            .unwrap();
    }
    table
}

/// Independent reference implementations for the summarizers. Timestamps
/// are unix seconds; nothing here touches chrono.
pub mod oracle {
    pub fn period_start(secs: i64, period: i64) -> i64 {
        secs - secs.rem_euclid(period)
    }

    /// (period start, mean, min, max, n) by naive fold.
    pub fn fold(samples: &[(i64, f64)], period: i64) -> Vec<(i64, f64, f64, f64, usize)> {
        let mut periods: Vec<i64> = samples.iter().map(|(t, _)| period_start(*t, period)).collect();
        periods.dedup();
        periods
            .into_iter()
            .map(|p| {
                let vals: Vec<f64> = samples
                    .iter()
                    .filter(|(t, _)| period_start(*t, period) == p)
                    .map(|(_, v)| *v)
                    .collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (p, mean, min, max, n)
            })
            .collect()
    }

    /// Episode counts per period. Splits the trace at gaps, then at compliant
    /// samples; every remaining chunk is one maximal violating run.
    pub fn episode_counts(
        samples: &[(i64, f64)],
        violates: impl Fn(f64) -> bool,
        delay: i64,
        base_resolution: i64,
        period: i64,
    ) -> Vec<(i64, u64)> {
        let mut counts: Vec<(i64, u64)> = Vec::new();
        for (t, _) in samples {
            let p = period_start(*t, period);
            if counts.last().map(|c| c.0) != Some(p) {
                counts.push((p, 0));
            }
        }
        let mut segments: Vec<&[(i64, f64)]> = Vec::new();
        let mut start = 0;
        for i in 1..=samples.len() {
            if i == samples.len() || samples[i].0 - samples[i - 1].0 > 2 * base_resolution {
                segments.push(&samples[start..i]);
                start = i;
            }
        }
        for seg in segments {
            for run in seg.split(|(_, v)| !violates(*v)).filter(|r| !r.is_empty()) {
                let duration = run[run.len() - 1].0 - run[0].0;
                if duration >= delay {
                    let p = period_start(run[0].0, period);
                    counts.iter_mut().find(|c| c.0 == p).unwrap().1 += 1;
                }
            }
        }
        counts
    }
}
