//! Simulated BAS field network.
//!
//! Each [`SimPoint`] samples a generator on its own interval and emits a COV
//! line when the value moves more than its threshold away from the last
//! emitted value. The controller merges all points in time order into a
//! [`Buffer`], which releases batches per time window; the streamer sends each
//! batch to a [`LineSink`] while a [`FaultSchedule`] severs, delays or
//! duplicates sends and toggles the store through [`FaultHooks`].
//!
//! Time is simulated: nothing sleeps unless `realtime` is set.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, FixedOffset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cov_ingest::{StoreSwitch, ACK, TIMESTAMP_FORMAT};
use crate::point_model::{LookupTable, NetworkPointName, PointName};

pub const DEFAULT_SAMPLE_INTERVAL: u32 = 5;
pub const DEFAULT_BUFFER_CAPACITY: usize = 10_000;
/// Buffer window as a multiple of the smallest sample interval.
pub const DEFAULT_WINDOW_FACTOR: u64 = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("point {point}: {reason}")]
    InvalidPoint { point: String, reason: &'static str },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Signal shape, as a function of seconds since the scenario start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Generator {
    Sine {
        amplitude: f64,
        /// Seconds.
        period: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Repeating occupancy pattern: 1 for the first `on` seconds of every
    /// `period`, shifted by `phase`, else 0.
    Schedule {
        period: f64,
        on: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant {
        value: f64,
    },
    Ramp {
        /// Units per second.
        slope: f64,
        #[serde(default)]
        start: f64,
    },
}

impl Generator {
    pub fn value_at(&self, t: f64) -> f64 {
        match *self {
            Generator::Sine {
                amplitude,
                period,
                offset,
            } => offset + amplitude * (std::f64::consts::TAU * t / period).sin(),
            Generator::Schedule { period, on, phase } => {
                if (t - phase).rem_euclid(period) < on {
                    1.0
                } else {
                    0.0
                }
            }
            Generator::Constant { value } => value,
            Generator::Ramp { slope, start } => start + slope * t,
        }
    }

    fn is_discrete(&self) -> bool {
        matches!(self, Generator::Schedule { .. })
    }
}

fn default_interval() -> u32 {
    DEFAULT_SAMPLE_INTERVAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub network_point: NetworkPointName,
    /// System name registered for this point in [`Scenario::lookup_table`].
    #[serde(default)]
    pub system: Option<PointName>,
    pub generator: Generator,
    /// Standard deviation of additive Gaussian noise; ignored for schedules.
    #[serde(default)]
    pub noise: f64,
    pub cov_threshold: f64,
    /// Seconds.
    #[serde(default = "default_interval")]
    pub sample_interval: u32,
}

impl SimPoint {
    pub fn new(network_point: NetworkPointName, generator: Generator, cov_threshold: f64) -> Self {
        Self {
            network_point,
            system: None,
            generator,
            noise: 0.0,
            cov_threshold,
            sample_interval: DEFAULT_SAMPLE_INTERVAL,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |reason| SimError::InvalidPoint {
            point: self.network_point.to_string(),
            reason,
        };
        if self.cov_threshold.is_nan() || self.cov_threshold < 0.0 {
            return Err(invalid("cov_threshold must be >= 0"));
        }
        if self.sample_interval == 0 {
            return Err(invalid("sample_interval must be > 0"));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(invalid("noise must be a finite standard deviation"));
        }
        match self.generator {
            Generator::Sine { period, .. } | Generator::Schedule { period, .. } if period.is_nan() || period <= 0.0 => {
                Err(invalid("period must be > 0"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, t: f64, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.generator.value_at(t);
        if self.noise == 0.0 || self.generator.is_discrete() {
            return v;
        }
        let normal = Normal::new(0.0, self.noise).expect("validated sigma");
        v + normal.sample(rng)
    }
}

/// Per-point runtime state: last emitted value and the noise stream.
#[derive(Debug, Clone)]
pub struct PointState {
    last_emitted: Option<f64>,
    rng: ChaCha8Rng,
}

impl PointState {
    /// Every point gets its own stream of the scenario seed.
    pub fn new(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        Self {
            last_emitted: None,
            rng,
        }
    }

    pub fn last_emitted(&self) -> Option<f64> {
        self.last_emitted
    }
}

pub fn format_line(at: &DateTime<FixedOffset>, point: &NetworkPointName, value: f64) -> String {
    format!(
        "{},{},{},{}",
        at.format(TIMESTAMP_FORMAT),
        point.device_id(),
        point,
        value
    )
}

/// Samples `point` at `at` (`elapsed` seconds into the run) and returns the
/// wire line if the change exceeds the threshold.
pub fn tick(point: &SimPoint, state: &mut PointState, at: DateTime<FixedOffset>, elapsed: f64) -> Option<String> {
    let value = point.sample(elapsed, &mut state.rng);
    let emit = match state.last_emitted {
        None => true,
        Some(last) => (value - last).abs() > point.cov_threshold,
    };
    if !emit {
        return None;
    }
    state.last_emitted = Some(value);
    Some(format_line(&at, &point.network_point, value))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Emission {
    /// Seconds since the scenario start.
    pub elapsed: u64,
    pub point: usize,
    pub line: String,
}

/// Time-synchronizing buffer between the controller and the streamer.
#[derive(Debug, Clone)]
pub struct Buffer {
    window: u64,
    capacity: usize,
    current: Option<u64>,
    contents: Vec<Emission>,
}

impl Buffer {
    pub fn new(window: u64, capacity: usize) -> Self {
        Self {
            window: window.max(1),
            capacity: capacity.max(1),
            current: None,
            contents: Vec::new(),
        }
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    /// Adds an emission; returns the previous batch if this one starts a new
    /// window or the buffer is full.
    pub fn push(&mut self, e: Emission) -> Option<Vec<Emission>> {
        let slot = e.elapsed / self.window;
        let flushed = if self.current.is_some_and(|c| c != slot) || self.contents.len() >= self.capacity {
            Some(std::mem::take(&mut self.contents))
        } else {
            None
        };
        self.current = Some(slot);
        self.contents.push(e);
        flushed
    }

    pub fn flush(&mut self) -> Option<Vec<Emission>> {
        self.current = None;
        (!self.contents.is_empty()).then(|| std::mem::take(&mut self.contents))
    }
}

/// Half-open window `[from, to)` in seconds since the scenario start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window(pub u64, pub u64);

impl Window {
    pub fn contains(&self, t: u64) -> bool {
        self.0 <= t && t < self.1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    /// Sink unreachable; lines are retained and retried afterwards.
    #[serde(default)]
    pub sever: Vec<Window>,
    /// Lines are held back and sent when the window ends.
    #[serde(default)]
    pub delay: Vec<Window>,
    /// Chance that an acknowledged line is sent a second time.
    #[serde(default)]
    pub duplicate_probability: f64,
    /// The receiving store is down; signalled through [`FaultHooks`].
    #[serde(default)]
    pub store_down: Vec<Window>,
}

impl FaultSchedule {
    fn severed(&self, t: u64) -> bool {
        self.sever.iter().any(|w| w.contains(t))
    }

    fn delay_end(&self, t: u64) -> Option<u64> {
        self.delay.iter().filter(|w| w.contains(t)).map(|w| w.1).max()
    }

    fn store_down_at(&self, t: u64) -> bool {
        self.store_down.iter().any(|w| w.contains(t))
    }
}

/// Receives store-down transitions from the streamer.
pub trait FaultHooks {
    fn store_down(&mut self, down: bool);
}

impl FaultHooks for () {
    fn store_down(&mut self, _down: bool) {}
}

impl FaultHooks for StoreSwitch {
    fn store_down(&mut self, down: bool) {
        self.set_up(!down);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Acked,
    /// The sink closed without acknowledging.
    NotAcked,
}

pub trait LineSink {
    /// An `Err` means the line never reached the sink.
    fn send(&mut self, line: &str) -> io::Result<Delivery>;
}

impl<F: FnMut(&str) -> io::Result<Delivery>> LineSink for F {
    fn send(&mut self, line: &str) -> io::Result<Delivery> {
        self(line)
    }
}

/// Sends lines over TCP and waits for the one-byte acknowledgement.
#[derive(Debug)]
pub struct TcpSink {
    addr: SocketAddr,
    persistent: bool,
    timeout: Duration,
    conn: Option<TcpStream>,
}

impl TcpSink {
    /// One connection per line, matching the server's default mode.
    pub fn new(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "sink address resolves to nothing"))?;
        Ok(Self {
            addr,
            persistent: false,
            timeout: Duration::from_secs(10),
            conn: None,
        })
    }

    /// Reuses one connection for many lines; needs a persistent server.
    pub fn persistent(mut self, persistent: bool) -> Self {
        self.persistent = persistent;
        self
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }
}

impl LineSink for TcpSink {
    fn send(&mut self, line: &str) -> io::Result<Delivery> {
        let mut stream = match self.conn.take() {
            Some(s) => s,
            None => self.connect()?,
        };
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        let mut ack = [0u8; 1];
        let delivery = match stream.read(&mut ack) {
            Ok(1) if ack[0] == ACK => Delivery::Acked,
            Ok(_) => Delivery::NotAcked,
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => Delivery::NotAcked,
            Err(e) => return Err(e),
        };
        if self.persistent && delivery == Delivery::Acked {
            self.conn = Some(stream);
        }
        Ok(delivery)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Seconds; defaults to ten sample intervals of the fastest point.
    #[serde(default)]
    pub window: Option<u64>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            window: None,
            capacity: DEFAULT_BUFFER_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub start: DateTime<FixedOffset>,
    /// Seconds of simulated time; samples are taken at `0, interval, ..` below it.
    pub horizon: u64,
    pub points: Vec<SimPoint>,
    #[serde(default)]
    pub buffer: BufferConfig,
    #[serde(default)]
    pub faults: FaultSchedule,
    /// Sleep between batches to follow wall-clock time.
    #[serde(default)]
    pub realtime: bool,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scenario: Self = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for p in &self.points {
            p.validate()?;
        }
        let p = self.faults.duplicate_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::InvalidScenario(format!(
                "duplicate_probability {p} outside [0, 1]"
            )));
        }
        let windows = self
            .faults
            .sever
            .iter()
            .chain(&self.faults.delay)
            .chain(&self.faults.store_down);
        if let Some(w) = windows.into_iter().find(|w| w.0 > w.1) {
            return Err(SimError::InvalidScenario(format!("window {w:?} ends before it starts")));
        }
        Ok(())
    }

    pub fn buffer(&self) -> Buffer {
        let fastest = self
            .points
            .iter()
            .map(|p| p.sample_interval)
            .min()
            .unwrap_or(DEFAULT_SAMPLE_INTERVAL);
        let window = self.buffer.window.unwrap_or(DEFAULT_WINDOW_FACTOR * u64::from(fastest));
        Buffer::new(window, self.buffer.capacity)
    }

    /// Lookup table for every point that names its system point.
    pub fn lookup_table(&self) -> Result<LookupTable, SimError> {
        let mut table = LookupTable::new();
        for p in &self.points {
            if let Some(system) = &p.system {
                table
                    .insert(p.network_point.clone(), system.clone())
                    .map_err(|k| SimError::InvalidScenario(format!("duplicate network point {k}")))?;
            }
        }
        Ok(table)
    }

    /// Every emission of the run, ordered by time then point.
    pub fn emissions(&self) -> Vec<Emission> {
        let mut out = Vec::new();
        for (i, point) in self.points.iter().enumerate() {
            let mut state = PointState::new(self.seed, i);
            let step = u64::from(point.sample_interval);
            let mut t = 0;
            while t < self.horizon {
                let at = self.start + chrono::Duration::seconds(t as i64);
                if let Some(line) = tick(point, &mut state, at, t as f64) {
                    out.push(Emission {
                        elapsed: t,
                        point: i,
                        line,
                    });
                }
                t += step;
            }
        }
        // stable: per-point order is kept for equal times
        out.sort_by_key(|e| (e.elapsed, e.point));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    /// Every emitted line, in emission order.
    pub emitted: Vec<String>,
    /// Lines that reached the sink at least once.
    pub sent: usize,
    pub acked: usize,
    /// Extra sends injected by the duplicate fault.
    pub duplicates: usize,
    /// Reached the sink but got no acknowledgement.
    pub rejected: Vec<String>,
    /// Never reached the sink before the horizon.
    pub unsent: Vec<String>,
    pub batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub emitted: usize,
    pub sent: usize,
    pub acked: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub unsent: usize,
    pub batches: usize,
}

impl RunReport {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            emitted: self.emitted.len(),
            sent: self.sent,
            acked: self.acked,
            duplicates: self.duplicates,
            rejected: self.rejected.len(),
            unsent: self.unsent.len(),
            batches: self.batches,
        }
    }
}

struct Streamer<'a, S: LineSink, H: FaultHooks + ?Sized> {
    sink: &'a mut S,
    hooks: &'a mut H,
    faults: &'a FaultSchedule,
    rng: ChaCha8Rng,
    store_down: bool,
    retained: Vec<String>,
    held: Vec<(u64, String)>,
    report: RunReport,
}

impl<S: LineSink, H: FaultHooks + ?Sized> Streamer<'_, S, H> {
    fn set_clock(&mut self, now: u64) {
        let down = self.faults.store_down_at(now);
        if down != self.store_down {
            self.store_down = down;
            self.hooks.store_down(down);
        }
    }

    /// Sends one line; `false` if the sink was unreachable.
    fn deliver(&mut self, line: &str) -> bool {
        match self.sink.send(line) {
            Err(_) => false,
            Ok(delivery) => {
                self.report.sent += 1;
                match delivery {
                    Delivery::Acked => {
                        self.report.acked += 1;
                        let p = self.faults.duplicate_probability;
                        if p > 0.0 && self.rng.random_bool(p) {
                            self.report.duplicates += 1;
                            let _ = self.sink.send(line);
                        }
                    }
                    Delivery::NotAcked => self.report.rejected.push(line.to_owned()),
                }
                true
            }
        }
    }

    fn release_held(&mut self, now: u64) {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.held).into_iter().partition(|(t, _)| *t <= now);
        self.held = later;
        self.retained.extend(due.into_iter().map(|(_, l)| l));
    }

    /// Handles everything due at `now`, followed by `fresh` lines.
    fn run_at(&mut self, now: u64, fresh: Vec<String>) {
        self.set_clock(now);
        self.release_held(now);
        let mut queue = std::mem::take(&mut self.retained);
        for line in fresh {
            match self.faults.delay_end(now) {
                Some(end) => self.held.push((end, line)),
                None => queue.push(line),
            }
        }
        if self.faults.severed(now) {
            self.retained = queue;
            return;
        }
        let mut pending = queue.into_iter();
        for line in pending.by_ref() {
            if !self.deliver(&line) {
                self.retained.push(line);
                break;
            }
        }
        self.retained.extend(pending);
    }
}

/// Runs the scenario against `sink`. The returned report is ground truth for
/// what was emitted and what the sink saw.
pub fn stream<S: LineSink, H: FaultHooks + ?Sized>(scenario: &Scenario, sink: &mut S, hooks: &mut H) -> RunReport {
    let emissions = scenario.emissions();
    let mut buffer = scenario.buffer();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(u64::MAX);
    let mut streamer = Streamer {
        sink,
        hooks,
        faults: &scenario.faults,
        rng,
        store_down: false,
        retained: Vec::new(),
        held: Vec::new(),
        report: RunReport {
            emitted: emissions.iter().map(|e| e.line.clone()).collect(),
            ..RunReport::default()
        },
    };

    let mut last_flush: Option<u64> = None;
    let mut flush = |streamer: &mut Streamer<'_, S, H>, batch: Vec<Emission>| {
        let now = batch.last().map_or(0, |e| e.elapsed);
        if scenario.realtime {
            if let Some(prev) = last_flush {
                std::thread::sleep(Duration::from_secs(now.saturating_sub(prev)));
            }
        }
        last_flush = Some(now);
        streamer.report.batches += 1;
        streamer.run_at(now, batch.into_iter().map(|e| e.line).collect());
    };
    for e in emissions {
        if let Some(batch) = buffer.push(e) {
            flush(&mut streamer, batch);
        }
    }
    if let Some(batch) = buffer.flush() {
        flush(&mut streamer, batch);
    }

    // Drain whatever is still held or retained at the horizon.
    let mut now = scenario.horizon;
    loop {
        streamer.run_at(now, Vec::new());
        // anything still held is due strictly later
        match streamer.held.iter().map(|(t, _)| *t).min() {
            Some(t) => now = t,
            None => break,
        }
    }
    if streamer.store_down {
        streamer.hooks.store_down(false);
    }
    let mut report = streamer.report;
    report.unsent = std::mem::take(&mut streamer.retained);
    report.unsent.extend(streamer.held.into_iter().map(|(_, l)| l));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_model::parse_network_name;

    fn net(i: usize) -> NetworkPointName {
        parse_network_name(&format!("SIM-{i}/FC-1.CTRL-{i}.T")).unwrap()
    }

    fn scenario(points: Vec<SimPoint>, horizon: u64) -> Scenario {
        Scenario {
            seed: 7,
            start: DateTime::parse_from_rfc3339("2019-05-02T13:00:00-04:00").unwrap(),
            horizon,
            points,
            buffer: BufferConfig::default(),
            faults: FaultSchedule::default(),
            realtime: false,
        }
    }

    fn acking_sink(log: &mut Vec<String>) -> impl FnMut(&str) -> io::Result<Delivery> + '_ {
        move |line: &str| {
            log.push(line.to_owned());
            Ok(Delivery::Acked)
        }
    }

    #[test]
    fn constant_emits_once() {
        let mut p = SimPoint::new(net(0), Generator::Constant { value: 21.0 }, 0.5);
        assert_eq!(scenario(vec![p.clone()], 100_000).emissions().len(), 1);
        p.cov_threshold = 0.0;
        p.generator = Generator::Sine {
            amplitude: 0.0,
            period: 60.0,
            offset: 0.0,
        };
        assert_eq!(scenario(vec![p], 10_000).emissions().len(), 1);
    }

    #[test]
    fn ramp_emits_every_sample() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 1.0, start: 0.0 }, 0.5);
        p.sample_interval = 1;
        let lines: Vec<String> = scenario(vec![p], 10).emissions().into_iter().map(|e| e.line).collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "2019-05-02T13:00:00-0400,SIM-0,SIM-0/FC-1.CTRL-0.T,0");
        assert_eq!(lines[9], "2019-05-02T13:00:09-0400,SIM-0,SIM-0/FC-1.CTRL-0.T,9");
    }

    #[test]
    fn threshold_is_strict() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 0.1, start: 0.0 }, 0.5);
        p.sample_interval = 5;
        // 0.5 per sample is not above 0.5, so only every second sample emits
        let n = scenario(vec![p.clone()], 50).emissions().len();
        assert!(n < 10, "{n}");
        p.cov_threshold = 0.49;
        assert_eq!(scenario(vec![p], 50).emissions().len(), 10);
    }

    #[test]
    fn schedule_is_binary_and_noise_free() {
        let mut p = SimPoint::new(
            net(0),
            Generator::Schedule {
                period: 600.0,
                on: 300.0,
                phase: 0.0,
            },
            0.0,
        );
        p.noise = 3.0;
        let em = scenario(vec![p], 3600).emissions();
        assert_eq!(em.len(), 12);
        assert!(em.iter().all(|e| e.line.ends_with(",1") || e.line.ends_with(",0")));
    }

    #[test]
    fn reruns_are_identical() {
        let mut p = SimPoint::new(
            net(0),
            Generator::Sine {
                amplitude: 2.0,
                period: 900.0,
                offset: 21.0,
            },
            0.1,
        );
        p.noise = 0.2;
        let s = scenario(
            vec![
                p.clone(),
                SimPoint {
                    network_point: net(1),
                    ..p
                },
            ],
            7200,
        );
        assert_eq!(s.emissions(), s.emissions());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(other.emissions(), s.emissions());
    }

    #[test]
    fn buffer_keeps_point_order() {
        let mut buf = Buffer::new(10, 3);
        let e = |elapsed, point| Emission {
            elapsed,
            point,
            line: format!("{elapsed}/{point}"),
        };
        assert!(buf.push(e(0, 0)).is_none());
        assert!(buf.push(e(0, 1)).is_none());
        assert!(buf.push(e(5, 0)).is_none());
        let full = buf.push(e(5, 1)).unwrap();
        assert_eq!(full.len(), 3);
        let window = buf.push(e(10, 0)).unwrap();
        assert_eq!(window, vec![e(5, 1)]);
        assert_eq!(buf.flush().unwrap(), vec![e(10, 0)]);
        assert!(buf.flush().is_none());
    }

    #[test]
    fn clean_run_sends_everything() {
        let points = (0..3)
            .map(|i| {
                let mut p = SimPoint::new(
                    net(i),
                    Generator::Ramp {
                        slope: 0.3,
                        start: i as f64,
                    },
                    0.5,
                );
                p.sample_interval = 1;
                p
            })
            .collect();
        let s = scenario(points, 100);
        let mut log = Vec::new();
        let report = stream(&s, &mut acking_sink(&mut log), &mut ());
        assert_eq!(report.emitted.len(), 150);
        assert_eq!(report.sent, 150);
        assert_eq!(report.acked, 150);
        assert!(report.unsent.is_empty());
        assert_eq!(log, report.emitted);
    }

    #[test]
    fn severed_sink_retries_then_reports_unsent() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 1.0, start: 0.0 }, 0.5);
        p.sample_interval = 1;
        let mut s = scenario(vec![p], 100);
        s.buffer.window = Some(5);
        s.faults.sever = vec![Window(10, 20)];
        let mut log = Vec::new();
        let report = stream(&s, &mut acking_sink(&mut log), &mut ());
        assert_eq!(report.sent, 100);
        assert!(report.unsent.is_empty());
        // per-point order survives the outage
        assert_eq!(log, report.emitted);

        s.faults.sever = vec![Window(10, u64::MAX)];
        let mut log = Vec::new();
        let report = stream(&s, &mut acking_sink(&mut log), &mut ());
        assert_eq!(report.sent + report.unsent.len(), report.emitted.len());
        assert_eq!(report.sent, 10);
    }

    #[test]
    fn unreachable_sink_keeps_lines() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 1.0, start: 0.0 }, 0.5);
        p.sample_interval = 1;
        let s = scenario(vec![p], 30);
        let mut down = |_: &str| -> io::Result<Delivery> { Err(io::Error::from(io::ErrorKind::ConnectionRefused)) };
        let report = stream(&s, &mut down, &mut ());
        assert_eq!(report.sent, 0);
        assert_eq!(report.unsent, report.emitted);
    }

    #[test]
    fn delayed_lines_arrive_later() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 1.0, start: 0.0 }, 0.5);
        p.sample_interval = 1;
        let mut q = p.clone();
        q.network_point = net(1);
        let mut s = scenario(vec![p, q], 60);
        s.buffer.window = Some(5);
        s.faults.delay = vec![Window(10, 30)];
        let mut log = Vec::new();
        let report = stream(&s, &mut acking_sink(&mut log), &mut ());
        assert_eq!(report.sent, report.emitted.len());
        let mut a = log.clone();
        let mut b = report.emitted.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        for i in 0..2 {
            let tag = format!("SIM-{i}/");
            let per_point: Vec<&String> = log.iter().filter(|l| l.contains(&tag)).collect();
            let expected: Vec<&String> = report.emitted.iter().filter(|l| l.contains(&tag)).collect();
            assert_eq!(per_point, expected);
        }
    }

    #[test]
    fn duplicates_and_store_hooks() {
        let mut p = SimPoint::new(net(0), Generator::Ramp { slope: 1.0, start: 0.0 }, 0.5);
        p.sample_interval = 1;
        let mut s = scenario(vec![p], 1000);
        s.buffer.window = Some(10);
        s.faults.duplicate_probability = 0.1;
        s.faults.store_down = vec![Window(100, 300)];

        #[derive(Default)]
        struct Transitions(Vec<bool>);
        impl FaultHooks for Transitions {
            fn store_down(&mut self, down: bool) {
                self.0.push(down);
            }
        }
        let mut hooks = Transitions::default();
        let mut log = Vec::new();
        let report = stream(&s, &mut acking_sink(&mut log), &mut hooks);
        assert_eq!(hooks.0, [true, false]);
        assert_eq!(log.len(), report.sent + report.duplicates);
        assert!((50..150).contains(&report.duplicates), "{}", report.duplicates);
        let unique: std::collections::BTreeSet<&String> = log.iter().collect();
        assert_eq!(unique.len(), report.emitted.len());
    }

    #[test]
    fn scenario_json() {
        let s = Scenario::from_json(
            r#"{
                "seed": 1, "start": "2019-05-02T13:00:00-04:00", "horizon": 3600,
                "points": [{
                    "network_point": "DCCNCE-1/FC-1.VAV 1-23.ZN-T",
                    "system": "DCC.RM.DCC01-13.T",
                    "generator": {"kind": "sine", "amplitude": 1.5, "period": 3600},
                    "noise": 0.1, "cov_threshold": 0.2
                }],
                "faults": {"sever": [[10, 20]], "duplicate_probability": 0.05}
            }"#,
        )
        .unwrap();
        assert_eq!(s.points[0].sample_interval, DEFAULT_SAMPLE_INTERVAL);
        assert_eq!(s.buffer().window(), 50);
        assert_eq!(s.lookup_table().unwrap().len(), 1);
        assert!(Scenario::from_json(
            r#"{"seed":1,"start":"2019-05-02T13:00:00Z","horizon":1,"points":[],"faults":{"duplicate_probability":2}}"#
        )
        .is_err());
        assert!(Scenario::from_json(
            r#"{"seed":1,"start":"2019-05-02T13:00:00Z","horizon":1,"points":[{"network_point":"a/b.c.d","generator":{"kind":"constant","value":1},"cov_threshold":-1}]}"#
        )
        .is_err());
    }
}
