//! Change-of-value ingestion.
//!
//! A COV line on the wire is `timestamp,deviceID,networkPointID,value` with the
//! timestamp in `YYYY-MM-DDThh:mm:ss±hhmm`. Lines are parsed, resolved to a
//! system-context [`PointName`](crate::point_model::PointName), keyed by the
//! MD5 of their canonical form and written to an [`EventStore`]. When the
//! store is unavailable the line goes to a [`BackupJournal`] instead, and
//! [`Ingestor::replay_backup`] drains it later.

mod ingestor;
mod journal;
mod server;
mod store;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset};
use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::point_model::{parse_network_name, MalformedName, NetworkPointName};

pub use ingestor::{IngestOutcome, Ingestor, LineOutcome, RejectCounters, ReplayReport};
pub use journal::{BackupJournal, Quarantine};
pub use server::{bind, serve, ServeOptions, SharedIngestor, ACK};
pub use store::{Document, EventStore, FlakyStore, IndexedStore, InsertOutcome, StoreFailure, StoreSwitch};

/// Wire timestamp format.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%z";

/// Env var overriding the backup journal path.
pub const JOURNAL_ENV: &str = "COVBRIDGE_JOURNAL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineError {
    #[error("expected 4 comma-separated fields, found {0}")]
    MalformedLine(usize),
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("bad value {0:?}")]
    BadValue(String),
    #[error(transparent)]
    MalformedName(#[from] MalformedName),
    #[error("unknown point {0:?}")]
    UnknownPoint(String),
}

impl LineError {
    /// Name of the rejection counter this error increments.
    pub fn counter(&self) -> &'static str {
        match self {
            LineError::MalformedLine(_) => "malformed_line",
            LineError::BadTimestamp(_) => "bad_timestamp",
            LineError::BadValue(_) => "bad_value",
            LineError::MalformedName(_) => "malformed_name",
            LineError::UnknownPoint(_) => "unknown_point",
        }
    }
}

/// MD5 of a canonical event line.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DocId([u8; 16]);

impl DocId {
    pub fn of(canonical_line: &str) -> Self {
        Self(Md5::digest(canonical_line.as_bytes()).into())
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocId({self})")
    }
}

impl FromStr for DocId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl From<DocId> for String {
    fn from(value: DocId) -> Self {
        value.to_string()
    }
}

impl TryFrom<String> for DocId {
    type Error = hex::FromHexError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

/// One timestamped reading as received from a BAS network device.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEvent {
    pub timestamp: DateTime<FixedOffset>,
    pub device_id: String,
    pub network_point: NetworkPointName,
    pub value: f64,
    /// The value exactly as it appeared on the wire; canonical lines reuse it
    /// so the doc id survives parse/format cycles.
    pub value_text: String,
    pub doc_id: DocId,
}

impl CovEvent {
    pub fn canonical_line(&self) -> String {
        canonical_line(&self.timestamp, &self.device_id, &self.network_point, &self.value_text)
    }
}

fn canonical_line(ts: &DateTime<FixedOffset>, device: &str, point: &NetworkPointName, value: &str) -> String {
    format!("{},{},{},{}", ts.format(TIMESTAMP_FORMAT), device, point, value)
}

pub fn compute_doc_id(event: &CovEvent) -> DocId {
    DocId::of(&event.canonical_line())
}

pub fn parse_timestamp(text: &str) -> Result<DateTime<FixedOffset>, LineError> {
    let ts = DateTime::parse_from_str(text, TIMESTAMP_FORMAT).map_err(|_| LineError::BadTimestamp(text.to_owned()))?;
    // chrono is lenient about the offset form; the wire format is not.
    if ts.format(TIMESTAMP_FORMAT).to_string() != text {
        return Err(LineError::BadTimestamp(text.to_owned()));
    }
    Ok(ts)
}

/// Parses one wire line. Surrounding whitespace on the line and on each field
/// is ignored.
pub fn parse_cov_line(line: &str) -> Result<CovEvent, LineError> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(LineError::MalformedLine(fields.len()));
    }
    let timestamp = parse_timestamp(fields[0])?;
    let device_id = fields[1];
    if device_id.is_empty() || device_id.chars().any(char::is_control) {
        return Err(MalformedName {
            input: device_id.to_owned(),
            reason: "empty or non-printable device id",
        }
        .into());
    }
    let network_point = parse_network_name(fields[2])?;
    let value_text = fields[3];
    let value: f64 = value_text
        .parse()
        .map_err(|_| LineError::BadValue(value_text.to_owned()))?;
    if !value.is_finite() {
        return Err(LineError::BadValue(value_text.to_owned()));
    }
    let doc_id = DocId::of(&canonical_line(&timestamp, device_id, &network_point, value_text));
    Ok(CovEvent {
        timestamp,
        device_id: device_id.to_owned(),
        network_point,
        value,
        value_text: value_text.to_owned(),
        doc_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE_LINE: &str = "2020-01-27T11:54:25-0500,DCCNCE-20,DCCNCE-20/FCB.BTU-20-01.AV10,612385";

    #[test]
    fn parses_wire_line() {
        let e = parse_cov_line(SAMPLE_LINE).unwrap();
        assert_eq!(e.timestamp.to_rfc3339(), "2020-01-27T11:54:25-05:00");
        assert_eq!(e.device_id, "DCCNCE-20");
        assert_eq!(e.network_point.to_string(), "DCCNCE-20/FCB.BTU-20-01.AV10");
        assert_eq!(e.value, 612385.0);
        assert_eq!(e.canonical_line(), SAMPLE_LINE);
    }

    #[test]
    fn strips_padding() {
        let padded = "  2020-01-27T11:54:56-0500,DCCNCE-22,DCCNCE-22/FCB.RFC-22-4.DA-T,48.40702 \n";
        let plain = "2020-01-27T11:54:56-0500,DCCNCE-22,DCCNCE-22/FCB.RFC-22-4.DA-T,48.40702";
        assert_eq!(parse_cov_line(padded).unwrap(), parse_cov_line(plain).unwrap());
        let spaced = "2020-01-27T11:54:56-0500 , DCCNCE-22 ,DCCNCE-22/FCB.RFC-22-4.DA-T, 48.40702";
        assert_eq!(parse_cov_line(spaced).unwrap(), parse_cov_line(plain).unwrap());
    }

    #[test]
    fn rejects_by_kind() {
        assert_eq!(parse_cov_line("a,b,c"), Err(LineError::MalformedLine(3)));
        assert_eq!(parse_cov_line(""), Err(LineError::MalformedLine(1)));
        assert!(matches!(
            parse_cov_line("2020-01-27 11:54:25,D,D/T.C.P,1"),
            Err(LineError::BadTimestamp(_))
        ));
        // colon offset is not the wire format
        assert!(matches!(
            parse_cov_line("2020-01-27T11:54:25-05:00,D,D/T.C.P,1"),
            Err(LineError::BadTimestamp(_))
        ));
        assert!(matches!(
            parse_cov_line("2020-01-27T11:54:25-0500,D,D/T.C.P,abc"),
            Err(LineError::BadValue(_))
        ));
        assert!(matches!(
            parse_cov_line("2020-01-27T11:54:25-0500,D,D/T.C.P,NaN"),
            Err(LineError::BadValue(_))
        ));
        assert!(matches!(
            parse_cov_line("2020-01-27T11:54:25-0500,D,T.C.P,1"),
            Err(LineError::MalformedName(_))
        ));
        assert!(matches!(
            parse_cov_line("2020-01-27T11:54:25-0500,,D/T.C.P,1"),
            Err(LineError::MalformedName(_))
        ));
    }

    #[test]
    fn doc_id_is_lower_hex_and_deterministic() {
        let e = parse_cov_line(SAMPLE_LINE).unwrap();
        let id = compute_doc_id(&e);
        assert_eq!(id, e.doc_id);
        let text = id.to_string();
        assert_eq!(text.len(), 32);
        assert!(text.chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c)));
        assert_eq!(text.parse::<DocId>().unwrap(), id);
    }

    #[test]
    fn value_text_is_preserved() {
        let a = parse_cov_line("2020-01-27T11:54:25-0500,D,D/T.C.P,1.50").unwrap();
        let b = parse_cov_line("2020-01-27T11:54:25-0500,D,D/T.C.P,1.5").unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.canonical_line().ends_with(",1.50"));
        assert_ne!(a.doc_id, b.doc_id);
    }
}
