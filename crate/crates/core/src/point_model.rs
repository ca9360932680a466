//! Point naming conventions.
//!
//! Two identities exist for every BAS point:
//!
//! * the system-context name `BuildingID.SysID.BASID.PointID`, which says what
//!   equipment or room a point belongs to, and
//! * the network-context name `DeviceID/TrunkID.FieldControllerID.PointType`,
//!   which is what the controls network actually reports.
//!
//! A [`LookupTable`] bridges the two.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// SysID used for points hosted by a room; the BASID is then the room number.
pub const ROOM_SYSTEM: &str = "RM";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed point name {input:?}: {reason}")]
pub struct MalformedName {
    pub input: String,
    pub reason: &'static str,
}

impl MalformedName {
    fn new(input: &str, reason: &'static str) -> Self {
        Self {
            input: input.to_owned(),
            reason,
        }
    }
}

#[derive(Debug, Error)]
pub enum LookupError {
    #[error("unknown point {0:?}: not in lookup table")]
    UnknownPoint(String),
    #[error("duplicate lookup key {key:?} on line {line}")]
    DuplicateKey { key: String, line: u64 },
    #[error("lookup table header must be \"network,system\", found {0:?}")]
    BadHeader(Vec<String>),
    #[error("lookup table line {line}: {source}")]
    BadEntry { line: u64, source: MalformedName },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_segment(input: &str, segment: &str, forbidden: &[char]) -> Result<(), MalformedName> {
    if segment.is_empty() {
        return Err(MalformedName::new(input, "empty segment"));
    }
    if segment.chars().any(char::is_control) {
        return Err(MalformedName::new(input, "control character in segment"));
    }
    if segment.contains(forbidden) {
        return Err(MalformedName::new(input, "delimiter inside segment"));
    }
    Ok(())
}

/// System-context point identity, `BuildingID.SysID.BASID.PointID`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PointName {
    building_id: String,
    sys_id: String,
    bas_id: String,
    point_id: String,
}

impl PointName {
    pub fn new(
        building_id: impl Into<String>,
        sys_id: impl Into<String>,
        bas_id: impl Into<String>,
        point_id: impl Into<String>,
    ) -> Result<Self, MalformedName> {
        let name = Self {
            building_id: building_id.into(),
            sys_id: sys_id.into(),
            bas_id: bas_id.into(),
            point_id: point_id.into(),
        };
        let text = name.to_string();
        for segment in [&name.building_id, &name.sys_id, &name.bas_id, &name.point_id] {
            check_segment(&text, segment, &['.'])?;
        }
        Ok(name)
    }

    pub fn building_id(&self) -> &str {
        &self.building_id
    }

    pub fn sys_id(&self) -> &str {
        &self.sys_id
    }

    pub fn bas_id(&self) -> &str {
        &self.bas_id
    }

    pub fn point_id(&self) -> &str {
        &self.point_id
    }

    /// `BuildingID.SysID.BASID`, the key a BIM element is bound to.
    pub fn equipment(&self) -> String {
        format!("{}.{}.{}", self.building_id, self.sys_id, self.bas_id)
    }

    pub fn is_room_hosted(&self) -> bool {
        self.sys_id == ROOM_SYSTEM
    }

    /// Same equipment, different point id.
    pub fn with_point_id(&self, point_id: &str) -> Result<Self, MalformedName> {
        Self::new(
            self.building_id.clone(),
            self.sys_id.clone(),
            self.bas_id.clone(),
            point_id,
        )
    }
}

/// Parses `BuildingID.SysID.BASID.PointID`. Exactly three dots are required.
pub fn parse_system_name(text: &str) -> Result<PointName, MalformedName> {
    let segments: Vec<&str> = text.split('.').collect();
    if segments.len() != 4 {
        return Err(MalformedName::new(text, "expected exactly four '.'-separated segments"));
    }
    PointName::new(segments[0], segments[1], segments[2], segments[3])
}

impl fmt::Display for PointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}.{}.{}",
            self.building_id, self.sys_id, self.bas_id, self.point_id
        )
    }
}

impl FromStr for PointName {
    type Err = MalformedName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_system_name(s)
    }
}

impl TryFrom<String> for PointName {
    type Error = MalformedName;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_system_name(&value)
    }
}

impl From<PointName> for String {
    fn from(value: PointName) -> Self {
        value.to_string()
    }
}

/// Network-context point identity, `DeviceID/TrunkID.FieldControllerID.PointType`.
///
/// The field controller segment may itself contain dots and spaces
/// (`CARMA METER - EHP6.Analog Values`), so parsing splits on the first `/`,
/// then takes the trunk up to the first dot and the point type after the last.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NetworkPointName {
    device_id: String,
    trunk_id: String,
    field_controller_id: String,
    point_type: String,
}

impl NetworkPointName {
    pub fn new(
        device_id: impl Into<String>,
        trunk_id: impl Into<String>,
        field_controller_id: impl Into<String>,
        point_type: impl Into<String>,
    ) -> Result<Self, MalformedName> {
        let name = Self {
            device_id: device_id.into(),
            trunk_id: trunk_id.into(),
            field_controller_id: field_controller_id.into(),
            point_type: point_type.into(),
        };
        let text = name.to_string();
        check_segment(&text, &name.device_id, &['/'])?;
        check_segment(&text, &name.trunk_id, &['.'])?;
        check_segment(&text, &name.field_controller_id, &[])?;
        check_segment(&text, &name.point_type, &['.'])?;
        Ok(name)
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn trunk_id(&self) -> &str {
        &self.trunk_id
    }

    pub fn field_controller_id(&self) -> &str {
        &self.field_controller_id
    }

    pub fn point_type(&self) -> &str {
        &self.point_type
    }
}

pub fn parse_network_name(text: &str) -> Result<NetworkPointName, MalformedName> {
    let (device, rest) = text
        .split_once('/')
        .ok_or_else(|| MalformedName::new(text, "missing '/' after device id"))?;
    let (Some(first), Some(last)) = (rest.find('.'), rest.rfind('.')) else {
        return Err(MalformedName::new(text, "expected at least two '.' after '/'"));
    };
    if first == last {
        return Err(MalformedName::new(text, "expected at least two '.' after '/'"));
    }
    NetworkPointName::new(device, &rest[..first], &rest[first + 1..last], &rest[last + 1..])
}

impl fmt::Display for NetworkPointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}.{}.{}",
            self.device_id, self.trunk_id, self.field_controller_id, self.point_type
        )
    }
}

impl FromStr for NetworkPointName {
    type Err = MalformedName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_network_name(s)
    }
}

impl TryFrom<String> for NetworkPointName {
    type Error = MalformedName;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_network_name(&value)
    }
}

impl From<NetworkPointName> for String {
    fn from(value: NetworkPointName) -> Self {
        value.to_string()
    }
}

/// Canonical text of either naming convention.
pub fn format_name(name: &dyn fmt::Display) -> String {
    name.to_string()
}

/// Network name → system name, loaded from a `network,system` CSV.
#[derive(Debug, Clone, Default)]
pub struct LookupTable {
    entries: HashMap<String, PointName>,
}

#[derive(Debug, Deserialize)]
struct LookupRow {
    network: String,
    system: String,
}

impl LookupTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LookupError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv(file)
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, LookupError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if headers != ["network", "system"] {
            return Err(LookupError::BadHeader(headers));
        }
        let mut table = Self::new();
        for row in rdr.deserialize::<LookupRow>() {
            let row = row?;
            // header is line 1
            let line = table.entries.len() as u64 + 2;
            let network = parse_network_name(&row.network).map_err(|source| LookupError::BadEntry { line, source })?;
            let system = parse_system_name(&row.system).map_err(|source| LookupError::BadEntry { line, source })?;
            table
                .insert(network, system)
                .map_err(|key| LookupError::DuplicateKey { key, line })?;
        }
        Ok(table)
    }

    /// Adds a mapping; returns the canonical key back if it is already taken.
    pub fn insert(&mut self, network: NetworkPointName, system: PointName) -> Result<(), String> {
        let key = network.to_string();
        if self.entries.contains_key(&key) {
            return Err(key);
        }
        self.entries.insert(key, system);
        Ok(())
    }

    pub fn resolve(&self, net: &NetworkPointName) -> Result<&PointName, LookupError> {
        let key = net.to_string();
        self.entries.get(&key).ok_or(LookupError::UnknownPoint(key))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by network key.
    pub fn entries(&self) -> Vec<(&str, &PointName)> {
        let mut out: Vec<_> = self.entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        out.sort();
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), LookupError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["network", "system"])?;
        for (network, system) in self.entries() {
            wtr.write_record([network, &system.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn resolve<'a>(table: &'a LookupTable, net: &NetworkPointName) -> Result<&'a PointName, LookupError> {
    table.resolve(net)
}
