//! Summary export and BIM mapping.
//!
//! A summary CSV is a pivot of one `(metric, granularity)` table: the header
//! holds equipment ids (`Building.Sys.BASID`), each row is one period (newest
//! first) and each cell is the comma-joined tuple of that equipment's point
//! values in a fixed point order. Missing values are written as a sentinel.
//!
//! Mapping follows three steps. [`build_3d`] reorders the columns to BIM
//! element order and splits every cell into `[timestamp, v1, .., vP]`.
//! [`select_time`] then picks one row and transposes it to `[point][element]`,
//! and [`map_frame`] writes that frame into the [`BimRegistry`] parameters.
//! Only one element type (one point order) is mapped per file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch_analytics::{Granularity, Metric, SummaryTable, PERIOD_FORMAT};

pub const DEFAULT_SENTINEL: f64 = 555_555.0;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("BIM element {element_id} ({bas_id}) has no column in the summary CSV")]
    MissingColumn { element_id: i64, bas_id: String },
    #[error("row {row}, column {column}: cannot parse {text:?} as point values")]
    BadCell { row: usize, column: String, text: String },
    #[error("cell tuples have different lengths ({expected} vs {found} at row {row}, column {column})")]
    Ragged {
        expected: usize,
        found: usize,
        row: usize,
        column: String,
    },
    #[error("summary rows must be newest first with distinct timestamps (row {0})")]
    Unordered(usize),
    #[error("time index {index} out of range ({rows} rows)")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("frame shape {found:?} does not match {expected:?} (points x elements)")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("summary value for {point} at {period} equals the sentinel")]
    SentinelCollision { point: String, period: String },
    #[error("registry: {0}")]
    Registry(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows to include in an export, by period start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExportWindow {
    /// Inclusive.
    pub from: Option<DateTime<Utc>>,
    /// Exclusive.
    pub to: Option<DateTime<Utc>>,
    /// Keep only the newest N rows.
    pub last: Option<usize>,
}

impl ExportWindow {
    pub fn all() -> Self {
        Self::default()
    }

    fn contains(&self, t: DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| t >= f) && self.to.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRow {
    pub timestamp: String,
    /// One comma-joined value tuple per column.
    pub cells: Vec<String>,
}

/// In-memory form of a summary CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SummaryCsv {
    pub columns: Vec<String>,
    pub rows: Vec<CsvRow>,
}

pub fn format_value(v: f64) -> String {
    v.to_string()
}

pub fn summary_file_name(metric: Metric, granularity: Granularity) -> String {
    format!("summary_{metric}_{granularity}.csv")
}

/// Sidecar listing the point order of a summary CSV, one point id per line.
pub fn points_file_name(metric: Metric, granularity: Granularity) -> String {
    format!("summary_{metric}_{granularity}.points")
}

/// Pivots a summary table into the CSV shape. Columns are every equipment id
/// with at least one point in `point_order`, sorted; rows are the periods in
/// `window`, newest first.
pub fn emit_summary_csv(
    table: &SummaryTable,
    point_order: &[String],
    window: &ExportWindow,
    sentinel: f64,
) -> Result<SummaryCsv, ExportError> {
    let wanted: BTreeSet<&str> = point_order.iter().map(String::as_str).collect();
    let mut values: HashMap<(DateTime<Utc>, String, &str), f64> = HashMap::new();
    let mut columns = BTreeSet::new();
    let mut periods = BTreeSet::new();
    for r in table.records() {
        let Some(&point_id) = wanted.get(r.point.point_id()) else {
            continue;
        };
        if r.value == sentinel {
            return Err(ExportError::SentinelCollision {
                point: r.point.to_string(),
                period: r.period_start.format(PERIOD_FORMAT).to_string(),
            });
        }
        let equipment = r.point.equipment();
        columns.insert(equipment.clone());
        if window.contains(r.period_start) {
            periods.insert(r.period_start);
        }
        values.insert((r.period_start, equipment, point_id), r.value);
    }
    let columns: Vec<String> = columns.into_iter().collect();
    let keep = window.last.unwrap_or(usize::MAX);
    let rows = periods
        .into_iter()
        .rev()
        .take(keep)
        .map(|period| CsvRow {
            timestamp: period.format(PERIOD_FORMAT).to_string(),
            cells: columns
                .iter()
                .map(|col| {
                    point_order
                        .iter()
                        .map(|p| {
                            let v = values.get(&(period, col.clone(), p.as_str())).copied();
                            format_value(v.unwrap_or(sentinel))
                        })
                        .collect::<Vec<_>>()
                        .join(", ")
                })
                .collect(),
        })
        .collect();
    Ok(SummaryCsv { columns, rows })
}

impl SummaryCsv {
    pub fn write<W: Write>(&self, mut writer: W) -> Result<(), ExportError> {
        let mut header = csv::Writer::from_writer(Vec::new());
        header.write_record(&self.columns)?;
        let header = header.into_inner().map_err(|e| e.into_error())?;
        if self.columns.is_empty() {
            writer.write_all(b"\"\"\n")?;
        } else {
            writer.write_all(b"\"\",")?;
            writer.write_all(&header)?;
        }
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in &self.rows {
            wtr.write_field(&row.timestamp)?;
            for cell in &row.cells {
                wtr.write_field(cell)?;
            }
            wtr.write_record(None::<&[u8]>)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, ExportError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut rows: Vec<CsvRow> = Vec::new();
        let mut prev: Option<NaiveDateTime> = None;
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let mut fields = record.iter();
            let timestamp = fields.next().unwrap_or_default().to_owned();
            if let Ok(t) = NaiveDateTime::parse_from_str(&timestamp, PERIOD_FORMAT) {
                if prev.is_some_and(|p| t >= p) {
                    return Err(ExportError::Unordered(i));
                }
                prev = Some(t);
            }
            rows.push(CsvRow {
                timestamp,
                cells: fields.map(str::to_owned).collect(),
            });
        }
        Ok(Self { columns, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExportError> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Writes the CSV and its point-order sidecar under their fixed names,
/// replacing earlier files atomically. Returns the CSV path.
pub fn write_summary(
    dir: &Path,
    metric: Metric,
    granularity: Granularity,
    csv: &SummaryCsv,
    point_order: &[String],
) -> Result<PathBuf, ExportError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(summary_file_name(metric, granularity));
    let tmp = path.with_extension("csv.tmp");
    csv.write(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
    std::fs::rename(&tmp, &path)?;

    let points = dir.join(points_file_name(metric, granularity));
    let tmp = points.with_extension("points.tmp");
    let mut body = point_order.join("\n");
    body.push('\n');
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, &points)?;
    Ok(path)
}

pub fn read_point_order(path: impl AsRef<Path>) -> Result<Vec<String>, ExportError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// One entry of a nested row: slot 0 is the row timestamp, the rest are values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Slot {
    Value(f64),
    Time(String),
}

impl Slot {
    pub fn value(&self) -> Option<f64> {
        match self {
            Slot::Value(v) => Some(*v),
            Slot::Time(_) => None,
        }
    }
}

/// `[element][time row][slot]`, elements in BIM order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nested3D {
    pub element_ids: Vec<i64>,
    pub timestamps: Vec<String>,
    pub data: Vec<Vec<Vec<Slot>>>,
}

impl Nested3D {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    /// Point values per row (P); zero when there are no elements or rows.
    pub fn width(&self) -> usize {
        self.data.first().and_then(|e| e.first()).map_or(0, |row| row.len() - 1)
    }
}

fn parse_cell(text: &str) -> Option<Vec<f64>> {
    text.split(',').map(|v| v.trim().parse::<f64>().ok()).collect()
}

/// Reorders CSV columns to `bim_order` (element id, BASID) and splits each
/// cell into a `[timestamp, values..]` list.
pub fn build_3d(csv: &SummaryCsv, bim_order: &[(i64, String)]) -> Result<Nested3D, ExportError> {
    let index: HashMap<&str, usize> = csv.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut width: Option<usize> = None;
    let mut data = Vec::with_capacity(bim_order.len());
    for (element_id, bas_id) in bim_order {
        let col = *index.get(bas_id.as_str()).ok_or_else(|| ExportError::MissingColumn {
            element_id: *element_id,
            bas_id: bas_id.clone(),
        })?;
        let mut rows = Vec::with_capacity(csv.rows.len());
        for (r, row) in csv.rows.iter().enumerate() {
            let text = row.cells.get(col).map(String::as_str).unwrap_or("");
            let values = parse_cell(text).ok_or_else(|| ExportError::BadCell {
                row: r,
                column: bas_id.clone(),
                text: text.to_owned(),
            })?;
            match width {
                Some(w) if w != values.len() => {
                    return Err(ExportError::Ragged {
                        expected: w,
                        found: values.len(),
                        row: r,
                        column: bas_id.clone(),
                    })
                }
                _ => width = Some(values.len()),
            }
            let mut slots = Vec::with_capacity(values.len() + 1);
            slots.push(Slot::Time(row.timestamp.clone()));
            slots.extend(values.into_iter().map(Slot::Value));
            rows.push(slots);
        }
        data.push(rows);
    }
    Ok(Nested3D {
        element_ids: bim_order.iter().map(|(id, _)| *id).collect(),
        timestamps: csv.rows.iter().map(|r| r.timestamp.clone()).collect(),
        data,
    })
}

/// Picks time row `selected_time` and transposes it to `[point][element]`.
pub fn select_time(all_data: &Nested3D, selected_time: usize) -> Result<Vec<Vec<f64>>, ExportError> {
    if selected_time >= all_data.rows() {
        return Err(ExportError::IndexOutOfRange {
            index: selected_time,
            rows: all_data.rows(),
        });
    }
    let Some(first) = all_data.data.first() else {
        return Ok(Vec::new());
    };
    let mut vals_to_map: Vec<Vec<f64>> = vec![Vec::new(); first[selected_time].len() - 1];
    for j in 0..all_data.data.len() {
        for k in 1..first[selected_time].len() {
            let v = all_data.data[j][selected_time][k]
                .value()
                .expect("only slot 0 holds a timestamp");
            vals_to_map[k - 1].insert(j, v);
        }
    }
    Ok(vals_to_map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimElement {
    pub element_id: i64,
    pub bas_id: String,
    /// Room the element is in; for room-hosted BASIDs this is the room itself.
    pub spatial_ref: Option<String>,
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct SeedEntry {
    element_id: i64,
    bas_id: String,
    #[serde(default)]
    room_id: Option<String>,
}

/// `Building.RM.Room` → `Room`.
fn room_of(bas_id: &str) -> Option<&str> {
    let mut parts = bas_id.split('.');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(_), Some(crate::point_model::ROOM_SYSTEM), Some(room), None) => Some(room),
        _ => None,
    }
}

/// Mock FM-BIM element registry, in BIM element order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BimRegistry {
    elements: Vec<BimElement>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MapReport {
    pub written: usize,
    /// Sentinel writes, as `(element_id, point_id)`.
    pub skipped: Vec<(i64, String)>,
}

impl BimRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        element_id: i64,
        bas_id: impl Into<String>,
        room_id: Option<String>,
    ) -> Result<(), ExportError> {
        let bas_id = bas_id.into();
        if self.elements.iter().any(|e| e.element_id == element_id) {
            return Err(ExportError::Registry(format!("duplicate element id {element_id}")));
        }
        if self.elements.iter().any(|e| e.bas_id == bas_id) {
            return Err(ExportError::Registry(format!("duplicate BASID {bas_id}")));
        }
        let spatial_ref = room_id.or_else(|| room_of(&bas_id).map(str::to_owned));
        self.elements.push(BimElement {
            element_id,
            bas_id,
            spatial_ref,
            parameters: BTreeMap::new(),
        });
        Ok(())
    }

    /// Loads `[{element_id, bas_id, room_id?}]`.
    pub fn from_seed_json<R: Read>(reader: R) -> Result<Self, ExportError> {
        let seed: Vec<SeedEntry> = serde_json::from_reader(reader)?;
        let mut registry = Self::new();
        for entry in seed {
            registry.push(entry.element_id, entry.bas_id, entry.room_id)?;
        }
        Ok(registry)
    }

    pub fn load_seed(path: impl AsRef<Path>) -> Result<Self, ExportError> {
        Self::from_seed_json(std::fs::File::open(path)?)
    }

    /// Applies a `bas_id,room_id` spatial table to equipment-hosted elements.
    pub fn apply_spatial_table<R: Read>(&mut self, reader: R) -> Result<usize, ExportError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if headers != ["bas_id", "room_id"] {
            return Err(ExportError::Registry(format!(
                "spatial table header must be \"bas_id,room_id\", found {headers:?}"
            )));
        }
        let mut applied = 0;
        for record in rdr.records() {
            let record = record?;
            let (Some(bas_id), Some(room)) = (record.get(0), record.get(1)) else {
                continue;
            };
            if let Some(e) = self
                .elements
                .iter_mut()
                .find(|e| e.bas_id == bas_id && room_of(bas_id).is_none())
            {
                e.spatial_ref = Some(room.to_owned());
                applied += 1;
            }
        }
        Ok(applied)
    }

    pub fn elements(&self) -> &[BimElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, element_id: i64) -> Option<&BimElement> {
        self.elements.iter().find(|e| e.element_id == element_id)
    }

    /// `(element_id, bas_id)` in BIM element order.
    pub fn order(&self) -> Vec<(i64, String)> {
        self.elements.iter().map(|e| (e.element_id, e.bas_id.clone())).collect()
    }

    /// Byte-stable JSON view of the registry.
    pub fn snapshot_model(&self) -> String {
        serde_json::to_string(self).expect("registry serializes")
    }
}

/// Writes `frame[k][j]` into element `j`'s parameter `point_order[k]`.
/// Validates the whole shape first so a mismatch writes nothing.
pub fn map_frame(
    frame: &[Vec<f64>],
    point_order: &[String],
    registry: &mut BimRegistry,
    sentinel: f64,
) -> Result<MapReport, ExportError> {
    let elements = registry.len();
    let found = (frame.len(), frame.first().map_or(0, Vec::len));
    let fits = if elements == 0 {
        frame.iter().all(Vec::is_empty)
    } else {
        frame.len() == point_order.len() && frame.iter().all(|row| row.len() == elements)
    };
    if !fits {
        return Err(ExportError::ShapeMismatch {
            expected: (point_order.len(), elements),
            found,
        });
    }
    let mut report = MapReport::default();
    for (k, point_id) in point_order.iter().enumerate().take(frame.len()) {
        for (j, element) in registry.elements.iter_mut().enumerate() {
            let value = frame[k][j];
            element.parameters.insert(point_id.clone(), value);
            report.written += 1;
            if value == sentinel {
                report.skipped.push((element.element_id, point_id.clone()));
            }
        }
    }
    Ok(report)
}
