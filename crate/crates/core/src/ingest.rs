//! Snapshot feed parsing.
//!
//! A feed is a sequence of server updates, each listing the idle scooters and
//! their positions. Scooters that are being ridden show up with a `null` id
//! and are dropped here; the absence is what trip extraction later keys on.
//!
//! Two encodings are accepted:
//!
//! * JSONL, one update per line:
//!   `{"ts":"2019-02-02T12:00:00Z","scooters":[{"id":"abc","lat":33.7,"lon":-84.4}]}`
//! * CSV with header `ts,id,lat,lon`; consecutive rows sharing `ts` form one update.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{BBox, GeoPoint};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("snapshot timestamps must strictly increase: {prev} followed by {next}")]
    NonMonotonicTimestamp {
        prev: DateTime<Utc>,
        next: DateTime<Utc>,
    },
    #[error("unknown feed format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterObservation {
    pub scooter_id: String,
    pub position: GeoPoint,
}

/// One server update: every idle scooter and where it was parked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotBatch {
    pub ts: DateTime<Utc>,
    pub observations: Vec<ScooterObservation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedFormat {
    Jsonl,
    Csv,
}

impl FromStr for FeedFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(FeedFormat::Jsonl),
            "csv" => Ok(FeedFormat::Csv),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for FeedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedFormat::Jsonl => "jsonl",
            FeedFormat::Csv => "csv",
        })
    }
}

/// Record accounting for a parsed feed. `records` counts scooter entries, and
/// always equals `retained + in_use + duplicates`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub batches: u64,
    pub records: u64,
    pub retained: u64,
    pub in_use: u64,
    pub duplicates: u64,
}

/// Streaming parser over a snapshot feed. Yields batches in input order and
/// stops after the first error.
pub struct SnapshotReader<R: BufRead> {
    inner: Inner<R>,
    stats: IngestStats,
    prev_ts: Option<DateTime<Utc>>,
    done: bool,
}

enum Inner<R: BufRead> {
    Jsonl {
        reader: R,
        line: String,
        line_no: u64,
    },
    Csv {
        reader: Box<csv::Reader<R>>,
        record: csv::StringRecord,
        columns: Option<[usize; 4]>,
        pending: Option<PendingRow>,
    },
}

struct PendingRow {
    ts: DateTime<Utc>,
    id: Option<String>,
    position: Option<GeoPoint>,
}

/// Parses a snapshot stream. See [`SnapshotReader`].
pub fn parse_snapshot_stream<R: BufRead>(source: R, format: FeedFormat) -> SnapshotReader<R> {
    SnapshotReader::new(source, format)
}

/// Reads a whole feed into memory.
pub fn read_snapshots<R: BufRead>(
    source: R,
    format: FeedFormat,
) -> Result<(Vec<SnapshotBatch>, IngestStats), IngestError> {
    let mut reader = SnapshotReader::new(source, format);
    let batches = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((batches, reader.stats()))
}

impl<R: BufRead> SnapshotReader<R> {
    pub fn new(source: R, format: FeedFormat) -> Self {
        let inner = match format {
            FeedFormat::Jsonl => Inner::Jsonl {
                reader: source,
                line: String::new(),
                line_no: 0,
            },
            FeedFormat::Csv => Inner::Csv {
                reader: Box::new(
                    csv::ReaderBuilder::new()
                        .has_headers(true)
                        .trim(csv::Trim::All)
                        .from_reader(source),
                ),
                record: csv::StringRecord::new(),
                columns: None,
                pending: None,
            },
        };
        SnapshotReader {
            inner,
            stats: IngestStats::default(),
            prev_ts: None,
            done: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn next_batch(&mut self) -> Result<Option<SnapshotBatch>, IngestError> {
        let mut builder = BatchBuilder::default();
        let ts = match &mut self.inner {
            Inner::Jsonl {
                reader,
                line,
                line_no,
            } => loop {
                line.clear();
                if reader.read_line(line)? == 0 {
                    return Ok(None);
                }
                *line_no += 1;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: JsonLine<'_> =
                    serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord {
                        line: *line_no,
                        reason: e.to_string(),
                    })?;
                let ts = parse_ts(&raw.ts).map_err(|reason| IngestError::MalformedRecord {
                    line: *line_no,
                    reason,
                })?;
                for s in raw.scooters {
                    let position = match (s.lat, s.lon) {
                        (Some(lat), Some(lon)) => Some(GeoPoint { lat, lon }),
                        _ => None,
                    };
                    builder.push(s.id.as_deref(), position).map_err(|reason| {
                        IngestError::MalformedRecord {
                            line: *line_no,
                            reason,
                        }
                    })?;
                }
                break ts;
            },
            Inner::Csv {
                reader,
                record,
                columns,
                pending,
            } => {
                if columns.is_none() {
                    *columns = Some(csv_columns(reader)?);
                }
                let cols = columns.expect("header read above");
                let first = match pending.take() {
                    Some(row) => row,
                    None => match read_csv_row(reader, record, cols)? {
                        Some(row) => row,
                        None => return Ok(None),
                    },
                };
                let ts = first.ts;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                builder
                    .push(first.id.as_deref(), first.position)
                    .map_err(|reason| IngestError::MalformedRecord { line, reason })?;
                while let Some(row) = read_csv_row(reader, record, cols)? {
                    if row.ts != ts {
                        *pending = Some(row);
                        break;
                    }
                    let line = record.position().map(|p| p.line()).unwrap_or(0);
                    builder
                        .push(row.id.as_deref(), row.position)
                        .map_err(|reason| IngestError::MalformedRecord { line, reason })?;
                }
                ts
            }
        };

        if let Some(prev) = self.prev_ts {
            if ts <= prev {
                return Err(IngestError::NonMonotonicTimestamp { prev, next: ts });
            }
        }
        self.prev_ts = Some(ts);
        self.stats.batches += 1;
        self.stats.records += builder.records;
        self.stats.in_use += builder.in_use;
        self.stats.duplicates += builder.duplicates;
        self.stats.retained += builder.observations.len() as u64;
        Ok(Some(SnapshotBatch {
            ts,
            observations: builder.observations,
        }))
    }
}

impl<R: BufRead> Iterator for SnapshotReader<R> {
    type Item = Result<SnapshotBatch, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_batch() {
            Ok(Some(batch)) => Some(Ok(batch)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Default)]
struct BatchBuilder {
    observations: Vec<ScooterObservation>,
    seen: HashSet<String>,
    records: u64,
    in_use: u64,
    duplicates: u64,
}

impl BatchBuilder {
    fn push(&mut self, id: Option<&str>, position: Option<GeoPoint>) -> Result<(), String> {
        self.records += 1;
        let id = match id {
            Some(id) if !is_null_id(id) => id,
            _ => {
                self.in_use += 1;
                return Ok(());
            }
        };
        let position = position.ok_or_else(|| format!("scooter `{id}` has no coordinates"))?;
        if !position.is_valid() {
            return Err(format!(
                "scooter `{id}` has out-of-range coordinates {position}"
            ));
        }
        if !self.seen.insert(id.to_string()) {
            self.duplicates += 1;
            log::warn!("duplicate scooter id `{id}` within one snapshot; keeping the first");
            return Ok(());
        }
        self.observations.push(ScooterObservation {
            scooter_id: id.to_string(),
            position,
        });
        Ok(())
    }
}

fn is_null_id(id: &str) -> bool {
    let id = id.trim();
    id.is_empty() || id.eq_ignore_ascii_case("null")
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>, String> {
    let ts = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))?
        .with_timezone(&Utc);
    Ok(ts.with_nanosecond(0).unwrap_or(ts))
}

/// RFC 3339 with second resolution and a `Z` suffix.
pub fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[derive(Deserialize)]
struct JsonLine<'a> {
    #[serde(borrow)]
    ts: Cow<'a, str>,
    #[serde(default)]
    scooters: Vec<JsonScooter<'a>>,
}

#[derive(Deserialize)]
struct JsonScooter<'a> {
    #[serde(borrow, default)]
    id: Option<Cow<'a, str>>,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
}

fn csv_columns<R: io::Read>(reader: &mut csv::Reader<R>) -> Result<[usize; 4], IngestError> {
    let headers = reader.headers().map_err(csv_error)?;
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| IngestError::MalformedRecord {
                line: 1,
                reason: format!("missing column `{name}`"),
            })
    };
    Ok([find("ts")?, find("id")?, find("lat")?, find("lon")?])
}

fn read_csv_row<R: io::Read>(
    reader: &mut csv::Reader<R>,
    record: &mut csv::StringRecord,
    cols: [usize; 4],
) -> Result<Option<PendingRow>, IngestError> {
    if !reader.read_record(record).map_err(csv_error)? {
        return Ok(None);
    }
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let malformed = |reason: String| IngestError::MalformedRecord { line, reason };
    let field = |i: usize| record.get(cols[i]).unwrap_or("");
    let ts = parse_ts(field(0)).map_err(malformed)?;
    let id = field(1);
    let id = (!is_null_id(id)).then(|| id.to_string());
    let coord = |s: &str| -> Result<Option<f64>, IngestError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| malformed(format!("bad coordinate `{s}`")))
    };
    let position = match (coord(field(2))?, coord(field(3))?) {
        (Some(lat), Some(lon)) => Some(GeoPoint { lat, lon }),
        _ => None,
    };
    Ok(Some(PendingRow { ts, id, position }))
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::MalformedRecord {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Removes observations outside `bbox`. Timestamps are untouched and empty
/// batches are kept, so downstream absence logic still sees every update.
pub fn filter_batch(mut batch: SnapshotBatch, bbox: &BBox) -> SnapshotBatch {
    batch.observations.retain(|o| bbox.contains(o.position));
    batch
}

pub fn bounding_box_filter<I>(batches: I, bbox: BBox) -> impl Iterator<Item = SnapshotBatch>
where
    I: IntoIterator<Item = SnapshotBatch>,
{
    batches.into_iter().map(move |b| filter_batch(b, &bbox))
}

#[derive(Serialize)]
struct JsonLineOut<'a> {
    ts: String,
    scooters: Vec<JsonScooterOut<'a>>,
}

#[derive(Serialize)]
struct JsonScooterOut<'a> {
    id: &'a str,
    lat: f64,
    lon: f64,
}

/// Writes one batch as a JSONL line.
pub fn write_jsonl_batch<W: Write>(mut w: W, batch: &SnapshotBatch) -> io::Result<()> {
    let out = JsonLineOut {
        ts: format_ts(batch.ts),
        scooters: batch
            .observations
            .iter()
            .map(|o| JsonScooterOut {
                id: &o.scooter_id,
                lat: o.position.lat,
                lon: o.position.lon,
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &out)?;
    w.write_all(b"\n")
}

/// Writes batches as CSV rows, header included. Empty batches leave no trace
/// in this encoding.
pub fn write_csv_batches<'a, W: Write>(
    w: W,
    batches: impl IntoIterator<Item = &'a SnapshotBatch>,
) -> io::Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["ts", "id", "lat", "lon"])?;
    for batch in batches {
        let ts = format_ts(batch.ts);
        for o in &batch.observations {
            writer.write_record([
                ts.as_str(),
                o.scooter_id.as_str(),
                &o.position.lat.to_string(),
                &o.position.lon.to_string(),
            ])?;
        }
    }
    writer.flush()
}
