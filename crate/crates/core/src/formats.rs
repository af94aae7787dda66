//! CSV datasets: area records and speed samples in, verdicts, summaries and
//! sweep results out. Column names are listed in `docs/formats.md`.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{
    AreaRecord, Classification, DirectionLoad, DirectionRecord, PlanVerdict, RecordIssue,
};
use crate::units::{parse_rate, parse_size, round_mbps};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("{0}")]
    Invalid(String),
}

/// Writes rows with a header line.
pub fn write_csv<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads rows written by [`write_csv`].
pub fn read_csv<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>, FormatError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(FormatError::from))
        .collect()
}

/// Header lookup over a loosely typed CSV whose fields may carry units.
struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Self { index }
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn require(&self, name: &str) -> Result<(), FormatError> {
        if self.has(name) {
            Ok(())
        } else {
            Err(FormatError::MissingColumn(name.into()))
        }
    }

    /// Trimmed, non-empty field value.
    fn get<'r>(&self, record: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index
            .get(name)
            .and_then(|&i| record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }

    fn parse<T>(
        &self,
        record: &csv::StringRecord,
        name: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, String> {
        self.get(record, name)
            .map(|v| parse(v).map_err(|e| format!("column `{name}`: {e}")))
            .transpose()
    }
}

fn number(v: &str) -> Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("`{v}` is not a finite number"))
}

fn rate(v: &str) -> Result<f64, String> {
    parse_rate(v).map_err(|e| e.to_string())
}

fn size(v: &str) -> Result<f64, String> {
    parse_size(v).map_err(|e| e.to_string())
}

fn integer<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("`{v}` is not an integer"))
}

/// Column prefixes of the two directions in an area CSV.
const DOWN: &str = "down";
const UP: &str = "up";

fn direction_load(
    cols: &Columns,
    record: &csv::StringRecord,
    prefix: &str,
    channel_rate: f64,
) -> Result<Option<DirectionLoad>, String> {
    let col = |name: &str| format!("{prefix}_{name}");
    let rho = cols.parse(record, &col("rho"), number)?;
    let users = cols.parse(record, &col("users"), integer::<u32>)?;
    let arrival_rate = cols.parse(record, &col("arrival_rate"), number)?;
    let mean_size = cols.parse(record, &col("mean_size"), size)?;
    let capacity = cols.parse(record, &col("capacity"), rate)?;
    let demand_given =
        users.is_some() || arrival_rate.is_some() || mean_size.is_some() || capacity.is_some();
    match (rho, demand_given) {
        (Some(_), true) => Err(format!("{prefix}: give either {prefix}_rho or demand columns, not both")),
        (Some(rho), false) => Ok(Some(DirectionLoad::Supplied { rho })),
        (None, true) => match (users, arrival_rate, mean_size) {
            (Some(users), Some(arrival_rate), Some(mean_size)) => Ok(Some(DirectionLoad::Demand {
                users,
                arrival_rate,
                mean_size,
                capacity: capacity.unwrap_or(channel_rate),
            })),
            _ => Err(format!(
                "{prefix}: demand needs {prefix}_users, {prefix}_arrival_rate and {prefix}_mean_size"
            )),
        },
        (None, false) => Ok(None),
    }
}

fn area_record(cols: &Columns, record: &csv::StringRecord) -> Result<AreaRecord, String> {
    let area_id = cols
        .get(record, "area_id")
        .ok_or("missing area_id")?
        .to_string();
    let base_year = cols
        .parse(record, "base_year", integer::<i32>)?
        .ok_or("missing base_year")?;
    let down_rate = cols
        .parse(record, "down_rate", rate)?
        .ok_or("missing down_rate")?;
    let down_load = direction_load(cols, record, DOWN, down_rate)?
        .ok_or("missing download load (down_rho or demand columns)")?;
    let up_rate = cols
        .parse(record, "up_rate", rate)?
        .ok_or("missing upload data (up_rate)")?;
    let up_load = direction_load(cols, record, UP, up_rate)?.unwrap_or_else(|| down_load.clone());
    Ok(AreaRecord {
        area_id,
        base_year,
        download: DirectionRecord {
            channel_rate: down_rate,
            load: down_load,
        },
        upload: DirectionRecord {
            channel_rate: up_rate,
            load: up_load,
        },
    })
}

/// A parsed row tagged with its file line.
pub type LineResult<T, E> = (u64, Result<T, E>);

/// Reads an area CSV. Row-level problems become [`RecordIssue`]s tagged
/// with the file line; only unreadable files or missing required columns
/// fail the whole read. An empty file holds no records.
pub fn read_area_records<R: Read>(
    reader: R,
) -> Result<Vec<LineResult<AreaRecord, RecordIssue>>, FormatError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    if r.headers()?.iter().all(|h| h.trim().is_empty()) {
        return Ok(Vec::new());
    }
    let cols = Columns::new(r.headers()?);
    for name in ["area_id", "base_year", "down_rate"] {
        cols.require(name)?;
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parsed = area_record(&cols, &record).map_err(|message| RecordIssue {
            line,
            area_id: cols.get(&record, "area_id").map(str::to_string),
            message,
        });
        out.push((line, parsed));
    }
    Ok(out)
}

/// Writes area records in the column layout [`read_area_records`] accepts.
pub fn write_area_records<W: Write>(writer: W, records: &[AreaRecord]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["area_id".to_string(), "base_year".to_string()];
    for prefix in [DOWN, UP] {
        for name in [
            "rate",
            "rho",
            "users",
            "arrival_rate",
            "mean_size",
            "capacity",
        ] {
            header.push(format!("{prefix}_{name}"));
        }
    }
    w.write_record(&header)?;
    for area in records {
        let mut row = vec![area.area_id.clone(), area.base_year.to_string()];
        for dir in [&area.download, &area.upload] {
            row.push(dir.channel_rate.to_string());
            match &dir.load {
                DirectionLoad::Supplied { rho } => {
                    row.extend([
                        rho.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                }
                DirectionLoad::Demand {
                    users,
                    arrival_rate,
                    mean_size,
                    capacity,
                } => row.extend([
                    String::new(),
                    users.to_string(),
                    arrival_rate.to_string(),
                    mean_size.to_string(),
                    capacity.to_string(),
                ]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One area-year-threshold line of a plan output. Speeds are in Mb/s,
/// rounded to 0.1; they are empty when the direction is saturated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub area_id: String,
    pub threshold: String,
    pub year: i32,
    pub offset: u32,
    pub down_rho: f64,
    pub down_speed_mbps: Option<f64>,
    pub up_rho: f64,
    pub up_speed_mbps: Option<f64>,
    pub classification: Classification,
    pub binding_year: Option<i32>,
}

pub fn verdict_rows(verdicts: &[PlanVerdict]) -> Vec<VerdictRow> {
    let mut rows = Vec::new();
    for verdict in verdicts {
        for threshold in &verdict.thresholds {
            for (year, class) in verdict.years.iter().zip(&threshold.classes) {
                rows.push(VerdictRow {
                    area_id: verdict.area_id.clone(),
                    threshold: threshold.threshold.clone(),
                    year: year.year,
                    offset: year.offset,
                    down_rho: year.download.rho,
                    down_speed_mbps: year.download.speed.map(round_mbps),
                    up_rho: year.upload.rho,
                    up_speed_mbps: year.upload.speed.map(round_mbps),
                    classification: *class,
                    binding_year: threshold.binding_year,
                });
            }
        }
    }
    rows
}

/// A speed sample as read from a samples CSV: either `channel_rate` or
/// `mcs` identifies the reference rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleInput {
    pub measured_speed: f64,
    pub channel_rate: Option<f64>,
    pub mcs: Option<u32>,
}

/// Reads a samples CSV. Extra columns are ignored, so sweep scatter files
/// are accepted as-is. Each row is either a sample or a reason it is
/// malformed.
pub fn read_samples<R: Read>(
    reader: R,
) -> Result<Vec<LineResult<SampleInput, String>>, FormatError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = Columns::new(r.headers()?);
    cols.require("measured_speed")?;
    if !cols.has("channel_rate") && !cols.has("mcs") {
        return Err(FormatError::MissingColumn("channel_rate or mcs".into()));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parsed = (|| {
            let measured_speed = cols
                .parse(&record, "measured_speed", rate)?
                .ok_or("missing measured_speed")?;
            let channel_rate = cols.parse(&record, "channel_rate", rate)?;
            let mcs = cols.parse(&record, "mcs", integer::<u32>)?;
            if channel_rate.is_none() && mcs.is_none() {
                return Err("needs channel_rate or mcs".to_string());
            }
            Ok(SampleInput {
                measured_speed,
                channel_rate,
                mcs,
            })
        })();
        out.push((line, parsed));
    }
    Ok(out)
}
