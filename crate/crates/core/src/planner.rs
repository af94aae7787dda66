//! Coverage planning: project per-area utilization forward under demand
//! growth and classify each area-year against broadband speed targets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ChannelSpec, ClassMix, ModelError, UserClass};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("area `{area_id}`: {reason}")]
    MalformedRecord { area_id: String, reason: String },
    #[error("annual growth must be finite and >= 0, got {0}")]
    InvalidGrowth(f64),
    #[error("threshold `{name}`: floors must be finite and >= 0")]
    InvalidThreshold { name: String },
    #[error("{0}")]
    InvalidArgument(String),
}

/// How the peak-hour utilization of one direction is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionLoad {
    /// Utilization supplied directly.
    Supplied { rho: f64 },
    /// Utilization derived from `users` each issuing `arrival_rate`
    /// requests/s of `mean_size` bits on a channel of `capacity` bit/s.
    Demand {
        users: u32,
        arrival_rate: f64,
        mean_size: f64,
        capacity: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecord {
    /// Per-user reference rate `C_i` in bit/s.
    pub channel_rate: f64,
    pub load: DirectionLoad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRecord {
    pub area_id: String,
    pub base_year: i32,
    pub download: DirectionRecord,
    pub upload: DirectionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetThreshold {
    pub name: String,
    /// Minimum download speed in bit/s.
    pub download_floor: f64,
    /// Minimum upload speed in bit/s.
    pub upload_floor: f64,
}

impl TargetThreshold {
    pub fn new(
        name: impl Into<String>,
        download_floor: f64,
        upload_floor: f64,
    ) -> Result<Self, PlanError> {
        let name = name.into();
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(download_floor) && ok(upload_floor)) {
            return Err(PlanError::InvalidThreshold { name });
        }
        Ok(Self {
            name,
            download_floor,
            upload_floor,
        })
    }

    /// 1 Gb/s down, 200 Mb/s up.
    pub fn italia_1_giga() -> Self {
        Self {
            name: "italia-1-giga".into(),
            download_floor: 1e9,
            upload_floor: 200e6,
        }
    }

    /// 150 Mb/s down, 30 Mb/s up.
    pub fn italia_5g() -> Self {
        Self {
            name: "italia-5g".into(),
            download_floor: 150e6,
            upload_floor: 30e6,
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::italia_1_giga(), Self::italia_5g()]
    }
}

/// Compound growth of peak utilization: `rho_t = rho_0 (1 + g)^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthModel {
    pub annual_growth: f64,
    /// Years evaluated after the base year; offsets `0..=horizon_years`.
    pub horizon_years: u32,
}

impl GrowthModel {
    pub fn new(annual_growth: f64, horizon_years: u32) -> Result<Self, PlanError> {
        if !(annual_growth.is_finite() && annual_growth >= 0.0) {
            return Err(PlanError::InvalidGrowth(annual_growth));
        }
        Ok(Self {
            annual_growth,
            horizon_years,
        })
    }

    pub fn rho_at(&self, rho0: f64, offset: u32) -> f64 {
        rho0 * (1.0 + self.annual_growth).powi(offset as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Meets,
    Fails,
    /// Projected utilization reached 1; no finite speed estimate exists.
    Saturated,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Meets => "meets",
            Classification::Fails => "fails",
            Classification::Saturated => "saturated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionEstimate {
    pub rho: f64,
    /// `(1 - rho) C_i`, absent when saturated.
    pub speed: Option<f64>,
}

impl DirectionEstimate {
    fn at(channel_rate: f64, rho: f64) -> Self {
        let speed = (rho < 1.0).then_some((1.0 - rho) * channel_rate);
        Self { rho, speed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearEstimate {
    pub offset: u32,
    pub year: i32,
    pub download: DirectionEstimate,
    pub upload: DirectionEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVerdict {
    pub threshold: String,
    /// One entry per year offset.
    pub classes: Vec<Classification>,
    /// First year the area stops meeting the threshold, if within the horizon.
    pub binding_year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanVerdict {
    pub area_id: String,
    pub years: Vec<YearEstimate>,
    pub thresholds: Vec<ThresholdVerdict>,
}

/// Base-year utilization of one direction. Demand that would overload the
/// channel is returned as its (>= 1) offered load so it projects as saturated.
pub fn base_utilization(area_id: &str, direction: &DirectionRecord) -> Result<f64, PlanError> {
    let malformed = |reason: String| PlanError::MalformedRecord {
        area_id: area_id.to_string(),
        reason,
    };
    if !(direction.channel_rate.is_finite() && direction.channel_rate > 0.0) {
        return Err(malformed(format!(
            "channel rate must be finite and > 0, got {}",
            direction.channel_rate
        )));
    }
    match direction.load {
        DirectionLoad::Supplied { rho } => {
            if !(rho.is_finite() && rho >= 0.0) {
                return Err(malformed(format!(
                    "utilization must be finite and >= 0, got {rho}"
                )));
            }
            Ok(rho)
        }
        DirectionLoad::Demand {
            users,
            arrival_rate,
            mean_size,
            capacity,
        } => {
            let channel = ChannelSpec::fair(capacity).map_err(|e| malformed(e.to_string()))?;
            let class = UserClass::new(
                "demand",
                f64::from(users) * arrival_rate,
                mean_size,
                capacity,
            );
            let mix = ClassMix::new(channel, vec![class]).map_err(|e| malformed(e.to_string()))?;
            match model::utilization_fair(&mix) {
                Ok(load) => Ok(load.rho()),
                Err(ModelError::UnstableLoad { rho }) => Ok(rho),
                Err(e) => Err(malformed(e.to_string())),
            }
        }
    }
}

fn classify(estimate: &YearEstimate, threshold: &TargetThreshold) -> Classification {
    match (estimate.download.speed, estimate.upload.speed) {
        (Some(down), Some(up))
            if down >= threshold.download_floor && up >= threshold.upload_floor =>
        {
            Classification::Meets
        }
        (Some(_), Some(_)) => Classification::Fails,
        _ => Classification::Saturated,
    }
}

/// Projects one area over the growth horizon and classifies every year
/// against every threshold.
pub fn evaluate_area(
    area: &AreaRecord,
    thresholds: &[TargetThreshold],
    growth: &GrowthModel,
) -> Result<PlanVerdict, PlanError> {
    if area.area_id.trim().is_empty() {
        return Err(PlanError::MalformedRecord {
            area_id: area.area_id.clone(),
            reason: "empty area id".into(),
        });
    }
    let down0 = base_utilization(&area.area_id, &area.download)?;
    let up0 = base_utilization(&area.area_id, &area.upload)?;
    let years: Vec<YearEstimate> = (0..=growth.horizon_years)
        .map(|offset| YearEstimate {
            offset,
            year: area.base_year + offset as i32,
            download: DirectionEstimate::at(
                area.download.channel_rate,
                growth.rho_at(down0, offset),
            ),
            upload: DirectionEstimate::at(area.upload.channel_rate, growth.rho_at(up0, offset)),
        })
        .collect();
    let thresholds = thresholds
        .iter()
        .map(|threshold| {
            let classes: Vec<Classification> =
                years.iter().map(|y| classify(y, threshold)).collect();
            let binding_year = classes
                .iter()
                .position(|c| *c != Classification::Meets)
                .map(|i| years[i].year);
            ThresholdVerdict {
                threshold: threshold.name.clone(),
                classes,
                binding_year,
            }
        })
        .collect();
    Ok(PlanVerdict {
        area_id: area.area_id.clone(),
        years,
        thresholds,
    })
}

/// Smallest `C_i` for which `(1 - rho) C_i` reaches `floor`; `None` if
/// `rho >= 1`.
pub fn required_channel_rate(floor: f64, rho: f64) -> Result<Option<f64>, PlanError> {
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(PlanError::InvalidArgument(format!(
            "floor must be finite and >= 0, got {floor}"
        )));
    }
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(PlanError::InvalidArgument(format!(
            "utilization must be finite and >= 0, got {rho}"
        )));
    }
    Ok((rho < 1.0).then(|| floor / (1.0 - rho)))
}

/// A record that could not be evaluated, with the input line it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIssue {
    pub line: u64,
    pub area_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub threshold: String,
    pub offset: u32,
    pub meets: usize,
    pub fails: usize,
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    /// Verdicts in input order.
    pub verdicts: Vec<PlanVerdict>,
    pub issues: Vec<RecordIssue>,
    /// Area ids seen more than once; every occurrence is still evaluated.
    pub duplicate_ids: Vec<String>,
    pub summary: Vec<SummaryRow>,
}

/// Evaluates a stream of parsed records, each tagged with its input line.
/// Malformed records are reported and skipped; the rest are evaluated in
/// order.
pub fn evaluate_batch<I>(
    records: I,
    thresholds: &[TargetThreshold],
    growth: &GrowthModel,
) -> BatchReport
where
    I: IntoIterator<Item = (u64, Result<AreaRecord, RecordIssue>)>,
{
    let mut verdicts = Vec::new();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicate_ids = Vec::new();
    for (line, record) in records {
        let area = match record {
            Ok(area) => area,
            Err(issue) => {
                issues.push(issue);
                continue;
            }
        };
        if !seen.insert(area.area_id.clone()) && !duplicate_ids.contains(&area.area_id) {
            duplicate_ids.push(area.area_id.clone());
        }
        match evaluate_area(&area, thresholds, growth) {
            Ok(verdict) => verdicts.push(verdict),
            Err(e) => issues.push(RecordIssue {
                line,
                area_id: Some(area.area_id.clone()),
                message: e.to_string(),
            }),
        }
    }
    let summary = summarize(&verdicts, thresholds, growth);
    BatchReport {
        verdicts,
        issues,
        duplicate_ids,
        summary,
    }
}

fn summarize(
    verdicts: &[PlanVerdict],
    thresholds: &[TargetThreshold],
    growth: &GrowthModel,
) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (k, threshold) in thresholds.iter().enumerate() {
        for offset in 0..=growth.horizon_years {
            let mut row = SummaryRow {
                threshold: threshold.name.clone(),
                offset,
                meets: 0,
                fails: 0,
                saturated: 0,
            };
            for verdict in verdicts {
                match verdict.thresholds[k].classes[offset as usize] {
                    Classification::Meets => row.meets += 1,
                    Classification::Fails => row.fails += 1,
                    Classification::Saturated => row.saturated += 1,
                }
            }
            rows.push(row);
        }
    }
    rows
}
