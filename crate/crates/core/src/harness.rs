//! Validation sweep: runs emulated speed tests over a grid of background
//! loads and compares the mean measured speed with `(1 - rho) C_i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChannelSpec, UserClass};
use crate::sim::{PopulationClass, SimConfig, SizeDistribution};
use crate::speedtest::{
    run_speed_test, ProbeSchedule, ProbeSize, ProbeSpec, RhoWindow, SpeedTestSample,
    WarmupExclusion, DEFAULT_PROBE_SIZE_FACTOR,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Config(String),
}

/// Background class template; its arrival rate is set per grid point so
/// that the class contributes `share` of the target load.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepClass {
    pub label: String,
    pub mean_size: f64,
    pub channel_rate: f64,
    pub population: u32,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepProbe {
    /// One probe stream per reference rate.
    pub channel_rates: Vec<f64>,
    /// Defaults to [`DEFAULT_PROBE_SIZE_FACTOR`] times the mean background request.
    pub size: Option<ProbeSize>,
    pub exclusion: WarmupExclusion,
    /// Mean idle gap between probes, in units of the expected probe lifetime.
    pub gap_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub channel: ChannelSpec<f64>,
    pub classes: Vec<SweepClass>,
    pub service: SizeDistribution,
    pub rho_grid: Vec<f64>,
    pub probes_per_point: usize,
    pub seeds_per_point: u32,
    pub seed: u64,
    pub probe: SweepProbe,
    pub window: RhoWindow,
}

/// Default per-class population: large enough that the finite-source
/// reduction of the offered load is negligible.
pub const DEFAULT_SWEEP_POPULATION: u32 = 100_000;

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        let err = |m: String| Err(SweepError::Config(m));
        if self.rho_grid.is_empty() {
            return err("rho grid is empty".into());
        }
        for (i, rho) in self.rho_grid.iter().enumerate() {
            if !(rho.is_finite() && *rho >= 0.0 && *rho < 1.0) {
                return err(format!("grid value {rho} must satisfy 0 <= rho < 1"));
            }
            if i > 0 && *rho <= self.rho_grid[i - 1] {
                return err("rho grid must be strictly increasing".into());
            }
        }
        if self.classes.is_empty() {
            return err("at least one background class is required".into());
        }
        for class in &self.classes {
            let template = UserClass::new(
                class.label.clone(),
                0.0,
                class.mean_size,
                class.channel_rate,
            );
            if let Err(e) = template.validate(&self.channel) {
                return err(e.to_string());
            }
            if !(class.share.is_finite() && class.share > 0.0) {
                return err(format!("class `{}` share must be > 0", class.label));
            }
            if class.population == 0 {
                return err(format!("class `{}` needs a population >= 1", class.label));
            }
        }
        if self.probes_per_point == 0 || self.seeds_per_point == 0 {
            return err("probes_per_point and seeds_per_point must be >= 1".into());
        }
        if self.probe.channel_rates.is_empty() {
            return err("at least one probe channel rate is required".into());
        }
        for rate in &self.probe.channel_rates {
            if !(rate.is_finite() && *rate > 0.0) {
                return err(format!("probe channel rate must be > 0, got {rate}"));
            }
        }
        if !(self.probe.gap_factor.is_finite() && self.probe.gap_factor > 0.0) {
            return err("probe gap factor must be > 0".into());
        }
        Ok(())
    }

    fn share_total(&self) -> f64 {
        self.classes.iter().map(|c| c.share).sum()
    }

    fn mean_background_size(&self) -> f64 {
        let total = self.share_total();
        self.classes
            .iter()
            .map(|c| c.share / total * c.mean_size)
            .sum()
    }

    /// Background classes whose offered load sums to `rho`.
    pub fn background(&self, rho: f64) -> Vec<PopulationClass> {
        let total = self.share_total();
        self.classes
            .iter()
            .map(|c| {
                let service = self.channel.service_rate(c.channel_rate);
                let arrival_rate = rho * c.share / total * service / c.mean_size;
                PopulationClass::new(
                    UserClass::new(c.label.clone(), arrival_rate, c.mean_size, c.channel_rate),
                    c.population,
                )
            })
            .collect()
    }

    fn probe_bits(&self) -> Option<f64> {
        match self.probe.size {
            Some(ProbeSize::Bits(b)) => Some(b),
            Some(ProbeSize::Duration(_)) => None,
            None => Some(DEFAULT_PROBE_SIZE_FACTOR * self.mean_background_size()),
        }
    }

    /// Simulation and probe setup for one grid point, probe rate and replicate.
    pub fn job(&self, point: usize, rate_index: usize, replicate: u32) -> (SimConfig, ProbeSpec) {
        let rho = self.rho_grid[point];
        let probe_rate = self.probe.channel_rates[rate_index];
        let probe_service = self.channel.service_rate(probe_rate);
        let lifetime = match self.probe.size {
            Some(ProbeSize::Duration(d)) => d,
            _ => self.probe_bits().unwrap_or(0.0) / (probe_service * (1.0 - rho)),
        };
        let relaxation = self
            .classes
            .iter()
            .map(|c| c.mean_size / self.channel.service_rate(c.channel_rate))
            .fold(0.0, f64::max)
            / (1.0 - rho.sqrt()).powi(2);
        let warmup = (2.0 * lifetime).max(200.0 * relaxation);
        let mean_gap = self.probe.gap_factor * lifetime;
        let span = self.probes_per_point as f64 * (lifetime + mean_gap);
        let horizon = warmup + 1.5 * span + 10.0 * (lifetime + mean_gap);
        let seed = derive_seed(
            self.seed,
            &[point as u64, rate_index as u64, u64::from(replicate)],
        );
        let sim = SimConfig::new(
            self.channel,
            self.background(rho),
            self.service,
            horizon,
            seed,
        )
        .with_warmup(warmup);
        let size = self
            .probe
            .size
            .unwrap_or(ProbeSize::Bits(self.probe_bits().unwrap_or(0.0)));
        let mut probe = ProbeSpec::new(
            probe_rate,
            size,
            ProbeSchedule::Sequential {
                count: self.probes_per_point,
                mean_gap,
                start: warmup,
            },
        );
        probe.exclusion = self.probe.exclusion;
        probe.window = self.window;
        (sim, probe)
    }
}

/// Mixes a base seed with job coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Analytic and simulated speed at one grid point for one probe rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub channel_rate: f64,
    pub analytic_speed: f64,
    pub sim_mean_speed: f64,
    /// 95% half-width of the mean over probes.
    pub sim_half_width: f64,
    pub probes: usize,
    /// Mean background utilization reported with the samples.
    pub measured_rho: f64,
    pub relative_gap: f64,
}

/// One probe in the scatter output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub rho_point: f64,
    pub seed: u64,
    pub probe: usize,
    pub injection_time: f64,
    pub measured_speed: f64,
    pub channel_rate: f64,
    pub rho_ground_truth: f64,
    pub predicted_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub rho: f64,
    pub channel_rate: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub curve: Vec<CurvePoint>,
    pub scatter: Vec<ScatterRow>,
    pub failures: Vec<PointFailure>,
}

/// Runs every (grid point, probe rate, replicate) job in parallel. Output
/// order follows the grid regardless of scheduling. A failing job is
/// reported and leaves the rest of the sweep intact.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    let rates = spec.probe.channel_rates.len();
    let jobs: Vec<(usize, usize, u32)> = (0..spec.rho_grid.len())
        .flat_map(|k| {
            (0..rates).flat_map(move |j| (0..spec.seeds_per_point).map(move |r| (k, j, r)))
        })
        .collect();
    let outcomes: Vec<(u64, Result<Vec<SpeedTestSample>, String>)> = jobs
        .par_iter()
        .map(|&(k, j, r)| {
            let (sim, probe) = spec.job(k, j, r);
            (
                sim.seed,
                run_speed_test(&sim, &probe).map_err(|e| e.to_string()),
            )
        })
        .collect();

    let mut result = SweepResult {
        curve: Vec::new(),
        scatter: Vec::new(),
        failures: Vec::new(),
    };
    for (chunk_index, chunk) in outcomes.chunks(spec.seeds_per_point as usize).enumerate() {
        let (k, j, _) = jobs[chunk_index * spec.seeds_per_point as usize];
        let rho = spec.rho_grid[k];
        let channel_rate = spec.probe.channel_rates[j];
        let mut samples = Vec::new();
        for (seed, outcome) in chunk {
            match outcome {
                Ok(batch) => {
                    for (probe, s) in batch.iter().enumerate() {
                        result.scatter.push(ScatterRow {
                            rho_point: rho,
                            seed: *seed,
                            probe,
                            injection_time: s.injection_time,
                            measured_speed: s.measured_speed,
                            channel_rate: s.channel_rate,
                            rho_ground_truth: s.rho,
                            predicted_speed: s.predicted_speed,
                        });
                    }
                    samples.extend_from_slice(batch);
                }
                Err(message) => result.failures.push(PointFailure {
                    rho,
                    channel_rate,
                    seed: *seed,
                    message: message.clone(),
                }),
            }
        }
        if samples.is_empty() {
            continue;
        }
        let speeds: Vec<f64> = samples.iter().map(|s| s.measured_speed).collect();
        let (mean, half_width) = mean_half_width(&speeds);
        let analytic_speed = (1.0 - rho) * spec.channel.service_rate(channel_rate);
        result.curve.push(CurvePoint {
            rho,
            channel_rate,
            analytic_speed,
            sim_mean_speed: mean,
            sim_half_width: half_width,
            probes: samples.len(),
            measured_rho: samples.iter().map(|s| s.rho).sum::<f64>() / samples.len() as f64,
            relative_gap: (mean - analytic_speed) / analytic_speed,
        });
    }
    Ok(result)
}

/// Sample mean and normal-approximation 95% half-width.
pub fn mean_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least-squares fit of `y = slope x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
