//! Emulated speed tests and the measurement side of the model: probe
//! transfers inside a simulation, MCS rate lookup, carrier aggregation and
//! utilization inference from measured speeds.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ChannelSpec, LoadPoint, ModelError};
use crate::sim::{self, Injections, ProbeExclusion, ProbePlan, ProbeVolume, SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid probe spec: {0}")]
    Config(String),
    #[error("MCS index {0} is not in the rate table")]
    UnknownMcs(u32),
    #[error("no samples to infer from")]
    EmptyInput,
    #[error("probe {index} finished before its warm-up exclusion ended")]
    ProbeTooShort { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ProbeSize {
    Bits(f64),
    /// Fixed-duration test in seconds; speed is bits moved over the duration.
    Duration(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum WarmupExclusion {
    Bits(f64),
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeSchedule {
    Times {
        times: Vec<f64>,
    },
    /// `count` injections as a Poisson process of the given rate from `start`.
    Poisson {
        rate: f64,
        count: usize,
        start: f64,
    },
    /// First probe at `start`, each later probe an exponential gap of mean
    /// `mean_gap` after the previous one completes. Probes never overlap.
    Sequential {
        count: usize,
        mean_gap: f64,
        start: f64,
    },
}

/// Window over which the background utilization reported with each sample
/// is averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoWindow {
    #[default]
    ProbeLifetime,
    WholeRun,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSpec {
    /// MCS-determined reference rate `C_i` of the probing terminal.
    pub channel_rate: f64,
    pub size: ProbeSize,
    pub exclusion: WarmupExclusion,
    pub schedule: ProbeSchedule,
    pub window: RhoWindow,
}

/// Default probe size as a multiple of the mean background request.
///
/// The mean of per-probe speeds `x / d(x)` overshoots `(1 - rho) C_i` by
/// roughly `2 rho m / ((1 - rho) x)`; at 1000x this stays under 1% up to
/// `rho = 0.8`.
pub const DEFAULT_PROBE_SIZE_FACTOR: f64 = 1000.0;

impl ProbeSpec {
    pub fn new(channel_rate: f64, size: ProbeSize, schedule: ProbeSchedule) -> Self {
        Self {
            channel_rate,
            size,
            exclusion: WarmupExclusion::Bits(0.0),
            schedule,
            window: RhoWindow::ProbeLifetime,
        }
    }

    /// Probe size of [`DEFAULT_PROBE_SIZE_FACTOR`] times the arrival-weighted
    /// mean background request of `sim`.
    pub fn default_size(sim: &SimConfig) -> Option<f64> {
        let total: f64 = sim.classes.iter().map(|c| c.class.arrival_rate).sum();
        if total > 0.0 {
            let mean = sim
                .classes
                .iter()
                .map(|c| c.class.arrival_rate / total * c.class.mean_size)
                .sum::<f64>();
            Some(DEFAULT_PROBE_SIZE_FACTOR * mean)
        } else {
            sim.classes
                .first()
                .map(|c| DEFAULT_PROBE_SIZE_FACTOR * c.class.mean_size)
        }
    }

    fn injections(&self, seed: u64) -> Result<Injections, ProbeError> {
        let draw = |mean_gap: f64, count: usize| -> Result<Vec<f64>, ProbeError> {
            let gaps = Exp::new(1.0 / mean_gap).map_err(|_| {
                ProbeError::Config(format!("probe gap must be > 0, got {mean_gap}"))
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(PROBE_STREAM);
            Ok((0..count).map(|_| gaps.sample(&mut rng)).collect())
        };
        match &self.schedule {
            ProbeSchedule::Times { times } => {
                if times.windows(2).any(|w| w[1] < w[0]) {
                    return Err(ProbeError::Config("injection times must be sorted".into()));
                }
                Ok(Injections::At(times.clone()))
            }
            ProbeSchedule::Poisson { rate, count, start } => {
                let mut t = *start;
                let times = draw(1.0 / rate, *count)?
                    .into_iter()
                    .map(|gap| {
                        t += gap;
                        t
                    })
                    .collect();
                Ok(Injections::At(times))
            }
            ProbeSchedule::Sequential {
                count,
                mean_gap,
                start,
            } => Ok(Injections::AfterPrevious {
                start: *start,
                gaps: draw(*mean_gap, *count)?,
            }),
        }
    }
}

const PROBE_STREAM: u64 = 0x05EE_D0F9_B0BE;

/// One emulated speed test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedTestSample {
    pub injection_time: f64,
    pub transfer_time: f64,
    /// `(x - w) / (t_x - t_w)` in bit/s.
    pub measured_speed: f64,
    /// Rate the probe was scheduled with: `C_i` under proportional fair, `C`
    /// under fair sharing.
    pub channel_rate: f64,
    /// Background utilization averaged over the configured window.
    pub rho: f64,
    /// `(1 - rho) * channel_rate`.
    pub predicted_speed: f64,
}

/// Something carrying a measured speed and its reference channel rate.
pub trait SpeedMeasurement {
    fn measured_speed(&self) -> f64;
    fn channel_rate(&self) -> f64;
}

impl SpeedMeasurement for SpeedTestSample {
    fn measured_speed(&self) -> f64 {
        self.measured_speed
    }
    fn channel_rate(&self) -> f64 {
        self.channel_rate
    }
}

impl SpeedMeasurement for (f64, f64) {
    fn measured_speed(&self) -> f64 {
        self.0
    }
    fn channel_rate(&self) -> f64 {
        self.1
    }
}

/// Injects probe transfers into a simulation of `sim` and reports one sample
/// per probe. Probes are scheduled like any other flow.
pub fn run_speed_test(
    sim: &SimConfig,
    probe: &ProbeSpec,
) -> Result<Vec<SpeedTestSample>, ProbeError> {
    let injections = probe.injections(sim.seed)?;
    let plan = ProbePlan {
        injections,
        volume: match probe.size {
            ProbeSize::Bits(b) => ProbeVolume::Bits(b),
            ProbeSize::Duration(d) => ProbeVolume::Duration(d),
        },
        exclusion: match probe.exclusion {
            WarmupExclusion::Bits(b) => ProbeExclusion::Bits(b),
            WarmupExclusion::Seconds(s) => ProbeExclusion::Seconds(s),
        },
        channel_rate: probe.channel_rate,
    };
    let output = sim::run_with_probes(sim, plan)?;
    output
        .probes
        .iter()
        .enumerate()
        .map(|(index, outcome)| {
            let elapsed = outcome.end - outcome.measure_start;
            if !(elapsed > 0.0 && outcome.measured_bits > 0.0) {
                return Err(ProbeError::ProbeTooShort { index });
            }
            let lifetime = outcome.end - outcome.injection;
            let rho = match probe.window {
                RhoWindow::ProbeLifetime => outcome.background_work / lifetime,
                RhoWindow::WholeRun => output.background_utilization,
            };
            let predicted_speed =
                model::per_user_throughput(outcome.service_rate, &LoadPoint::new(rho)?)?;
            Ok(SpeedTestSample {
                injection_time: outcome.injection,
                transfer_time: lifetime,
                measured_speed: outcome.measured_bits / elapsed,
                channel_rate: outcome.service_rate,
                rho,
                predicted_speed,
            })
        })
        .collect()
}

/// Technology-specific MCS index to channel-rate table (bit/s).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RateTable {
    rates: BTreeMap<u32, f64>,
}

/// A pair of table entries where the higher index has the lower rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McsLint {
    pub lower_index: u32,
    pub higher_index: u32,
    pub lower_rate: f64,
    pub higher_rate: f64,
}

impl RateTable {
    pub fn new(rates: BTreeMap<u32, f64>) -> Result<Self, ProbeError> {
        if let Some((mcs, rate)) = rates.iter().find(|(_, r)| !(r.is_finite() && **r > 0.0)) {
            return Err(ProbeError::Config(format!(
                "MCS {mcs} has non-positive rate {rate}"
            )));
        }
        Ok(Self { rates })
    }

    pub fn get(&self, mcs: u32) -> Option<f64> {
        self.rates.get(&mcs).copied()
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.rates.iter().map(|(k, v)| (*k, *v))
    }

    /// Adjacent entries that break rate monotonicity. Warnings only.
    pub fn lint(&self) -> Vec<McsLint> {
        self.rates
            .iter()
            .zip(self.rates.iter().skip(1))
            .filter(|((_, lo), (_, hi))| hi < lo)
            .map(|((li, lr), (hi, hr))| McsLint {
                lower_index: *li,
                higher_index: *hi,
                lower_rate: *lr,
                higher_rate: *hr,
            })
            .collect()
    }
}

impl FromIterator<(u32, f64)> for RateTable {
    fn from_iter<I: IntoIterator<Item = (u32, f64)>>(iter: I) -> Self {
        Self {
            rates: iter.into_iter().collect(),
        }
    }
}

pub fn map_mcs_to_rate(mcs: u32, table: &RateTable) -> Result<f64, ProbeError> {
    table.get(mcs).ok_or(ProbeError::UnknownMcs(mcs))
}

/// One carrier of a carrier-aggregation setup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Carrier {
    pub channel: ChannelSpec<f64>,
    pub load: LoadPoint<f64>,
    pub rate_table: RateTable,
}

/// Primary carrier plus secondaries; every carrier is evaluated at the MCS
/// reported on the primary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarrierSetup {
    pub mcs: u32,
    pub primary: Carrier,
    pub secondaries: Vec<Carrier>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarrierRate {
    pub channel_rate: f64,
    pub rho: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRate {
    pub carriers: Vec<CarrierRate>,
    pub total: f64,
}

/// Sum of per-carrier `(1 - rho_k) C_{i,k}`.
pub fn aggregate_carriers(setup: &CarrierSetup) -> Result<AggregateRate, ProbeError> {
    let mut carriers = Vec::with_capacity(1 + setup.secondaries.len());
    for carrier in std::iter::once(&setup.primary).chain(&setup.secondaries) {
        let channel_rate = map_mcs_to_rate(setup.mcs, &carrier.rate_table)?;
        if channel_rate > carrier.channel.capacity() {
            return Err(ProbeError::Config(format!(
                "MCS {} rate {channel_rate} exceeds carrier capacity {}",
                setup.mcs,
                carrier.channel.capacity()
            )));
        }
        let throughput = model::per_user_throughput(channel_rate, &carrier.load)?;
        carriers.push(CarrierRate {
            channel_rate,
            rho: carrier.load.rho(),
            throughput,
        });
    }
    let total = carriers.iter().map(|c| c.throughput).sum();
    Ok(AggregateRate { carriers, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadInference {
    /// Mean of the per-sample estimates over consistent samples.
    pub rho: f64,
    pub used: usize,
    /// Per-sample `1 - v/C_i`; `None` where the sample was excluded.
    pub per_sample: Vec<Option<f64>>,
    /// Indices of samples with `v > C_i` (or otherwise unusable values).
    pub inconsistent: Vec<usize>,
}

/// Estimates the utilization from measured speeds, excluding samples whose
/// speed exceeds their reference rate.
pub fn infer_load_from_samples<S: SpeedMeasurement>(
    samples: &[S],
) -> Result<LoadInference, ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut inconsistent = Vec::new();
    let (mut sum, mut used) = (0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        match model::infer_utilization(s.measured_speed(), s.channel_rate()) {
            Ok(rho) => {
                sum += rho;
                used += 1;
                per_sample.push(Some(rho));
            }
            Err(_) => {
                inconsistent.push(i);
                per_sample.push(None);
            }
        }
    }
    if used == 0 {
        return Err(ProbeError::EmptyInput);
    }
    Ok(LoadInference {
        rho: sum / used as f64,
        used,
        per_sample,
        inconsistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UserClass;
    use crate::sim::{PopulationClass, SizeDistribution};

    const MB: f64 = 1e6;

    fn table(entries: &[(u32, f64)]) -> RateTable {
        RateTable::new(entries.iter().copied().collect()).unwrap()
    }

    fn idle_sim(pf: bool) -> SimConfig {
        let channel = if pf {
            ChannelSpec::proportional_fair(100.0 * MB).unwrap()
        } else {
            ChannelSpec::fair(100.0 * MB).unwrap()
        };
        SimConfig::new(
            channel,
            vec![PopulationClass::new(
                UserClass::new("bg", 0.0, MB, 100.0 * MB),
                1,
            )],
            SizeDistribution::Exponential,
            100.0,
            9,
        )
        .with_warmup(0.0)
    }

    #[test]
    fn probe_on_idle_channel_sees_full_rate() {
        let sim = idle_sim(true);
        let probe = ProbeSpec::new(
            40.0 * MB,
            ProbeSize::Bits(200.0 * MB),
            ProbeSchedule::Times {
                times: vec![1.0, 20.0, 50.0],
            },
        );
        let samples = run_speed_test(&sim, &probe).unwrap();
        assert_eq!(samples.len(), 3);
        for s in samples {
            assert!((s.measured_speed - 40.0 * MB).abs() < 1e-6);
            assert_eq!(s.rho, 0.0);
            assert_eq!(s.predicted_speed, 40.0 * MB);
            assert!((s.transfer_time - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fair_channel_probe_uses_full_capacity() {
        let sim = idle_sim(false);
        let probe = ProbeSpec::new(
            40.0 * MB,
            ProbeSize::Bits(100.0 * MB),
            ProbeSchedule::Times { times: vec![1.0] },
        );
        let s = run_speed_test(&sim, &probe).unwrap()[0];
        assert_eq!(s.channel_rate, 100.0 * MB);
        assert!((s.measured_speed - 100.0 * MB).abs() < 1e-6);
    }

    #[test]
    fn warmup_exclusion_forms() {
        let sim = idle_sim(true);
        let mut probe = ProbeSpec::new(
            50.0 * MB,
            ProbeSize::Bits(100.0 * MB),
            ProbeSchedule::Times { times: vec![2.0] },
        );
        probe.exclusion = WarmupExclusion::Bits(25.0 * MB);
        let s = run_speed_test(&sim, &probe).unwrap()[0];
        assert!((s.measured_speed - 50.0 * MB).abs() < 1e-6);

        probe.exclusion = WarmupExclusion::Seconds(0.5);
        let s = run_speed_test(&sim, &probe).unwrap()[0];
        assert!((s.measured_speed - 50.0 * MB).abs() < 1e-6);

        probe.size = ProbeSize::Duration(3.0);
        let s = run_speed_test(&sim, &probe).unwrap()[0];
        assert!((s.measured_speed - 50.0 * MB).abs() < 1e-6);
        assert!((s.transfer_time - 3.0).abs() < 1e-12);

        probe.size = ProbeSize::Bits(10.0 * MB);
        probe.exclusion = WarmupExclusion::Bits(10.0 * MB);
        assert!(run_speed_test(&sim, &probe).is_err());

        probe.exclusion = WarmupExclusion::Seconds(5.0);
        assert!(matches!(
            run_speed_test(&sim, &probe),
            Err(ProbeError::ProbeTooShort { index: 0 })
        ));
    }

    #[test]
    fn probe_that_cannot_finish_is_starved() {
        let sim = idle_sim(true);
        let probe = ProbeSpec::new(
            MB,
            ProbeSize::Bits(1000.0 * MB),
            ProbeSchedule::Times { times: vec![99.0] },
        );
        assert!(matches!(
            run_speed_test(&sim, &probe),
            Err(ProbeError::Sim(SimError::ProbeStarved { index: 0, .. }))
        ));
    }

    #[test]
    fn two_concurrent_probes_split_the_channel() {
        let sim = idle_sim(true);
        let probe = ProbeSpec::new(
            100.0 * MB,
            ProbeSize::Bits(100.0 * MB),
            ProbeSchedule::Times {
                times: vec![1.0, 1.0],
            },
        );
        let samples = run_speed_test(&sim, &probe).unwrap();
        for s in samples {
            assert!((s.measured_speed - 50.0 * MB).abs() < 1e-6);
            // No background flows: background utilization stays zero.
            assert_eq!(s.rho, 0.0);
        }
    }

    #[test]
    fn poisson_schedule_is_seeded() {
        let spec = ProbeSpec::new(
            MB,
            ProbeSize::Bits(MB),
            ProbeSchedule::Poisson {
                rate: 2.0,
                count: 50,
                start: 10.0,
            },
        );
        let times = |seed| match spec.injections(seed).unwrap() {
            Injections::At(t) => t,
            other => panic!("unexpected {other:?}"),
        };
        let a = times(4);
        assert_eq!(a, times(4));
        assert_ne!(a, times(5));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a[0] > 10.0);
    }

    #[test]
    fn sequential_probes_never_overlap() {
        let sim = idle_sim(true);
        let probe = ProbeSpec::new(
            100.0 * MB,
            ProbeSize::Bits(100.0 * MB),
            ProbeSchedule::Sequential {
                count: 20,
                mean_gap: 1.0,
                start: 0.5,
            },
        );
        let samples = run_speed_test(&sim, &probe).unwrap();
        assert_eq!(samples.len(), 20);
        assert_eq!(samples[0].injection_time, 0.5);
        for pair in samples.windows(2) {
            assert!(pair[1].injection_time >= pair[0].injection_time + pair[0].transfer_time);
        }
        assert!(samples
            .iter()
            .all(|s| (s.measured_speed - 100.0 * MB).abs() < 1e-6));

        let mut too_many = probe.clone();
        too_many.schedule = ProbeSchedule::Sequential {
            count: 500,
            mean_gap: 1.0,
            start: 0.5,
        };
        assert!(matches!(
            run_speed_test(&sim, &too_many),
            Err(ProbeError::Sim(SimError::ProbeStarved {
                injection: None,
                ..
            }))
        ));
    }

    #[test]
    fn mcs_lookup() {
        let t = table(&[(0, 10.0 * MB), (5, 50.0 * MB), (9, 40.0 * MB)]);
        assert_eq!(map_mcs_to_rate(5, &t).unwrap(), 50.0 * MB);
        assert_eq!(map_mcs_to_rate(3, &t), Err(ProbeError::UnknownMcs(3)));
        let lint = t.lint();
        assert_eq!(lint.len(), 1);
        assert_eq!((lint[0].lower_index, lint[0].higher_index), (5, 9));
        assert!(table(&[(0, 1.0), (1, 2.0)]).lint().is_empty());
        assert!(RateTable::new([(0, -1.0)].into_iter().collect()).is_err());
    }

    fn carrier(capacity: f64, rho: f64, rate: f64) -> Carrier {
        Carrier {
            channel: ChannelSpec::proportional_fair(capacity).unwrap(),
            load: LoadPoint::new(rho).unwrap(),
            rate_table: table(&[(7, rate)]),
        }
    }

    #[test]
    fn carrier_aggregation() {
        let single = CarrierSetup {
            mcs: 7,
            primary: carrier(150.0 * MB, 0.5, 100.0 * MB),
            secondaries: vec![],
        };
        let total = aggregate_carriers(&single).unwrap().total;
        assert_eq!(
            total,
            model::per_user_throughput(100.0 * MB, &LoadPoint::new(0.5).unwrap()).unwrap()
        );

        let dual = CarrierSetup {
            secondaries: vec![carrier(100.0 * MB, 0.3, 100.0 * MB)],
            ..single.clone()
        };
        let agg = aggregate_carriers(&dual).unwrap();
        assert!((agg.total - 120.0 * MB).abs() < 1e-6);
        assert_eq!(agg.carriers.len(), 2);

        // Secondary's table lacks the primary's MCS.
        let mut missing = dual.clone();
        missing.secondaries[0].rate_table = table(&[(3, MB)]);
        assert_eq!(aggregate_carriers(&missing), Err(ProbeError::UnknownMcs(7)));

        // Saturated secondary cannot be represented.
        assert!(LoadPoint::new(1.0).is_err());
    }

    #[test]
    fn load_inference() {
        let full = [(10.0, 10.0), (5.0, 5.0)];
        assert_eq!(infer_load_from_samples(&full).unwrap().rho, 0.0);

        let mixed = [(3.0, 10.0), (15.0, 10.0), (5.0, 10.0)];
        let inference = infer_load_from_samples(&mixed).unwrap();
        assert!((inference.rho - 0.6).abs() < 1e-12);
        assert_eq!(inference.inconsistent, vec![1]);
        assert_eq!(inference.used, 2);
        assert_eq!(inference.per_sample[1], None);

        assert_eq!(
            infer_load_from_samples::<(f64, f64)>(&[]),
            Err(ProbeError::EmptyInput)
        );
        assert_eq!(
            infer_load_from_samples(&[(20.0, 10.0)]),
            Err(ProbeError::EmptyInput)
        );
    }
}
