//! TOML input documents: scenarios (for prediction and simulation), sweep
//! specs and MCS rate tables. See `docs/formats.md` for the key reference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{SweepClass, SweepProbe, SweepSpec, DEFAULT_SWEEP_POPULATION};
use crate::model::{ChannelSpec, ClassMix, Discipline, UserClass};
use crate::sim::{PopulationClass, SimConfig, SizeDistribution};
use crate::speedtest::{ProbeSize, RateTable, RhoWindow, WarmupExclusion};
use crate::units::{BitRate, Bits};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot parse document: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Population used for simulation when a class does not set one.
pub const DEFAULT_POPULATION: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    pub capacity: BitRate,
    #[serde(default = "default_discipline")]
    pub discipline: Discipline,
}

fn default_discipline() -> Discipline {
    Discipline::FairSharing
}

impl ChannelDoc {
    pub fn to_spec(&self) -> Result<ChannelSpec<f64>, ConfigError> {
        ChannelSpec::new(self.capacity.0, self.discipline).map_err(|e| invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDoc {
    pub distribution: ServiceKind,
    pub shape: Option<f64>,
    pub cap_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Exponential,
    Deterministic,
    BoundedPareto,
}

impl ServiceDoc {
    pub fn to_distribution(&self) -> Result<SizeDistribution, ConfigError> {
        match self.distribution {
            ServiceKind::Exponential => Ok(SizeDistribution::Exponential),
            ServiceKind::Deterministic => Ok(SizeDistribution::Deterministic),
            ServiceKind::BoundedPareto => Ok(SizeDistribution::BoundedPareto {
                shape: self.shape.unwrap_or(1.5),
                cap_ratio: self.cap_ratio.unwrap_or(1000.0),
            }),
        }
    }
}

fn distribution(service: &Option<ServiceDoc>) -> Result<SizeDistribution, ConfigError> {
    service.as_ref().map_or(
        Ok(SizeDistribution::Exponential),
        ServiceDoc::to_distribution,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDoc {
    pub label: String,
    /// Aggregate class request rate in requests/s.
    pub arrival_rate: Option<f64>,
    /// Per-user request rate; requires `population`.
    pub think_rate: Option<f64>,
    pub mean_size: Bits,
    /// Defaults to the channel capacity.
    pub channel_rate: Option<BitRate>,
    pub population: Option<u32>,
}

impl ClassDoc {
    fn aggregate_rate(&self) -> Result<f64, ConfigError> {
        match (self.arrival_rate, self.think_rate, self.population) {
            (Some(rate), None, _) => Ok(rate),
            (None, Some(think), Some(n)) => Ok(think * f64::from(n)),
            (None, Some(_), None) => Err(invalid(format!(
                "class `{}`: think_rate requires population",
                self.label
            ))),
            (Some(_), Some(_), _) => Err(invalid(format!(
                "class `{}`: give arrival_rate or think_rate, not both",
                self.label
            ))),
            (None, None, _) => Err(invalid(format!(
                "class `{}`: arrival_rate is required",
                self.label
            ))),
        }
    }

    fn to_class(&self, channel: &ChannelSpec<f64>) -> Result<UserClass<f64>, ConfigError> {
        Ok(UserClass::new(
            self.label.clone(),
            self.aggregate_rate()?,
            self.mean_size.0,
            self.channel_rate.map_or(channel.capacity(), |r| r.0),
        ))
    }
}

/// Scenario document shared by `predict` and `simulate`. Simulation keys
/// are ignored by prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub seed: Option<u64>,
    /// Simulated seconds.
    pub horizon: Option<f64>,
    /// Seconds discarded before statistics; defaults to 10% of the horizon.
    pub warmup: Option<f64>,
    pub channel: ChannelDoc,
    pub service: Option<ServiceDoc>,
    #[serde(rename = "class")]
    pub classes: Vec<ClassDoc>,
}

impl ScenarioDoc {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_mix(&self) -> Result<ClassMix<f64>, ConfigError> {
        let channel = self.channel.to_spec()?;
        let classes = self
            .classes
            .iter()
            .map(|c| c.to_class(&channel))
            .collect::<Result<Vec<_>, _>>()?;
        ClassMix::new(channel, classes).map_err(|e| invalid(e.to_string()))
    }

    /// Simulation config; `seed` overrides the document seed.
    pub fn to_sim_config(&self, seed: Option<u64>) -> Result<SimConfig, ConfigError> {
        let channel = self.channel.to_spec()?;
        let horizon = self
            .horizon
            .ok_or_else(|| invalid("simulation needs `horizon`"))?;
        let seed = seed
            .or(self.seed)
            .ok_or_else(|| invalid("simulation needs a seed (document `seed` or --seed)"))?;
        let classes = self
            .classes
            .iter()
            .map(|c| {
                Ok(PopulationClass::new(
                    c.to_class(&channel)?,
                    c.population.unwrap_or(DEFAULT_POPULATION),
                ))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let mut sim = SimConfig::new(
            channel,
            classes,
            distribution(&self.service)?,
            horizon,
            seed,
        );
        if let Some(w) = self.warmup {
            sim = sim.with_warmup(w);
        }
        sim.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(sim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepClassDoc {
    pub label: String,
    pub mean_size: Bits,
    pub channel_rate: Option<BitRate>,
    pub population: Option<u32>,
    /// Relative share of the grid load carried by this class.
    pub share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProbeDoc {
    /// Defaults to the channel capacity.
    pub channel_rates: Option<Vec<BitRate>>,
    pub size: Option<Bits>,
    /// Probe size as a multiple of the mean background request.
    pub size_factor: Option<f64>,
    /// Fixed-duration tests in seconds instead of fixed-size ones.
    pub duration: Option<f64>,
    pub warmup_bits: Option<Bits>,
    pub warmup_seconds: Option<f64>,
    pub gap_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDoc {
    pub seed: Option<u64>,
    pub rho_grid: Vec<f64>,
    pub probes_per_point: usize,
    #[serde(default = "one")]
    pub seeds_per_point: u32,
    #[serde(default = "whole_run")]
    pub rho_window: RhoWindow,
    pub channel: ChannelDoc,
    pub service: Option<ServiceDoc>,
    #[serde(rename = "class")]
    pub classes: Vec<SweepClassDoc>,
    #[serde(default)]
    pub probe: ProbeDoc,
}

fn one() -> u32 {
    1
}

fn whole_run() -> RhoWindow {
    RhoWindow::WholeRun
}

impl SweepDoc {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_spec(&self, seed: Option<u64>) -> Result<SweepSpec, ConfigError> {
        let channel = self.channel.to_spec()?;
        let classes: Vec<SweepClass> = self
            .classes
            .iter()
            .map(|c| SweepClass {
                label: c.label.clone(),
                mean_size: c.mean_size.0,
                channel_rate: c.channel_rate.map_or(channel.capacity(), |r| r.0),
                population: c.population.unwrap_or(DEFAULT_SWEEP_POPULATION),
                share: c.share.unwrap_or(1.0),
            })
            .collect();
        let p = &self.probe;
        let size = match (p.size, p.size_factor, p.duration) {
            (None, None, None) => None,
            (Some(bits), None, None) => Some(ProbeSize::Bits(bits.0)),
            (None, Some(factor), None) => {
                let total: f64 = classes.iter().map(|c| c.share).sum();
                let mean: f64 = classes.iter().map(|c| c.share / total * c.mean_size).sum();
                Some(ProbeSize::Bits(factor * mean))
            }
            (None, None, Some(d)) => Some(ProbeSize::Duration(d)),
            _ => {
                return Err(invalid(
                    "probe: give at most one of size, size_factor, duration",
                ))
            }
        };
        if let Some(ProbeSize::Bits(b) | ProbeSize::Duration(b)) = size {
            if !(b.is_finite() && b > 0.0) {
                return Err(invalid("probe size must be > 0"));
            }
        }
        let exclusion = match (p.warmup_bits, p.warmup_seconds) {
            (None, None) => WarmupExclusion::Bits(0.0),
            (Some(b), None) => WarmupExclusion::Bits(b.0),
            (None, Some(s)) => WarmupExclusion::Seconds(s),
            _ => {
                return Err(invalid(
                    "probe: give warmup_bits or warmup_seconds, not both",
                ))
            }
        };
        let spec = SweepSpec {
            channel,
            classes,
            service: distribution(&self.service)?,
            rho_grid: self.rho_grid.clone(),
            probes_per_point: self.probes_per_point,
            seeds_per_point: self.seeds_per_point,
            seed: seed
                .or(self.seed)
                .ok_or_else(|| invalid("sweep needs a seed (document `seed` or --seed)"))?,
            probe: SweepProbe {
                channel_rates: p.channel_rates.as_ref().map_or_else(
                    || vec![channel.capacity()],
                    |v| v.iter().map(|r| r.0).collect(),
                ),
                size,
                exclusion,
                gap_factor: p.gap_factor.unwrap_or(1.0),
            },
            window: self.rho_window,
        };
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(spec)
    }
}

/// MCS rate table document: a `[mcs]` table with index keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateTableDoc {
    pub technology: Option<String>,
    pub mcs: BTreeMap<String, BitRate>,
}

impl RateTableDoc {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_table(&self) -> Result<RateTable, ConfigError> {
        let rates =
            self.mcs
                .iter()
                .map(|(k, v)| {
                    k.trim().parse::<u32>().map(|i| (i, v.0)).map_err(|_| {
                        invalid(format!("MCS key `{k}` is not a non-negative integer"))
                    })
                })
                .collect::<Result<BTreeMap<u32, f64>, _>>()?;
        RateTable::new(rates).map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SCENARIO: &str = r#"
seed = 4
horizon = 1000.0

[channel]
capacity = "100Mb/s"
discipline = "proportional_fair"

[service]
distribution = "bounded_pareto"
shape = 1.2

[[class]]
label = "near"
arrival_rate = 0.5
mean_size = "20Mb"

[[class]]
label = "far"
think_rate = 0.001
population = 200
mean_size = "10Mb"
channel_rate = "25Mb/s"
"#;

    #[test]
    fn scenario_resolves() {
        let doc = ScenarioDoc::from_toml(SCENARIO).unwrap();
        let mix = doc.to_mix().unwrap();
        assert_eq!(mix.channel().discipline(), Discipline::ProportionalFair);
        assert_relative_eq!(mix.classes()[0].channel_rate, 100e6);
        assert_relative_eq!(mix.classes()[1].arrival_rate, 0.2, max_relative = 1e-12);
        let sim = doc.to_sim_config(Some(9)).unwrap();
        assert_eq!(sim.seed, 9);
        assert_eq!(sim.classes[0].population, DEFAULT_POPULATION);
        assert_relative_eq!(sim.warmup, 100.0);
        assert_eq!(
            sim.service,
            SizeDistribution::BoundedPareto {
                shape: 1.2,
                cap_ratio: 1000.0
            }
        );
    }

    #[test]
    fn scenario_errors() {
        assert!(matches!(
            ScenarioDoc::from_toml("[channel]\ncapacity = \"x\""),
            Err(ConfigError::Parse(_))
        ));
        let no_rate = "[channel]\ncapacity = 1e6\n[[class]]\nlabel = \"a\"\nmean_size = 1";
        assert!(ScenarioDoc::from_toml(no_rate).unwrap().to_mix().is_err());
        let unknown = "typo = 1\nclass = []\n[channel]\ncapacity = 1e6";
        assert!(ScenarioDoc::from_toml(unknown).is_err());
        let no_horizon = ScenarioDoc::from_toml("class = []\n[channel]\ncapacity = 1e6").unwrap();
        assert!(no_horizon.to_sim_config(Some(1)).is_err());
    }

    #[test]
    fn sweep_resolves() {
        let doc = SweepDoc::from_toml(
            r#"
seed = 2
rho_grid = [0.1, 0.5]
probes_per_point = 10
[channel]
capacity = "1Gb/s"
[[class]]
label = "bg"
mean_size = "5Mb"
[probe]
channel_rates = ["1Gb/s", "500Mb/s"]
size_factor = 100
"#,
        )
        .unwrap();
        let spec = doc.to_spec(None).unwrap();
        assert_eq!(spec.window, RhoWindow::WholeRun);
        assert_eq!(spec.probe.channel_rates, vec![1e9, 500e6]);
        assert_eq!(spec.probe.size, Some(ProbeSize::Bits(500e6)));
        assert_eq!(spec.classes[0].population, DEFAULT_SWEEP_POPULATION);

        let mut bad = doc.clone();
        bad.rho_grid = vec![0.5, 0.2];
        assert!(bad.to_spec(None).is_err());
    }

    #[test]
    fn rate_table_parses() {
        let doc = RateTableDoc::from_toml("[mcs]\n0 = \"10Mb/s\"\n1 = 2e7\n").unwrap();
        let table = doc.to_table().unwrap();
        assert_eq!(table.get(1), Some(2e7));
        let bad = RateTableDoc::from_toml("[mcs]\nx = 1\n").unwrap();
        assert!(bad.to_table().is_err());
    }
}
