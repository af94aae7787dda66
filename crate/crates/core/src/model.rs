//! Closed-form throughput model for a shared access channel.
//!
//! Two scheduler disciplines are covered:
//!
//! * **fair sharing** (processor sharing): every active flow drains at `C/n`;
//! * **proportional fair**: a flow whose solo rate is `C_i` drains at `C_i/n`.
//!
//! Under both disciplines the number of active flows evolves like a
//! processor-sharing queue whose work unit is "seconds of solo transmission",
//! so the transfer time of `x` bits at channel rate `C_i` and load `rho` is
//! `(x / C_i) / (1 - rho)` and the per-user throughput is `(1 - rho) C_i`.
//! Proportional fair is reduced to fair sharing by inflating each request by
//! `nu_i = C / C_i`.
//!
//! Units are bits, bit/s and seconds throughout.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unstable load: rho = {rho} (must be < 1)")]
    UnstableLoad { rho: f64 },
    #[error("invalid class `{label}`: {reason}")]
    InvalidClass { label: String, reason: String },
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error(
        "measured speed {speed} bit/s exceeds the reference channel rate {channel_rate} bit/s"
    )]
    InconsistentMeasurement { speed: f64, channel_rate: f64 },
    #[error("no active flows, effective capacity is undefined")]
    EmptySystem,
    #[error("operation requires a {expected} channel, got {actual}")]
    DisciplineMismatch {
        expected: Discipline,
        actual: Discipline,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn invalid(name: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn require_positive<T: Scalar>(name: &'static str, value: T) -> Result<()> {
    if value.is_finite() && value > T::zero() {
        Ok(())
    } else {
        Err(invalid(
            name,
            format!("must be finite and > 0, got {value}"),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    FairSharing,
    ProportionalFair,
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discipline::FairSharing => "fair_sharing",
            Discipline::ProportionalFair => "proportional_fair",
        })
    }
}

/// The shared resource: total capacity `C` and the scheduler discipline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelSpec<T> {
    capacity: T,
    discipline: Discipline,
}

impl<T: Scalar> ChannelSpec<T> {
    pub fn new(capacity: T, discipline: Discipline) -> Result<Self> {
        require_positive("channel capacity", capacity)?;
        Ok(Self {
            capacity,
            discipline,
        })
    }

    pub fn fair(capacity: T) -> Result<Self> {
        Self::new(capacity, Discipline::FairSharing)
    }

    pub fn proportional_fair(capacity: T) -> Result<Self> {
        Self::new(capacity, Discipline::ProportionalFair)
    }

    pub fn capacity(&self) -> T {
        self.capacity
    }

    pub fn discipline(&self) -> Discipline {
        self.discipline
    }

    /// Solo drain rate of a flow whose reference rate is `channel_rate`.
    ///
    /// Fair sharing ignores per-class rates; proportional fair uses them.
    pub fn service_rate(&self, channel_rate: T) -> T {
        match self.discipline {
            Discipline::FairSharing => self.capacity,
            Discipline::ProportionalFair => channel_rate,
        }
    }
}

/// A demand class.
///
/// `arrival_rate` is the class aggregate `lambda_i` in requests/s,
/// `mean_size` the mean request size in bits and `channel_rate` the
/// MCS-determined solo rate `C_i` in bit/s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserClass<T> {
    pub label: String,
    pub arrival_rate: T,
    pub mean_size: T,
    pub channel_rate: T,
}

impl<T: Scalar> UserClass<T> {
    pub fn new(label: impl Into<String>, arrival_rate: T, mean_size: T, channel_rate: T) -> Self {
        Self {
            label: label.into(),
            arrival_rate,
            mean_size,
            channel_rate,
        }
    }

    /// Checks the class against the channel it is meant to share.
    pub fn validate(&self, channel: &ChannelSpec<T>) -> Result<()> {
        let fail = |reason: String| ModelError::InvalidClass {
            label: self.label.clone(),
            reason,
        };
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= T::zero()) {
            return Err(fail(format!(
                "arrival rate must be finite and >= 0, got {}",
                self.arrival_rate
            )));
        }
        if !(self.mean_size.is_finite() && self.mean_size > T::zero()) {
            return Err(fail(format!(
                "mean size must be finite and > 0, got {}",
                self.mean_size
            )));
        }
        if !(self.channel_rate.is_finite() && self.channel_rate > T::zero()) {
            return Err(fail(format!(
                "channel rate must be finite and > 0, got {}",
                self.channel_rate
            )));
        }
        if self.channel_rate > channel.capacity() {
            return Err(fail(format!(
                "channel rate {} exceeds channel capacity {}",
                self.channel_rate,
                channel.capacity()
            )));
        }
        Ok(())
    }
}

/// A channel together with the classes sharing it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMix<T> {
    channel: ChannelSpec<T>,
    classes: Vec<UserClass<T>>,
}

impl<T: Scalar> ClassMix<T> {
    pub fn new(channel: ChannelSpec<T>, classes: Vec<UserClass<T>>) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("class mix", "at least one class is required"));
        }
        for class in &classes {
            class.validate(&channel)?;
        }
        Ok(Self { channel, classes })
    }

    pub fn channel(&self) -> &ChannelSpec<T> {
        &self.channel
    }

    pub fn classes(&self) -> &[UserClass<T>] {
        &self.classes
    }

    /// Total arrival rate `lambda = sum lambda_i`.
    pub fn total_arrival_rate(&self) -> T {
        self.classes
            .iter()
            .fold(T::zero(), |acc, c| acc + c.arrival_rate)
    }

    /// Solo drain rate of class `index` under the channel discipline.
    pub fn service_rate(&self, index: usize) -> T {
        self.channel.service_rate(self.classes[index].channel_rate)
    }
}

/// Utilization `rho` and its per-class decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadPoint<T> {
    rho: T,
    per_class: Vec<T>,
}

impl<T: Scalar> LoadPoint<T> {
    /// Builds a load point from per-class components; `rho` is their sum.
    pub fn from_components(per_class: Vec<T>) -> Result<Self> {
        let mut rho = T::zero();
        for &component in &per_class {
            if !(component.is_finite() && component >= T::zero()) {
                return Err(invalid(
                    "load component",
                    format!("must be finite and >= 0, got {component}"),
                ));
            }
            rho = rho + component;
        }
        if rho >= T::one() {
            return Err(ModelError::UnstableLoad { rho: rho.as_f64() });
        }
        Ok(Self { rho, per_class })
    }

    /// A single-component load point.
    pub fn new(rho: T) -> Result<Self> {
        Self::from_components(vec![rho])
    }

    pub fn idle() -> Self {
        Self {
            rho: T::zero(),
            per_class: vec![T::zero()],
        }
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn per_class(&self) -> &[T] {
        &self.per_class
    }
}

/// Per-flow performance figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePrediction<T> {
    /// Mean transfer time `D` in seconds.
    pub mean_transfer_time: T,
    /// Per-user throughput `v` in bit/s.
    pub per_user_throughput: T,
    /// Transfer time per bit, `d(x)/x`.
    pub time_per_bit: T,
}

/// Utilization of a fair-sharing mix: `rho_i = lambda_i m_i / C`.
pub fn utilization_fair<T: Scalar>(mix: &ClassMix<T>) -> Result<LoadPoint<T>> {
    expect_discipline(mix, Discipline::FairSharing)?;
    let capacity = mix.channel.capacity();
    LoadPoint::from_components(
        mix.classes
            .iter()
            .map(|c| c.arrival_rate * c.mean_size / capacity)
            .collect(),
    )
}

/// Utilization of a proportional-fair mix: `rho_i = lambda_i m_i / C_i`.
///
/// This is the fraction of time the scheduler is busy, the same quantity as
/// `lambda m'_X / C` with the inflated mean demand.
pub fn utilization_proportional_fair<T: Scalar>(mix: &ClassMix<T>) -> Result<LoadPoint<T>> {
    expect_discipline(mix, Discipline::ProportionalFair)?;
    LoadPoint::from_components(
        mix.classes
            .iter()
            .map(|c| c.arrival_rate * c.mean_size / c.channel_rate)
            .collect(),
    )
}

/// Dispatches to the utilization formula matching the mix's discipline.
pub fn utilization<T: Scalar>(mix: &ClassMix<T>) -> Result<LoadPoint<T>> {
    match mix.channel.discipline() {
        Discipline::FairSharing => utilization_fair(mix),
        Discipline::ProportionalFair => utilization_proportional_fair(mix),
    }
}

fn expect_discipline<T: Scalar>(mix: &ClassMix<T>, expected: Discipline) -> Result<()> {
    let actual = mix.channel.discipline();
    if actual == expected {
        Ok(())
    } else {
        Err(ModelError::DisciplineMismatch { expected, actual })
    }
}

/// Mean transfer time `(m / C_i) / (1 - rho)`.
pub fn mean_transfer_time<T: Scalar>(
    mean_size: T,
    channel_rate: T,
    load: &LoadPoint<T>,
) -> Result<T> {
    require_positive("mean size", mean_size)?;
    conditional_transfer_time(mean_size, channel_rate, load)
}

/// Expected transfer time of a request of exactly `size` bits.
pub fn conditional_transfer_time<T: Scalar>(
    size: T,
    channel_rate: T,
    load: &LoadPoint<T>,
) -> Result<T> {
    if !(size.is_finite() && size >= T::zero()) {
        return Err(invalid(
            "request size",
            format!("must be finite and >= 0, got {size}"),
        ));
    }
    require_positive("channel rate", channel_rate)?;
    let rho = stable(load)?;
    Ok(size / channel_rate / (T::one() - rho))
}

/// Per-user throughput `(1 - rho) C_i`.
pub fn per_user_throughput<T: Scalar>(channel_rate: T, load: &LoadPoint<T>) -> Result<T> {
    require_positive("channel rate", channel_rate)?;
    let rho = stable(load)?;
    Ok((T::one() - rho) * channel_rate)
}

fn stable<T: Scalar>(load: &LoadPoint<T>) -> Result<T> {
    let rho = load.rho();
    if rho >= T::one() {
        Err(ModelError::UnstableLoad { rho: rho.as_f64() })
    } else {
        Ok(rho)
    }
}

/// Infers the utilization from a measured per-user speed: `1 - v / C_i`.
pub fn infer_utilization<T: Scalar>(measured_speed: T, channel_rate: T) -> Result<T> {
    require_positive("measured speed", measured_speed)?;
    require_positive("channel rate", channel_rate)?;
    if measured_speed > channel_rate {
        return Err(ModelError::InconsistentMeasurement {
            speed: measured_speed.as_f64(),
            channel_rate: channel_rate.as_f64(),
        });
    }
    Ok(T::one() - measured_speed / channel_rate)
}

/// Work inflation `nu_i = C / C_i` that maps a proportional-fair class onto
/// fair sharing.
pub fn inflation_factor<T: Scalar>(capacity: T, channel_rate: T) -> Result<T> {
    require_positive("capacity", capacity)?;
    require_positive("channel rate", channel_rate)?;
    if channel_rate > capacity {
        return Err(ModelError::InvalidClass {
            label: String::from("<inflation>"),
            reason: format!("channel rate {channel_rate} exceeds capacity {capacity}"),
        });
    }
    Ok(capacity / channel_rate)
}

/// Inflated mean demand `m'_X = sum (lambda_i / lambda) nu_i m_i`.
///
/// `lambda m'_X / C` equals the proportional-fair utilization. On a
/// fair-sharing mix every `nu_i` is 1.
pub fn equivalent_mean_demand<T: Scalar>(mix: &ClassMix<T>) -> Result<T> {
    let total = mix.total_arrival_rate();
    if total <= T::zero() {
        return Err(invalid("class mix", "total arrival rate must be > 0"));
    }
    let capacity = mix.channel.capacity();
    let mut demand = T::zero();
    for (i, class) in mix.classes.iter().enumerate() {
        let nu = inflation_factor(capacity, mix.service_rate(i))?;
        demand = demand + class.arrival_rate / total * nu * class.mean_size;
    }
    Ok(demand)
}

/// Instantaneous proportional-fair allocation for a set of active flows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveCapacity<T> {
    /// `C' = sum C_j / n`.
    pub capacity: T,
    /// Common share `alpha = c_i / C_i = 1 / n`.
    pub share: T,
    /// Instantaneous rates `c_i = C_i / n`.
    pub rates: Vec<T>,
}

pub fn effective_capacity<T: Scalar>(active_channel_rates: &[T]) -> Result<EffectiveCapacity<T>> {
    if active_channel_rates.is_empty() {
        return Err(ModelError::EmptySystem);
    }
    for &rate in active_channel_rates {
        require_positive("channel rate", rate)?;
    }
    let n = T::from_count(active_channel_rates.len());
    let total = active_channel_rates
        .iter()
        .fold(T::zero(), |acc, &r| acc + r);
    Ok(EffectiveCapacity {
        capacity: total / n,
        share: T::one() / n,
        rates: active_channel_rates.iter().map(|&r| r / n).collect(),
    })
}

/// Per-class figures of a mix prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPrediction<T> {
    pub label: String,
    pub rho: T,
    pub service_rate: T,
    pub mean_transfer_time: T,
    pub throughput: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixPrediction<T> {
    pub load: LoadPoint<T>,
    /// Arrival-weighted mean transfer time; `None` when no class has demand.
    pub mean_transfer_time: Option<T>,
    pub classes: Vec<ClassPrediction<T>>,
}

/// Evaluates utilization, transfer times and throughputs for every class.
pub fn predict_mix<T: Scalar>(mix: &ClassMix<T>) -> Result<MixPrediction<T>> {
    let load = utilization(mix)?;
    let mut classes = Vec::with_capacity(mix.classes.len());
    for (i, class) in mix.classes.iter().enumerate() {
        let rate = mix.service_rate(i);
        classes.push(ClassPrediction {
            label: class.label.clone(),
            rho: load.per_class()[i],
            service_rate: rate,
            mean_transfer_time: mean_transfer_time(class.mean_size, rate, &load)?,
            throughput: per_user_throughput(rate, &load)?,
        });
    }
    let mean_transfer_time = match equivalent_mean_demand(mix) {
        Ok(demand) => Some(mean_transfer_time(demand, mix.channel.capacity(), &load)?),
        Err(_) => None,
    };
    Ok(MixPrediction {
        load,
        mean_transfer_time,
        classes,
    })
}

/// `N` users alternating exponential think periods (rate `gamma`) with a
/// transfer on a shared processor-sharing channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinitePopulationSpec<T> {
    population: u32,
    think_rate: T,
    mean_size: T,
    capacity: T,
}

impl<T: Scalar> FinitePopulationSpec<T> {
    pub fn new(population: u32, think_rate: T, mean_size: T, capacity: T) -> Result<Self> {
        if population == 0 {
            return Err(invalid("population", "must be >= 1"));
        }
        require_positive("think rate", think_rate)?;
        require_positive("mean size", mean_size)?;
        require_positive("capacity", capacity)?;
        Ok(Self {
            population,
            think_rate,
            mean_size,
            capacity,
        })
    }

    pub fn population(&self) -> u32 {
        self.population
    }

    pub fn think_rate(&self) -> T {
        self.think_rate
    }

    pub fn mean_size(&self) -> T {
        self.mean_size
    }

    pub fn capacity(&self) -> T {
        self.capacity
    }

    /// Completion rate of a lone transfer, `mu = C / m_X`.
    pub fn service_rate(&self) -> T {
        self.capacity / self.mean_size
    }
}

/// Above this population the product form is evaluated in log space.
const LOG_SPACE_POPULATION: u32 = 50;

/// Stationary distribution of the number of active transfers, `P(0..=N)`.
///
/// Birth-death chain with birth rate `(N - n) gamma` and death rate `mu`:
/// `P(n) ∝ N! / (N - n)! (gamma / mu)^n`.
pub fn finite_population_distribution<T: Scalar>(spec: &FinitePopulationSpec<T>) -> Vec<T> {
    let population = spec.population as usize;
    let ratio = spec.think_rate / spec.service_rate();
    if spec.population <= LOG_SPACE_POPULATION {
        let mut weights = Vec::with_capacity(population + 1);
        weights.push(T::one());
        for n in 1..=population {
            let prev = weights[n - 1];
            weights.push(prev * T::from_count(population - n + 1) * ratio);
        }
        let total = weights.iter().fold(T::zero(), |acc, &w| acc + w);
        if total.is_finite() && total > T::zero() {
            return weights.into_iter().map(|w| w / total).collect();
        }
    }
    log_space_distribution(population, ratio)
}

fn log_space_distribution<T: Scalar>(population: usize, ratio: T) -> Vec<T> {
    let log_ratio = ratio.ln();
    let mut log_weights = Vec::with_capacity(population + 1);
    log_weights.push(T::zero());
    for n in 1..=population {
        let prev = log_weights[n - 1];
        log_weights.push(prev + T::from_count(population - n + 1).ln() + log_ratio);
    }
    let max = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total = weights.iter().fold(T::zero(), |acc, &w| acc + w);
    weights.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinitePopulationMetrics<T> {
    pub distribution: Vec<T>,
    /// `E[n]`.
    pub mean_in_system: T,
    /// `lambda_eff = gamma (N - E[n])`.
    pub effective_arrival_rate: T,
    /// Busy fraction `1 - P(0) = lambda_eff m_X / C`.
    pub utilization: T,
    pub prediction: RatePrediction<T>,
}

pub fn finite_population_metrics<T: Scalar>(
    spec: &FinitePopulationSpec<T>,
) -> FinitePopulationMetrics<T> {
    let distribution = finite_population_distribution(spec);
    let mean_in_system = distribution
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (n, &p)| acc + T::from_count(n) * p);
    let population = T::from_count(spec.population as usize);
    let effective_arrival_rate = spec.think_rate * (population - mean_in_system);
    // Little's law; the ratio tends to 1/mu as gamma -> 0.
    let mean_transfer_time = if mean_in_system > T::zero() && effective_arrival_rate > T::zero() {
        mean_in_system / effective_arrival_rate
    } else {
        spec.mean_size / spec.capacity
    };
    let utilization = T::one() - distribution[0];
    FinitePopulationMetrics {
        distribution,
        mean_in_system,
        effective_arrival_rate,
        utilization,
        prediction: RatePrediction {
            mean_transfer_time,
            per_user_throughput: spec.mean_size / mean_transfer_time,
            time_per_bit: mean_transfer_time / spec.mean_size,
        },
    }
}

/// Mean transfer time and throughput of the finite-population model.
pub fn finite_population_throughput<T: Scalar>(
    spec: &FinitePopulationSpec<T>,
) -> RatePrediction<T> {
    finite_population_metrics(spec).prediction
}

/// Finds the per-user think rate at which the finite-population busy
/// fraction equals `target`.
pub fn think_rate_for_utilization<T: Scalar>(
    population: u32,
    mean_size: T,
    capacity: T,
    target: T,
) -> Result<T> {
    if !(target > T::zero() && target < T::one()) {
        return Err(invalid(
            "target utilization",
            format!("must lie in (0, 1), got {target}"),
        ));
    }
    let busy = |gamma: T| -> Result<T> {
        Ok(finite_population_metrics(&FinitePopulationSpec::new(
            population, gamma, mean_size, capacity,
        )?)
        .utilization)
    };
    let mu = capacity / mean_size;
    let (mut lo, mut hi) = (mu * T::lit(1e-12), mu * T::lit(1e12));
    // Busy fraction is increasing in gamma; bisect geometrically.
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if busy(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= hi * T::epsilon() * T::lit(4.0) {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}
