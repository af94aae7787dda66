//! Event-driven simulator of a shared access channel.
//!
//! Each user of a class alternates an exponential think period with one
//! transfer. While `n` flows are active a flow drains at `C/n` under fair
//! sharing or at `C_j/n` under proportional fair. Flows are drained
//! analytically between events: every active flow advances by `1/n` seconds
//! of solo transmission per second, so a single virtual clock and a heap of
//! finish tags give the next completion in `O(log n)`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChannelSpec, UserClass};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("probe {index} did not complete within the horizon")]
    ProbeStarved {
        index: usize,
        injection: Option<f64>,
    },
}

fn config_error(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

/// Shape of the request-size distribution; the mean comes from each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDistribution {
    Exponential,
    Deterministic,
    /// Pareto truncated at `cap_ratio` times the mean.
    BoundedPareto {
        shape: f64,
        cap_ratio: f64,
    },
}

impl SizeDistribution {
    pub fn name(&self) -> &'static str {
        match self {
            SizeDistribution::Exponential => "exponential",
            SizeDistribution::Deterministic => "deterministic",
            SizeDistribution::BoundedPareto { .. } => "bounded_pareto",
        }
    }
}

/// Unit-mean sampler; class sizes are `mean * sample`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum UnitSampler {
    Exponential,
    Deterministic,
    BoundedPareto {
        lower: f64,
        upper: f64,
        shape: f64,
        tail: f64,
    },
}

impl UnitSampler {
    pub(crate) fn new(distribution: SizeDistribution) -> Result<Self, SimError> {
        Ok(match distribution {
            SizeDistribution::Exponential => UnitSampler::Exponential,
            SizeDistribution::Deterministic => UnitSampler::Deterministic,
            SizeDistribution::BoundedPareto { shape, cap_ratio } => {
                if !(shape.is_finite() && shape > 0.0) {
                    return Err(config_error(format!(
                        "pareto shape must be > 0, got {shape}"
                    )));
                }
                if !(cap_ratio.is_finite() && cap_ratio > 1.0) {
                    return Err(config_error(format!(
                        "pareto cap ratio must be > 1, got {cap_ratio}"
                    )));
                }
                let lower = pareto_lower_bound(shape, cap_ratio);
                UnitSampler::BoundedPareto {
                    lower,
                    upper: cap_ratio,
                    shape,
                    tail: (lower / cap_ratio).powf(shape),
                }
            }
        })
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            UnitSampler::Exponential => Exp1.sample(rng),
            UnitSampler::Deterministic => 1.0,
            UnitSampler::BoundedPareto {
                lower,
                upper,
                shape,
                tail,
            } => {
                let u: f64 = rng.random();
                let x = lower / (1.0 - u * (1.0 - tail)).powf(1.0 / shape);
                x.min(upper)
            }
        }
    }
}

/// Mean of a Pareto(shape) truncated to `[lower, upper]`.
pub(crate) fn bounded_pareto_mean(lower: f64, upper: f64, shape: f64) -> f64 {
    let ratio = lower / upper;
    if (shape - 1.0).abs() < 1e-12 {
        return upper * lower / (upper - lower) * (upper / lower).ln();
    }
    shape * lower.powf(shape) / (1.0 - ratio.powf(shape))
        * (lower.powf(1.0 - shape) - upper.powf(1.0 - shape))
        / (shape - 1.0)
}

/// Lower bound giving a unit mean for the given shape and cap.
fn pareto_lower_bound(shape: f64, cap: f64) -> f64 {
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bounded_pareto_mean(mid, cap, shape) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A class with its finite user population.
///
/// The class arrival rate is the aggregate `lambda_i`; each of the
/// `population` users thinks at rate `lambda_i / population`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationClass {
    pub class: UserClass<f64>,
    pub population: u32,
}

impl PopulationClass {
    pub fn new(class: UserClass<f64>, population: u32) -> Self {
        Self { class, population }
    }

    pub fn think_rate(&self) -> f64 {
        self.class.arrival_rate / f64::from(self.population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub channel: ChannelSpec<f64>,
    pub classes: Vec<PopulationClass>,
    pub service: SizeDistribution,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
}

/// Fraction of the horizon excluded from statistics unless set explicitly.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

impl SimConfig {
    pub fn new(
        channel: ChannelSpec<f64>,
        classes: Vec<PopulationClass>,
        service: SizeDistribution,
        horizon: f64,
        seed: u64,
    ) -> Self {
        Self {
            channel,
            classes,
            service,
            horizon,
            warmup: DEFAULT_WARMUP_FRACTION * horizon,
            seed,
        }
    }

    pub fn with_warmup(mut self, warmup: f64) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(config_error(format!(
                "horizon must be finite and > 0, got {}",
                self.horizon
            )));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(config_error(format!(
                "warmup must satisfy 0 <= warmup < horizon, got {} (horizon {})",
                self.warmup, self.horizon
            )));
        }
        for entry in &self.classes {
            entry
                .class
                .validate(&self.channel)
                .map_err(|e| config_error(e.to_string()))?;
            if entry.population == 0 {
                return Err(config_error(format!(
                    "class `{}` needs a population >= 1",
                    entry.class.label
                )));
            }
        }
        UnitSampler::new(self.service)?;
        Ok(())
    }

    pub fn total_population(&self) -> usize {
        self.classes.iter().map(|c| c.population as usize).sum()
    }

    /// Nominal offered load `sum lambda_i m_i / r_i` where `r_i` is the solo
    /// drain rate under the channel discipline.
    pub fn offered_load(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| {
                c.class.arrival_rate * c.class.mean_size
                    / self.channel.service_rate(c.class.channel_rate)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub label: String,
    pub completed: u64,
    pub mean_size: f64,
    pub mean_transfer_time: f64,
    pub transfer_time_half_width: f64,
    /// Mean over flows of `size / transfer_time`.
    pub mean_throughput: f64,
    pub throughput_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStats {
    pub classes: Vec<ClassStats>,
    /// Fraction of observed time with at least one active flow.
    pub busy_fraction: f64,
    /// Time spent with `n` active flows, indexed by `n`.
    pub occupancy_time: Vec<f64>,
    /// `horizon - warmup`.
    pub observed_time: f64,
    pub completed: u64,
    pub events: u64,
}

/// Normalizes the time-in-state histogram into a probability vector.
pub fn occupancy_histogram(stats: &SimStats) -> Vec<f64> {
    let total: f64 = stats.occupancy_time.iter().sum();
    if total <= 0.0 {
        return vec![1.0];
    }
    stats.occupancy_time.iter().map(|t| t / total).collect()
}

/// One completed transfer, recorded by [`run_simulation_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowRecord {
    pub class: usize,
    pub user: usize,
    pub size: f64,
    pub start: f64,
    pub end: f64,
}

pub fn run_simulation(config: &SimConfig) -> Result<SimStats, SimError> {
    Engine::new(config, None, false)?.run().map(|out| out.stats)
}

/// Like [`run_simulation`], also returning every transfer observed after warmup.
pub fn run_simulation_traced(config: &SimConfig) -> Result<(SimStats, Vec<FlowRecord>), SimError> {
    Engine::new(config, None, true)?
        .run()
        .map(|out| (out.stats, out.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassGap {
    pub label: String,
    pub mean_transfer_time_a: f64,
    pub mean_transfer_time_b: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsensitivityReport {
    pub distribution_a: SizeDistribution,
    pub distribution_b: SizeDistribution,
    pub classes: Vec<ClassGap>,
    pub max_relative_gap: f64,
    pub completed_a: u64,
    pub completed_b: u64,
}

/// Runs two configurations that differ only in the size distribution and
/// compares per-class mean transfer times.
pub fn insensitivity_check(a: &SimConfig, b: &SimConfig) -> Result<InsensitivityReport, SimError> {
    if a.channel != b.channel
        || a.classes != b.classes
        || a.horizon != b.horizon
        || a.warmup != b.warmup
    {
        return Err(config_error(
            "insensitivity check needs configs that differ only in the size distribution",
        ));
    }
    let (sa, sb) = rayon::join(|| run_simulation(a), || run_simulation(b));
    let (sa, sb) = (sa?, sb?);
    let classes: Vec<ClassGap> = sa
        .classes
        .iter()
        .zip(&sb.classes)
        .map(|(x, y)| ClassGap {
            label: x.label.clone(),
            mean_transfer_time_a: x.mean_transfer_time,
            mean_transfer_time_b: y.mean_transfer_time,
            relative_gap: relative_gap(x.mean_transfer_time, y.mean_transfer_time),
        })
        .collect();
    let max_relative_gap = classes.iter().map(|c| c.relative_gap).fold(0.0, f64::max);
    Ok(InsensitivityReport {
        distribution_a: a.service,
        distribution_b: b.service,
        classes,
        max_relative_gap,
        completed_a: sa.completed,
        completed_b: sb.completed,
    })
}

fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------------------
// Engine

/// Absolute slack when deciding that a flow has no bits left.
pub const COMPLETION_SLACK_BITS: f64 = 1e-9;

const BATCHES: usize = 20;
/// Two-sided 95% Student-t quantile with `BATCHES - 1` degrees of freedom.
const T_QUANTILE: f64 = 2.093;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ProbeVolume {
    Bits(f64),
    Duration(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ProbeExclusion {
    Bits(f64),
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Injections {
    At(Vec<f64>),
    /// First probe at `start`; probe `k + 1` goes in `gaps[k]` after probe `k` ends.
    AfterPrevious {
        start: f64,
        gaps: Vec<f64>,
    },
}

impl Injections {
    fn count(&self) -> usize {
        match self {
            Injections::At(times) => times.len(),
            Injections::AfterPrevious { gaps, .. } => gaps.len(),
        }
    }
}

/// Probe schedule handed to the engine by the speed-test layer.
#[derive(Debug, Clone)]
pub(crate) struct ProbePlan {
    pub injections: Injections,
    pub volume: ProbeVolume,
    pub exclusion: ProbeExclusion,
    /// Reference rate `C_i` of the probe's MCS.
    pub channel_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ProbeOutcome {
    pub injection: f64,
    pub end: f64,
    pub measure_start: f64,
    pub measured_bits: f64,
    /// Solo drain rate the probe was scheduled with.
    pub service_rate: f64,
    /// Background work (seconds of solo transmission) served over the probe lifetime.
    pub background_work: f64,
}

pub(crate) struct EngineOutput {
    pub stats: SimStats,
    pub trace: Vec<FlowRecord>,
    pub probes: Vec<ProbeOutcome>,
    /// Background work served over the observed window, per second.
    pub background_utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimerKind {
    UserArrival = 0,
    ProbeInject = 1,
    ProbeExclusionEnd = 2,
    ProbeStop = 3,
}

#[derive(Debug, Clone, Copy)]
struct Timer {
    time: f64,
    kind: TimerKind,
    index: usize,
}

impl Timer {
    fn rank(&self) -> u8 {
        match self.kind {
            TimerKind::UserArrival => 0,
            _ => 1,
        }
    }
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Timer {}
impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timer {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.rank().cmp(&other.rank()))
            .then(self.index.cmp(&other.index))
            .then(self.kind.cmp(&other.kind))
    }
}

#[derive(Debug, Clone, Copy)]
struct TagEntry {
    tag: f64,
    owner: usize,
    milestone: bool,
    slot: usize,
    generation: u64,
}

impl PartialEq for TagEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for TagEntry {}
impl PartialOrd for TagEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TagEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tag
            .total_cmp(&other.tag)
            .then(self.owner.cmp(&other.owner))
            .then(other.milestone.cmp(&self.milestone))
            .then(self.generation.cmp(&other.generation))
    }
}

#[derive(Debug, Clone, Copy)]
enum Owner {
    User(usize),
    Probe(usize),
}

/// An active transfer; remaining bits are `(tag - clock) * rate`.
#[derive(Debug, Clone, Copy)]
struct FlowState {
    owner: Owner,
    bits: f64,
    rate: f64,
    start_time: f64,
    start_tag: f64,
    generation: u64,
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    count: u64,
    size_sum: f64,
    time_sum: f64,
    throughput_sum: f64,
    batch_count: [u64; BATCHES],
    batch_time: [f64; BATCHES],
    batch_throughput: [f64; BATCHES],
}

impl Accumulator {
    fn push(&mut self, batch: usize, size: f64, time: f64) {
        let throughput = size / time;
        self.count += 1;
        self.size_sum += size;
        self.time_sum += time;
        self.throughput_sum += throughput;
        self.batch_count[batch] += 1;
        self.batch_time[batch] += time;
        self.batch_throughput[batch] += throughput;
    }

    fn finish(&self, label: &str) -> ClassStats {
        let n = self.count as f64;
        let mean = |s: f64| if self.count > 0 { s / n } else { f64::NAN };
        ClassStats {
            label: label.to_string(),
            completed: self.count,
            mean_size: mean(self.size_sum),
            mean_transfer_time: mean(self.time_sum),
            transfer_time_half_width: batch_half_width(&self.batch_count, &self.batch_time),
            mean_throughput: mean(self.throughput_sum),
            throughput_half_width: batch_half_width(&self.batch_count, &self.batch_throughput),
        }
    }
}

fn batch_half_width(counts: &[u64; BATCHES], sums: &[f64; BATCHES]) -> f64 {
    let means: Vec<f64> = counts
        .iter()
        .zip(sums)
        .filter(|(c, _)| **c > 0)
        .map(|(c, s)| s / *c as f64)
        .collect();
    if means.len() < 2 {
        return f64::NAN;
    }
    let k = means.len() as f64;
    let grand = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
    T_QUANTILE * (var / k).sqrt()
}

struct Engine<'a> {
    config: &'a SimConfig,
    rng: ChaCha8Rng,
    sampler: UnitSampler,
    user_class: Vec<usize>,
    think: Vec<Option<Exp<f64>>>,
    user_rate: Vec<f64>,
    timers: BinaryHeap<Reverse<Timer>>,
    tags: BinaryHeap<Reverse<TagEntry>>,
    flows: Vec<Option<FlowState>>,
    free_slots: Vec<usize>,
    next_generation: u64,
    now: f64,
    clock: f64,
    active: usize,
    active_background: usize,
    background_work: f64,
    background_work_observed: f64,
    occupancy: Vec<f64>,
    accumulators: Vec<Accumulator>,
    events: u64,
    trace: Option<Vec<FlowRecord>>,
    probes: Option<ProbePlan>,
    probe_slots: Vec<Option<usize>>,
    probe_started: Vec<(f64, f64)>,
    probe_measure: Vec<Option<(f64, f64)>>,
    probe_done: Vec<Option<ProbeOutcome>>,
    probe_injected: Vec<bool>,
}

impl<'a> Engine<'a> {
    fn new(
        config: &'a SimConfig,
        probes: Option<ProbePlan>,
        trace: bool,
    ) -> Result<Self, SimError> {
        config.validate()?;
        if let Some(plan) = &probes {
            validate_probe_plan(config, plan)?;
        }
        let sampler = UnitSampler::new(config.service)?;
        let mut user_class = Vec::with_capacity(config.total_population());
        let mut think = Vec::with_capacity(config.classes.len());
        let mut user_rate = Vec::with_capacity(config.classes.len());
        for (i, entry) in config.classes.iter().enumerate() {
            user_class.extend(std::iter::repeat_n(i, entry.population as usize));
            let gamma = entry.think_rate();
            think.push(if gamma > 0.0 {
                Some(Exp::new(gamma).map_err(|e| config_error(e.to_string()))?)
            } else {
                None
            });
            user_rate.push(config.channel.service_rate(entry.class.channel_rate));
        }
        let probe_count = probes.as_ref().map_or(0, |p| p.injections.count());
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            sampler,
            user_class,
            think,
            user_rate,
            timers: BinaryHeap::new(),
            tags: BinaryHeap::new(),
            flows: Vec::new(),
            free_slots: Vec::new(),
            next_generation: 0,
            now: 0.0,
            clock: 0.0,
            active: 0,
            active_background: 0,
            background_work: 0.0,
            background_work_observed: 0.0,
            occupancy: vec![0.0],
            accumulators: vec![Accumulator::default(); config.classes.len()],
            events: 0,
            trace: trace.then(Vec::new),
            probes,
            probe_slots: vec![None; probe_count],
            probe_started: vec![(0.0, 0.0); probe_count],
            probe_measure: vec![None; probe_count],
            probe_done: vec![None; probe_count],
            probe_injected: vec![false; probe_count],
        })
    }

    fn run(mut self) -> Result<EngineOutput, SimError> {
        for user in 0..self.user_class.len() {
            self.schedule_think(user);
        }
        if let Some(plan) = &self.probes {
            let first = match &plan.injections {
                Injections::At(times) => times.clone(),
                Injections::AfterPrevious { start, gaps } => {
                    if gaps.is_empty() {
                        Vec::new()
                    } else {
                        vec![*start]
                    }
                }
            };
            for (index, time) in first.into_iter().enumerate() {
                self.timers.push(Reverse(Timer {
                    time,
                    kind: TimerKind::ProbeInject,
                    index,
                }));
            }
        }

        let horizon = self.config.horizon;
        loop {
            self.drop_stale_tags();
            let completion = self.tags.peek().map(|Reverse(e)| {
                let ahead = (e.tag - self.clock).max(0.0);
                (self.now + ahead * self.active as f64, e.tag)
            });
            let timer = self.timers.peek().map(|Reverse(t)| t.time);
            match (completion, timer) {
                (Some((time, tag)), t) if time <= horizon && t.is_none_or(|t| time <= t) => {
                    self.advance(time);
                    if tag > self.clock {
                        self.clock = tag;
                    }
                    self.complete_due();
                }
                (_, Some(time)) if time <= horizon => {
                    let Reverse(timer) = self.timers.pop().expect("peeked");
                    self.advance(time);
                    self.fire(timer);
                }
                _ => {
                    self.advance(horizon);
                    break;
                }
            }
        }
        self.finish()
    }

    fn schedule_think(&mut self, user: usize) {
        let class = self.user_class[user];
        if let Some(exp) = &self.think[class] {
            let delay: f64 = exp.sample(&mut self.rng);
            self.timers.push(Reverse(Timer {
                time: self.now + delay,
                kind: TimerKind::UserArrival,
                index: user,
            }));
        }
    }

    fn advance(&mut self, to: f64) {
        let dt = to - self.now;
        if dt > 0.0 {
            let (start, end) = (
                self.now.max(self.config.warmup),
                to.min(self.config.horizon),
            );
            if self.active > 0 {
                let n = self.active as f64;
                self.clock += dt / n;
                let share = self.active_background as f64 / n;
                self.background_work += dt * share;
                if end > start {
                    self.background_work_observed += (end - start) * share;
                }
            }
            if end > start {
                if self.occupancy.len() <= self.active {
                    self.occupancy.resize(self.active + 1, 0.0);
                }
                self.occupancy[self.active] += end - start;
            }
        }
        self.now = to;
    }

    fn owner_rank(&self, owner: Owner) -> usize {
        match owner {
            Owner::User(u) => u,
            Owner::Probe(p) => self.user_class.len() + p,
        }
    }

    fn start_flow(&mut self, owner: Owner, bits: f64, rate: f64) -> usize {
        let generation = self.next_generation;
        self.next_generation += 1;
        let tag = self.clock + bits / rate;
        let flow = FlowState {
            owner,
            bits,
            rate,
            start_time: self.now,
            start_tag: self.clock,
            generation,
        };
        let slot = match self.free_slots.pop() {
            Some(slot) => {
                self.flows[slot] = Some(flow);
                slot
            }
            None => {
                self.flows.push(Some(flow));
                self.flows.len() - 1
            }
        };
        if tag.is_finite() {
            self.tags.push(Reverse(TagEntry {
                tag,
                owner: self.owner_rank(owner),
                milestone: false,
                slot,
                generation,
            }));
        }
        self.active += 1;
        if matches!(owner, Owner::User(_)) {
            self.active_background += 1;
        }
        slot
    }

    fn remove_flow(&mut self, slot: usize) -> FlowState {
        let flow = self.flows[slot].take().expect("active flow");
        self.free_slots.push(slot);
        self.active -= 1;
        if matches!(flow.owner, Owner::User(_)) {
            self.active_background -= 1;
        }
        if self.active == 0 {
            // Idle channel: rebase the virtual clock.
            self.clock = 0.0;
            self.tags.clear();
        }
        flow
    }

    fn is_live(&self, entry: &TagEntry) -> bool {
        matches!(self.flows.get(entry.slot), Some(Some(f)) if f.generation == entry.generation)
    }

    fn drop_stale_tags(&mut self) {
        while let Some(Reverse(entry)) = self.tags.peek() {
            if self.is_live(entry) {
                break;
            }
            self.tags.pop();
        }
    }

    fn complete_due(&mut self) {
        loop {
            self.drop_stale_tags();
            let Some(&Reverse(entry)) = self.tags.peek() else {
                break;
            };
            let flow = self.flows[entry.slot].expect("live entry");
            if (entry.tag - self.clock) * flow.rate > COMPLETION_SLACK_BITS {
                break;
            }
            self.tags.pop();
            self.events += 1;
            if entry.milestone {
                if let Owner::Probe(p) = flow.owner {
                    let attained = (self.clock - flow.start_tag) * flow.rate;
                    self.probe_measure[p] = Some((self.now, attained));
                }
                continue;
            }
            let flow = self.remove_flow(entry.slot);
            match flow.owner {
                Owner::User(user) => {
                    self.record_transfer(user, flow.bits, flow.start_time);
                    self.schedule_think(user);
                }
                Owner::Probe(p) => self.finish_probe(p, flow, flow.bits),
            }
        }
    }

    fn record_transfer(&mut self, user: usize, bits: f64, start: f64) {
        let warmup = self.config.warmup;
        if start < warmup {
            return;
        }
        let class = self.user_class[user];
        let elapsed = self.now - start;
        if elapsed <= 0.0 {
            return;
        }
        let window = self.config.horizon - warmup;
        let batch = (((self.now - warmup) / window * BATCHES as f64) as usize).min(BATCHES - 1);
        self.accumulators[class].push(batch, bits, elapsed);
        if let Some(trace) = &mut self.trace {
            trace.push(FlowRecord {
                class,
                user,
                size: bits,
                start,
                end: self.now,
            });
        }
    }

    fn fire(&mut self, timer: Timer) {
        self.events += 1;
        match timer.kind {
            TimerKind::UserArrival => {
                let user = timer.index;
                let class = self.user_class[user];
                let bits =
                    self.config.classes[class].class.mean_size * self.sampler.sample(&mut self.rng);
                let rate = self.user_rate[class];
                self.start_flow(Owner::User(user), bits, rate);
            }
            TimerKind::ProbeInject => self.inject_probe(timer.index),
            TimerKind::ProbeExclusionEnd => {
                let p = timer.index;
                if let Some(slot) = self.probe_slots[p] {
                    let flow = self.flows[slot].expect("probe flow");
                    let attained = (self.clock - flow.start_tag) * flow.rate;
                    self.probe_measure[p] = Some((self.now, attained));
                }
            }
            TimerKind::ProbeStop => {
                let p = timer.index;
                if let Some(slot) = self.probe_slots[p] {
                    let attained = {
                        let flow = self.flows[slot].expect("probe flow");
                        (self.clock - flow.start_tag) * flow.rate
                    };
                    let flow = self.remove_flow(slot);
                    self.finish_probe(p, flow, attained);
                }
            }
        }
    }

    fn inject_probe(&mut self, p: usize) {
        let plan = self.probes.as_ref().expect("probe plan");
        let (volume, exclusion) = (plan.volume, plan.exclusion);
        let rate = self.config.channel.service_rate(plan.channel_rate);
        let bits = match volume {
            ProbeVolume::Bits(bits) => bits,
            ProbeVolume::Duration(_) => f64::INFINITY,
        };
        let slot = self.start_flow(Owner::Probe(p), bits, rate);
        self.probe_slots[p] = Some(slot);
        self.probe_started[p] = (self.now, self.background_work);
        self.probe_injected[p] = true;
        match exclusion {
            ProbeExclusion::Bits(w) if w > 0.0 => {
                let flow = self.flows[slot].expect("probe flow");
                self.tags.push(Reverse(TagEntry {
                    tag: flow.start_tag + w / rate,
                    owner: self.owner_rank(flow.owner),
                    milestone: true,
                    slot,
                    generation: flow.generation,
                }));
            }
            ProbeExclusion::Seconds(s) if s > 0.0 => self.timers.push(Reverse(Timer {
                time: self.now + s,
                kind: TimerKind::ProbeExclusionEnd,
                index: p,
            })),
            _ => self.probe_measure[p] = Some((self.now, 0.0)),
        }
        if let ProbeVolume::Duration(d) = volume {
            self.timers.push(Reverse(Timer {
                time: self.now + d,
                kind: TimerKind::ProbeStop,
                index: p,
            }));
        }
    }

    fn finish_probe(&mut self, p: usize, flow: FlowState, attained: f64) {
        self.probe_slots[p] = None;
        let (injection, work_at_start) = self.probe_started[p];
        let (measure_start, excluded_bits) = self.probe_measure[p].unwrap_or((self.now, attained));
        self.probe_done[p] = Some(ProbeOutcome {
            injection,
            end: self.now,
            measure_start,
            measured_bits: attained - excluded_bits,
            service_rate: flow.rate,
            background_work: self.background_work - work_at_start,
        });
        if let Some(ProbePlan {
            injections: Injections::AfterPrevious { gaps, .. },
            ..
        }) = &self.probes
        {
            if p + 1 < gaps.len() {
                self.timers.push(Reverse(Timer {
                    time: self.now + gaps[p],
                    kind: TimerKind::ProbeInject,
                    index: p + 1,
                }));
            }
        }
    }

    fn finish(self) -> Result<EngineOutput, SimError> {
        let observed_time = self.config.horizon - self.config.warmup;
        let idle = self.occupancy.first().copied().unwrap_or(0.0);
        let classes: Vec<ClassStats> = self
            .accumulators
            .iter()
            .zip(&self.config.classes)
            .map(|(acc, entry)| acc.finish(&entry.class.label))
            .collect();
        let completed = classes.iter().map(|c| c.completed).sum();
        let mut probes = Vec::with_capacity(self.probe_done.len());
        for (index, outcome) in self.probe_done.iter().enumerate() {
            match outcome {
                Some(o) => probes.push(*o),
                None => {
                    return Err(SimError::ProbeStarved {
                        index,
                        injection: self.probe_injected[index]
                            .then_some(self.probe_started[index].0),
                    })
                }
            }
        }
        Ok(EngineOutput {
            stats: SimStats {
                classes,
                busy_fraction: (1.0 - idle / observed_time).clamp(0.0, 1.0),
                occupancy_time: self.occupancy,
                observed_time,
                completed,
                events: self.events,
            },
            trace: self.trace.unwrap_or_default(),
            probes,
            background_utilization: self.background_work_observed / observed_time,
        })
    }
}

fn validate_probe_plan(config: &SimConfig, plan: &ProbePlan) -> Result<(), SimError> {
    if !(plan.channel_rate.is_finite() && plan.channel_rate > 0.0) {
        return Err(config_error("probe channel rate must be > 0"));
    }
    if plan.channel_rate > config.channel.capacity() {
        return Err(config_error(format!(
            "probe channel rate {} exceeds channel capacity {}",
            plan.channel_rate,
            config.channel.capacity()
        )));
    }
    match plan.volume {
        ProbeVolume::Bits(b) if !(b.is_finite() && b > 0.0) => {
            return Err(config_error("probe size must be > 0"))
        }
        ProbeVolume::Duration(d) if !(d.is_finite() && d > 0.0) => {
            return Err(config_error("probe duration must be > 0"))
        }
        _ => {}
    }
    match (plan.volume, plan.exclusion) {
        (_, ProbeExclusion::Bits(w)) | (_, ProbeExclusion::Seconds(w))
            if !(w.is_finite() && w >= 0.0) =>
        {
            return Err(config_error("probe warm-up exclusion must be >= 0"))
        }
        (ProbeVolume::Bits(b), ProbeExclusion::Bits(w)) if w >= b => {
            return Err(config_error("probe size must exceed its warm-up exclusion"))
        }
        (ProbeVolume::Duration(d), ProbeExclusion::Seconds(s)) if s >= d => {
            return Err(config_error(
                "probe duration must exceed its warm-up exclusion",
            ))
        }
        _ => {}
    }
    let (times, gaps): (&[f64], &[f64]) = match &plan.injections {
        Injections::At(times) => (times, &[]),
        Injections::AfterPrevious { start, gaps } => (std::slice::from_ref(start), gaps),
    };
    if let Some(&t) = times
        .iter()
        .find(|t| !(t.is_finite() && **t >= 0.0 && **t < config.horizon))
    {
        return Err(config_error(format!(
            "probe injection time {t} outside [0, horizon)"
        )));
    }
    if gaps.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(config_error("probe gaps must be finite and >= 0"));
    }
    Ok(())
}

pub(crate) fn run_with_probes(
    config: &SimConfig,
    plan: ProbePlan,
) -> Result<EngineOutput, SimError> {
    Engine::new(config, Some(plan), false)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        finite_population_distribution, ChannelSpec, FinitePopulationSpec, UserClass,
    };

    const MB: f64 = 1e6;

    fn single_class(
        discipline_pf: bool,
        lambda: f64,
        mean: f64,
        rate: f64,
        population: u32,
    ) -> SimConfig {
        let channel = if discipline_pf {
            ChannelSpec::proportional_fair(100.0 * MB).unwrap()
        } else {
            ChannelSpec::fair(100.0 * MB).unwrap()
        };
        SimConfig::new(
            channel,
            vec![PopulationClass::new(
                UserClass::new("a", lambda, mean, rate),
                population,
            )],
            SizeDistribution::Exponential,
            10_000.0,
            1,
        )
    }

    #[test]
    fn pareto_sampler_has_unit_mean() {
        let sampler = UnitSampler::new(SizeDistribution::BoundedPareto {
            shape: 1.5,
            cap_ratio: 100.0,
        })
        .unwrap();
        if let UnitSampler::BoundedPareto {
            lower,
            upper,
            shape,
            ..
        } = sampler
        {
            assert!((bounded_pareto_mean(lower, upper, shape) - 1.0).abs() < 1e-9);
        } else {
            unreachable!();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2_000_000;
        let mean = (0..n).map(|_| sampler.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "sample mean {mean}");
    }

    #[test]
    fn single_user_never_shares() {
        let config = single_class(false, 0.05, 50.0 * MB, 100.0 * MB, 1);
        let (stats, trace) = run_simulation_traced(&config).unwrap();
        assert!(!trace.is_empty());
        for flow in &trace {
            let expected = flow.size / (100.0 * MB);
            assert!(((flow.end - flow.start) - expected).abs() <= 1e-9 * expected.max(1.0));
        }
        assert_eq!(stats.occupancy_time.len(), 2);
    }

    #[test]
    fn histogram_covers_observed_window() {
        let config = single_class(true, 0.5, 50.0 * MB, 80.0 * MB, 4);
        let stats = run_simulation(&config).unwrap();
        let total: f64 = stats.occupancy_time.iter().sum();
        assert!((total - stats.observed_time).abs() < 1e-6 * stats.observed_time);
        let hist = occupancy_histogram(&stats);
        assert!(hist.iter().all(|p| *p >= 0.0));
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((stats.busy_fraction - (1.0 - hist[0])).abs() < 1e-12);
    }

    #[test]
    fn zero_demand_stays_idle() {
        let config = single_class(false, 0.0, 50.0 * MB, 100.0 * MB, 3);
        let stats = run_simulation(&config).unwrap();
        assert_eq!(occupancy_histogram(&stats), vec![1.0]);
        assert_eq!(stats.completed, 0);
        assert_eq!(stats.busy_fraction, 0.0);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let config = single_class(true, 0.6, 10.0 * MB, 60.0 * MB, 50);
        let a = run_simulation_traced(&config).unwrap();
        let b = run_simulation_traced(&config).unwrap();
        assert_eq!(a, b);
        let other = SimConfig { seed: 2, ..config };
        assert_ne!(run_simulation(&other).unwrap(), a.0);
    }

    #[test]
    fn config_errors() {
        let mut config = single_class(false, 0.1, MB, 100.0 * MB, 1);
        config.warmup = config.horizon;
        assert!(matches!(run_simulation(&config), Err(SimError::Config(_))));
        let mut config = single_class(false, 0.1, MB, 100.0 * MB, 0);
        assert!(run_simulation(&config).is_err());
        config.classes[0].population = 1;
        config.service = SizeDistribution::BoundedPareto {
            shape: 1.5,
            cap_ratio: 0.5,
        };
        assert!(run_simulation(&config).is_err());
        let pf = single_class(true, 0.1, MB, 200.0 * MB, 1);
        assert!(run_simulation(&pf).is_err());
    }

    #[test]
    fn small_population_occupancy_tracks_product_form() {
        // Short run, loose tolerance; the acceptance suite runs the long version.
        let mut config = single_class(false, 0.3, 50.0 * MB, 100.0 * MB, 3);
        config.horizon = 200_000.0;
        let stats = run_simulation(&config).unwrap();
        let hist = occupancy_histogram(&stats);
        let spec = FinitePopulationSpec::new(3, 0.1, 50.0 * MB, 100.0 * MB).unwrap();
        let exact = finite_population_distribution(&spec);
        for (n, p) in exact.iter().enumerate() {
            assert!((hist[n] - p).abs() < 0.01, "state {n}: {} vs {p}", hist[n]);
        }
    }

    #[test]
    fn insensitivity_requires_matching_configs() {
        let a = single_class(false, 0.1, MB, 100.0 * MB, 5);
        let mut b = a.clone();
        b.classes[0].class.mean_size = 2.0 * MB;
        assert!(insensitivity_check(&a, &b).is_err());
        let report = insensitivity_check(&a, &a).unwrap();
        assert_eq!(report.max_relative_gap, 0.0);
    }

    #[test]
    fn batch_half_width_needs_two_batches() {
        let mut counts = [0; BATCHES];
        let mut sums = [0.0; BATCHES];
        counts[0] = 3;
        sums[0] = 3.0;
        assert!(batch_half_width(&counts, &sums).is_nan());
        counts[1] = 1;
        sums[1] = 1.0;
        assert_eq!(batch_half_width(&counts, &sums), 0.0);
    }
}
