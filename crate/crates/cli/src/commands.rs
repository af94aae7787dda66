use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use accessperf_core::config::{RateTableDoc, ScenarioDoc, SweepDoc};
use accessperf_core::formats::{read_area_records, read_samples, verdict_rows};
use accessperf_core::harness::run_sweep;
use accessperf_core::model::{self, ModelError};
use accessperf_core::planner::{evaluate_batch, GrowthModel, TargetThreshold};
use accessperf_core::sim::{occupancy_histogram, run_simulation, run_simulation_traced, SimError};
use accessperf_core::speedtest::{infer_load_from_samples, map_mcs_to_rate};
use accessperf_core::units::parse_rate;
use serde::Serialize;
use serde_json::json;

use crate::error::{input, CliError};
use crate::manifest::{self, read_input, InputFile, RunManifest, MANIFEST_FILE};
use crate::output::{write_json, Outputs};
use crate::{Command, Format};

/// Result of a command before anything is written.
struct Run {
    outputs: Outputs,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<InputFile>,
    /// Error reported after the outputs are written.
    deferred: Option<CliError>,
}

pub fn run(
    command: &Command,
    seed: Option<u64>,
    out: &Path,
    format: Format,
) -> Result<(), CliError> {
    if let Command::Replay { manifest } = command {
        return replay(manifest, out);
    }
    let run = execute(command, seed, format)?;
    finish(command, seed, out, format, run).map(|_| ())
}

fn execute(command: &Command, seed: Option<u64>, format: Format) -> Result<Run, CliError> {
    match command {
        Command::Predict { config } => predict(config, format),
        Command::Simulate { config, trace } => simulate(config, *trace, seed, format),
        Command::Validate { sweep } => validate(sweep, seed, format),
        Command::Plan {
            records,
            growth,
            years,
            thresholds,
        } => plan(records, *growth, *years, thresholds, format),
        Command::InferRho {
            samples,
            rate_table,
            max_malformed,
        } => infer_rho(samples, rate_table.as_deref(), *max_malformed, format),
        Command::Replay { .. } => Err(input("a manifest cannot replay another replay")),
    }
}

fn finish(
    command: &Command,
    seed: Option<u64>,
    out: &Path,
    format: Format,
    run: Run,
) -> Result<RunManifest, CliError> {
    let outputs = run.outputs.write_all(out)?;
    let manifest = RunManifest {
        tool: "accessperf".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.clone(),
        format,
        seed_override: seed,
        seeds: run.seeds,
        config: run.config,
        inputs: run.inputs,
        outputs,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    match run.deferred {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::UnstableLoad { rho } => {
            CliError::Unstable(format!("unstable load: rho = {rho} (must be < 1)"))
        }
        other => input(other),
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Config(msg) => input(msg),
        other => CliError::Simulation(other.to_string()),
    }
}

fn to_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

#[derive(Serialize)]
struct PredictRow {
    label: String,
    rho: f64,
    class_rho: f64,
    mean_transfer_time: Option<f64>,
    class_mean_transfer_time: f64,
    throughput: f64,
    channel_rate: f64,
    service_rate: f64,
}

fn predict(config: &Path, format: Format) -> Result<Run, CliError> {
    let (text, record) = read_input("config", config)?;
    let doc = ScenarioDoc::from_toml(&text).map_err(input)?;
    let mix = doc.to_mix().map_err(input)?;
    let prediction = model::predict_mix(&mix).map_err(model_error)?;
    let rho = prediction.load.rho();
    let rows: Vec<PredictRow> = prediction
        .classes
        .iter()
        .zip(mix.classes())
        .map(|(p, class)| PredictRow {
            label: p.label.clone(),
            rho,
            class_rho: p.rho,
            mean_transfer_time: prediction.mean_transfer_time,
            class_mean_transfer_time: p.mean_transfer_time,
            throughput: p.throughput,
            channel_rate: class.channel_rate,
            service_rate: p.service_rate,
        })
        .collect();
    println!("rho = {rho:.6}");
    for row in &rows {
        println!(
            "{:<16} rho_i = {:.6}  D_i = {:.6} s  v_i = {:.3} Mb/s",
            row.label,
            row.class_rho,
            row.class_mean_transfer_time,
            row.throughput / 1e6
        );
    }
    let mut outputs = Outputs::new(format);
    outputs.rows("prediction", &rows)?;
    Ok(Run {
        outputs,
        config: to_value(&mix),
        seeds: Vec::new(),
        inputs: vec![record],
        deferred: None,
    })
}

#[derive(Serialize)]
struct SimClassRow {
    label: String,
    population: u32,
    completed: u64,
    mean_size: f64,
    mean_transfer_time: f64,
    transfer_time_half_width: f64,
    mean_throughput: f64,
    throughput_half_width: f64,
    /// Open-model prediction; empty when the nominal load is >= 1.
    predicted_transfer_time: Option<f64>,
    predicted_throughput: Option<f64>,
}

#[derive(Serialize)]
struct OccupancyRow {
    active: usize,
    probability: f64,
}

fn simulate(
    config: &Path,
    trace: bool,
    seed: Option<u64>,
    format: Format,
) -> Result<Run, CliError> {
    let (text, record) = read_input("config", config)?;
    let doc = ScenarioDoc::from_toml(&text).map_err(input)?;
    let sim = doc.to_sim_config(seed).map_err(input)?;
    let (stats, flows) = if trace {
        let (stats, flows) = run_simulation_traced(&sim).map_err(sim_error)?;
        (stats, Some(flows))
    } else {
        (run_simulation(&sim).map_err(sim_error)?, None)
    };
    let prediction = doc
        .to_mix()
        .ok()
        .and_then(|mix| model::predict_mix(&mix).ok());
    let rows: Vec<SimClassRow> = stats
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let predicted = prediction.as_ref().map(|p| &p.classes[i]);
            SimClassRow {
                label: c.label.clone(),
                population: sim.classes[i].population,
                completed: c.completed,
                mean_size: c.mean_size,
                mean_transfer_time: c.mean_transfer_time,
                transfer_time_half_width: c.transfer_time_half_width,
                mean_throughput: c.mean_throughput,
                throughput_half_width: c.throughput_half_width,
                predicted_transfer_time: predicted.map(|p| p.mean_transfer_time),
                predicted_throughput: predicted.map(|p| p.throughput),
            }
        })
        .collect();
    println!(
        "offered load {:.4}, busy fraction {:.4}, {} transfers completed",
        sim.offered_load(),
        stats.busy_fraction,
        stats.completed
    );
    for row in &rows {
        println!(
            "{:<16} D = {:.6} ± {:.6} s  ({} transfers)",
            row.label, row.mean_transfer_time, row.transfer_time_half_width, row.completed
        );
    }
    let occupancy: Vec<OccupancyRow> = occupancy_histogram(&stats)
        .into_iter()
        .enumerate()
        .map(|(active, probability)| OccupancyRow {
            active,
            probability,
        })
        .collect();
    let mut outputs = Outputs::new(format);
    outputs.rows("classes", &rows)?;
    outputs.rows("occupancy", &occupancy)?;
    outputs.document(
        "summary",
        &json!({
            "offered_load": sim.offered_load(),
            "busy_fraction": stats.busy_fraction,
            "observed_time": stats.observed_time,
            "completed": stats.completed,
            "events": stats.events,
        }),
    )?;
    if let Some(flows) = flows {
        outputs.rows("trace", &flows)?;
    }
    Ok(Run {
        outputs,
        config: to_value(&sim),
        seeds: vec![sim.seed],
        inputs: vec![record],
        deferred: None,
    })
}

fn validate(sweep: &Path, seed: Option<u64>, format: Format) -> Result<Run, CliError> {
    let (text, record) = read_input("sweep", sweep)?;
    let spec = SweepDoc::from_toml(&text)
        .and_then(|doc| doc.to_spec(seed))
        .map_err(input)?;
    let result = run_sweep(&spec).map_err(input)?;
    for point in &result.curve {
        println!(
            "rho {:.3}  C_i {:.1} Mb/s  analytic {:.3} Mb/s  simulated {:.3} ± {:.3} Mb/s  gap {:+.2}%",
            point.rho,
            point.channel_rate / 1e6,
            point.analytic_speed / 1e6,
            point.sim_mean_speed / 1e6,
            point.sim_half_width / 1e6,
            100.0 * point.relative_gap
        );
    }
    for failure in &result.failures {
        eprintln!(
            "warning: point rho {} rate {} seed {} failed: {}",
            failure.rho, failure.channel_rate, failure.seed, failure.message
        );
    }
    let deferred = (result.curve.is_empty() && !result.failures.is_empty())
        .then(|| CliError::Simulation("every sweep point failed".into()));
    let mut outputs = Outputs::new(format);
    outputs.rows("curve", &result.curve)?;
    outputs.rows("scatter", &result.scatter)?;
    outputs.rows("failures", &result.failures)?;
    Ok(Run {
        outputs,
        config: to_value(&spec),
        seeds: vec![spec.seed],
        inputs: vec![record],
        deferred,
    })
}

fn parse_threshold(text: &str) -> Result<TargetThreshold, CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    let [name, down, up] = parts.as_slice() else {
        return Err(input(format!(
            "threshold `{text}` must look like name:download:upload"
        )));
    };
    let down = parse_rate(down).map_err(input)?;
    let up = parse_rate(up).map_err(input)?;
    TargetThreshold::new(*name, down, up).map_err(input)
}

fn plan(
    records: &Path,
    growth: f64,
    years: u32,
    thresholds: &[String],
    format: Format,
) -> Result<Run, CliError> {
    let (text, record) = read_input("records", records)?;
    let growth = GrowthModel::new(growth, years).map_err(input)?;
    let thresholds = if thresholds.is_empty() {
        TargetThreshold::defaults()
    } else {
        thresholds
            .iter()
            .map(|t| parse_threshold(t))
            .collect::<Result<Vec<_>, _>>()?
    };
    let parsed = read_area_records(text.as_bytes())
        .map_err(|e| input(format!("{}: {e}", records.display())))?;
    let report = evaluate_batch(parsed, &thresholds, &growth);
    for issue in &report.issues {
        eprintln!(
            "warning: line {}{}: {}; row skipped",
            issue.line,
            issue
                .area_id
                .as_deref()
                .map(|id| format!(" ({id})"))
                .unwrap_or_default(),
            issue.message
        );
    }
    for id in &report.duplicate_ids {
        eprintln!("warning: area id `{id}` appears more than once");
    }
    for row in &report.summary {
        println!(
            "{:<16} year +{}: meets {}  fails {}  saturated {}",
            row.threshold, row.offset, row.meets, row.fails, row.saturated
        );
    }
    let mut outputs = Outputs::new(format);
    outputs.rows("verdicts", &verdict_rows(&report.verdicts))?;
    outputs.rows("summary", &report.summary)?;
    outputs.rows("issues", &report.issues)?;
    Ok(Run {
        outputs,
        config: json!({ "growth": growth, "thresholds": thresholds }),
        seeds: Vec::new(),
        inputs: vec![record],
        deferred: None,
    })
}

#[derive(Serialize)]
struct InferRow {
    line: u64,
    measured_speed: Option<f64>,
    channel_rate: Option<f64>,
    rho: Option<f64>,
    status: &'static str,
    message: Option<String>,
}

fn infer_rho(
    samples: &Path,
    rate_table: Option<&Path>,
    max_malformed: f64,
    format: Format,
) -> Result<Run, CliError> {
    if !(0.0..=1.0).contains(&max_malformed) {
        return Err(input(format!(
            "--max-malformed must lie in [0, 1], got {max_malformed}"
        )));
    }
    let (text, record) = read_input("samples", samples)?;
    let mut inputs = vec![record];
    let table = match rate_table {
        Some(path) => {
            let (text, record) = read_input("rate_table", path)?;
            inputs.push(record);
            let table = RateTableDoc::from_toml(&text)
                .and_then(|doc| doc.to_table())
                .map_err(input)?;
            for lint in table.lint() {
                eprintln!(
                    "warning: rate table: MCS {} ({} b/s) is faster than MCS {} ({} b/s)",
                    lint.lower_index, lint.lower_rate, lint.higher_index, lint.higher_rate
                );
            }
            Some(table)
        }
        None => None,
    };
    let parsed =
        read_samples(text.as_bytes()).map_err(|e| input(format!("{}: {e}", samples.display())))?;
    if parsed.is_empty() {
        return Err(input(format!("{}: no samples", samples.display())));
    }
    let mut rows = Vec::with_capacity(parsed.len());
    let mut usable = Vec::new();
    for (line, sample) in &parsed {
        let resolved = sample.as_ref().map_err(Clone::clone).and_then(|s| {
            let rate = match (s.channel_rate, s.mcs) {
                (Some(rate), _) => rate,
                (None, Some(mcs)) => {
                    let table = table
                        .as_ref()
                        .ok_or("row gives mcs but no --rate-table was supplied")?;
                    map_mcs_to_rate(mcs, table).map_err(|e| e.to_string())?
                }
                (None, None) => return Err("needs channel_rate or mcs".to_string()),
            };
            Ok((s.measured_speed, rate))
        });
        match resolved {
            Ok(pair) => {
                usable.push((*line, pair));
                rows.push(InferRow {
                    line: *line,
                    measured_speed: Some(pair.0),
                    channel_rate: Some(pair.1),
                    rho: None,
                    status: "ok",
                    message: None,
                });
            }
            Err(message) => rows.push(InferRow {
                line: *line,
                measured_speed: None,
                channel_rate: None,
                rho: None,
                status: "malformed",
                message: Some(message),
            }),
        }
    }
    let malformed = parsed.len() - usable.len();
    let fraction = malformed as f64 / parsed.len() as f64;
    if fraction > max_malformed {
        return Err(input(format!(
            "{malformed} of {} rows are malformed ({:.1}%), above the {:.1}% limit",
            parsed.len(),
            100.0 * fraction,
            100.0 * max_malformed
        )));
    }
    let pairs: Vec<(f64, f64)> = usable.iter().map(|(_, p)| *p).collect();
    let inference = infer_load_from_samples(&pairs).map_err(|_| input("no usable samples"))?;
    let mut estimates = inference.per_sample.iter();
    let inconsistent: BTreeSet<usize> = inference.inconsistent.iter().copied().collect();
    let mut inconsistent_lines = Vec::new();
    for (k, row) in rows.iter_mut().filter(|r| r.status == "ok").enumerate() {
        row.rho = estimates.next().copied().flatten();
        if inconsistent.contains(&k) {
            row.status = "inconsistent";
            row.message = Some("measured speed exceeds the channel rate".into());
            inconsistent_lines.push(row.line);
        }
    }
    for line in &inconsistent_lines {
        eprintln!("warning: line {line}: measured speed exceeds the channel rate; excluded");
    }
    println!(
        "rho_hat = {:.6} from {} samples ({} inconsistent, {} malformed)",
        inference.rho,
        inference.used,
        inconsistent_lines.len(),
        malformed
    );
    let mut outputs = Outputs::new(format);
    outputs.rows("samples", &rows)?;
    outputs.document(
        "inference",
        &json!({
            "rho": inference.rho,
            "used": inference.used,
            "inconsistent": inconsistent_lines.len(),
            "inconsistent_lines": inconsistent_lines,
            "malformed": malformed,
            "total": parsed.len(),
        }),
    )?;
    Ok(Run {
        outputs,
        config: json!({ "max_malformed": max_malformed, "rate_table": table.map(|t| t.iter().collect::<Vec<_>>()) }),
        seeds: Vec::new(),
        inputs,
        deferred: None,
    })
}

fn replay(manifest_path: &Path, out: &Path) -> Result<(), CliError> {
    let recorded = manifest::load(manifest_path)?;
    let inputs_dir = out.join("inputs");
    fs::create_dir_all(&inputs_dir)
        .map_err(|e| input(format!("cannot create {}: {e}", inputs_dir.display())))?;
    let mut command = recorded.command.clone();
    for file in &recorded.inputs {
        if manifest::sha256_hex(file.content.as_bytes()) != file.sha256 {
            return Err(input(format!(
                "manifest input `{}` does not match its digest",
                file.role
            )));
        }
        let name = file
            .path
            .file_name()
            .map_or_else(|| PathBuf::from(&file.role), PathBuf::from);
        let target = inputs_dir.join(format!("{}-{}", file.role, name.display()));
        fs::write(&target, &file.content)
            .map_err(|e| input(format!("cannot write {}: {e}", target.display())))?;
        retarget(&mut command, &file.role, target);
    }
    let run = execute(&command, recorded.seed_override, recorded.format)?;
    let manifest = finish(&command, recorded.seed_override, out, recorded.format, run)?;
    let mismatched: Vec<&str> = recorded
        .outputs
        .iter()
        .filter(|o| !manifest.outputs.contains(o))
        .map(|o| o.file.as_str())
        .collect();
    if mismatched.is_empty() && manifest.outputs.len() == recorded.outputs.len() {
        println!(
            "replay reproduced {} output files byte-identically",
            manifest.outputs.len()
        );
        Ok(())
    } else {
        Err(CliError::Simulation(format!(
            "replay differs from the recorded run in: {}",
            if mismatched.is_empty() {
                "the set of output files".to_string()
            } else {
                mismatched.join(", ")
            }
        )))
    }
}

fn retarget(command: &mut Command, role: &str, path: PathBuf) {
    match (command, role) {
        (Command::Predict { config }, "config") | (Command::Simulate { config, .. }, "config") => {
            *config = path
        }
        (Command::Validate { sweep }, "sweep") => *sweep = path,
        (Command::Plan { records, .. }, "records") => *records = path,
        (Command::InferRho { samples, .. }, "samples") => *samples = path,
        (Command::InferRho { rate_table, .. }, "rate_table") => *rate_table = Some(path),
        _ => {}
    }
}
