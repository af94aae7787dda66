use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accessperf_core::formats::{read_csv, VerdictRow};
use accessperf_core::harness::{CurvePoint, ScatterRow};
use accessperf_core::planner::{Classification, SummaryRow};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_accessperf"));
    cmd.env_remove("ACCESSPERF_OUT_DIR");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const PF_TWO_CLASS: &str = r#"
[channel]
capacity = "100Mb/s"
discipline = "proportional_fair"

[[class]]
label = "near"
arrival_rate = 0.1
mean_size = "10Mb"
channel_rate = "100Mb/s"

[[class]]
label = "far"
arrival_rate = 0.1
mean_size = "10Mb"
channel_rate = "50Mb/s"
"#;

#[test]
fn predict_idle_channel_gives_full_rate() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "idle.toml",
        "[channel]\ncapacity = \"1Gb/s\"\n[[class]]\nlabel = \"a\"\narrival_rate = 0\nmean_size = \"1Mb\"\n",
    );
    let out = run(
        dir.path(),
        &["predict", "idle.toml", "--out", "o", "--format", "json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_json(&dir.path().join("o/prediction.json"));
    assert_eq!(rows[0]["throughput"].as_f64(), Some(1e9));
    assert_eq!(rows[0]["rho"].as_f64(), Some(0.0));
}

#[test]
fn predict_two_class_proportional_fair() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "pf.toml", PF_TWO_CLASS);
    let out = run(
        dir.path(),
        &["predict", "pf.toml", "--out", "o", "--format", "json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_json(&dir.path().join("o/prediction.json"));
    let rho = rows[0]["rho"].as_f64().unwrap();
    assert!((rho - 0.03).abs() < 1e-12);
    assert!((rows[0]["throughput"].as_f64().unwrap() - 97e6).abs() < 1e-3);
    assert!((rows[1]["throughput"].as_f64().unwrap() - 48.5e6).abs() < 1e-3);
}

#[test]
fn predict_overload_exits_3_with_rho() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "hot.toml",
        "[channel]\ncapacity = \"100Mb/s\"\n[[class]]\nlabel = \"a\"\narrival_rate = 15\nmean_size = \"10Mb\"\n",
    );
    let out = run(dir.path(), &["predict", "hot.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("rho = 1.5"), "{}", stderr(&out));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "bad.toml", "[channel]\ncapacity = \"fast\"\n");
    assert_eq!(
        run(dir.path(), &["predict", "bad.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["predict", "missing.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["simulate", "bad.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn simulate_single_user_never_waits() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "one.toml",
        r#"
seed = 1
horizon = 1000.0
[channel]
capacity = "100Mb/s"
[service]
distribution = "exponential"
[[class]]
label = "solo"
think_rate = 0.5
population = 1
mean_size = "20Mb"
"#,
    );
    let out = run(
        dir.path(),
        &["simulate", "one.toml", "--trace", "--out", "o"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("o/trace.csv")).unwrap();
    let mut flows = 0;
    for line in text.lines().skip(1) {
        let row: Vec<&str> = line.split(',').collect();
        let size: f64 = row[2].parse().unwrap();
        let start: f64 = row[3].parse().unwrap();
        let end: f64 = row[4].parse().unwrap();
        assert!(((end - start) - size / 100e6).abs() <= 1e-9 * (end - start));
        flows += 1;
    }
    assert!(flows > 100);
}

const HALF_LOAD: &str = r#"
seed = 11
horizon = 60000.0
[channel]
capacity = "100Mb/s"
[[class]]
label = "bg"
arrival_rate = 5.0
population = 100000
mean_size = "10Mb"
"#;

#[test]
fn simulate_half_load_matches_closed_form_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "half.toml", HALF_LOAD);
    let a = run(
        dir.path(),
        &["simulate", "half.toml", "--out", "a", "--format", "json"],
    );
    let b = run(
        dir.path(),
        &["simulate", "half.toml", "--out", "b", "--format", "json"],
    );
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let rows_a = fs::read(dir.path().join("a/classes.json")).unwrap();
    let rows_b = fs::read(dir.path().join("b/classes.json")).unwrap();
    assert_eq!(rows_a, rows_b);
    let rows: Value = serde_json::from_slice(&rows_a).unwrap();
    let d = rows[0]["mean_transfer_time"].as_f64().unwrap();
    assert!(rows[0]["completed"].as_u64().unwrap() >= 200_000);
    assert!((d / 0.2 - 1.0).abs() < 0.02, "D = {d}");
    let predicted = rows[0]["predicted_transfer_time"].as_f64().unwrap();
    assert!((predicted - 0.2).abs() < 1e-12);
}

#[test]
fn seed_flag_overrides_document_seed() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "half.toml",
        &HALF_LOAD.replace("60000.0", "2000.0"),
    );
    run(dir.path(), &["simulate", "half.toml", "--out", "a"]);
    run(
        dir.path(),
        &["simulate", "half.toml", "--out", "b", "--seed", "12"],
    );
    assert_ne!(
        fs::read(dir.path().join("a/classes.csv")).unwrap(),
        fs::read(dir.path().join("b/classes.csv")).unwrap()
    );
    let manifest = read_json(&dir.path().join("b/manifest.json"));
    assert_eq!(manifest["seeds"][0].as_u64(), Some(12));
}

const SWEEP: &str = r#"
seed = 5
rho_grid = [0.0, 0.6]
probes_per_point = 60
[channel]
capacity = "100Mb/s"
[[class]]
label = "bg"
mean_size = "1Mb"
[probe]
size = "1Gb"
"#;

#[test]
fn validate_emits_curves_and_scatter() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sweep.toml", SWEEP);
    let out = run(dir.path(), &["validate", "sweep.toml", "--out", "o"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let curve: Vec<CurvePoint> =
        read_csv(fs::File::open(dir.path().join("o/curve.csv")).unwrap()).unwrap();
    assert_eq!(curve.len(), 2);
    assert_eq!(curve[0].analytic_speed, 100e6);
    assert!((curve[0].sim_mean_speed / 100e6 - 1.0).abs() < 1e-9);
    assert!(curve[1].relative_gap.abs() < 0.05, "{:?}", curve[1]);
    let scatter: Vec<ScatterRow> =
        read_csv(fs::File::open(dir.path().join("o/scatter.csv")).unwrap()).unwrap();
    assert_eq!(scatter.len(), 120);

    let infer = run(
        dir.path(),
        &[
            "infer-rho",
            "o/scatter.csv",
            "--out",
            "i",
            "--format",
            "json",
        ],
    );
    assert!(infer.status.success(), "{}", stderr(&infer));
}

#[test]
fn validate_reports_failing_points() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "sweep.toml",
        &SWEEP.replace("size = \"1Gb\"", "duration = 1.0\nwarmup_seconds = 2.0"),
    );
    let out = run(dir.path(), &["validate", "sweep.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning: point rho 0.6"));
    let failures = fs::read_to_string(dir.path().join("o/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 3);
}

#[test]
fn validate_rejects_unsorted_grid() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "sweep.toml",
        &SWEEP.replace("[0.0, 0.6]", "[0.6, 0.2]"),
    );
    assert_eq!(
        run(dir.path(), &["validate", "sweep.toml"]).status.code(),
        Some(2)
    );
}

const AREAS: &str = "\
area_id,base_year,down_rate,down_rho,up_rate,up_rho
good,2025,2Gb/s,0.5,500Mb/s,0.5
slow,2025,1Gb/s,0.5,500Mb/s,0.5
hot,2025,2Gb/s,1.0,500Mb/s,0.5
";

#[test]
fn plan_three_fixtures() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "areas.csv", AREAS);
    let out = run(
        dir.path(),
        &[
            "plan",
            "areas.csv",
            "--years",
            "0",
            "--threshold",
            "giga:1Gb/s:200Mb/s",
            "--out",
            "o",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Vec<SummaryRow> =
        read_csv(fs::File::open(dir.path().join("o/summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(
        (summary[0].meets, summary[0].fails, summary[0].saturated),
        (1, 1, 1)
    );
    let verdicts: Vec<VerdictRow> =
        read_csv(fs::File::open(dir.path().join("o/verdicts.csv")).unwrap()).unwrap();
    let ids: Vec<(&str, Classification)> = verdicts
        .iter()
        .map(|v| (v.area_id.as_str(), v.classification))
        .collect();
    assert_eq!(
        ids,
        vec![
            ("good", Classification::Meets),
            ("slow", Classification::Fails),
            ("hot", Classification::Saturated)
        ]
    );
    assert_eq!(verdicts[0].down_speed_mbps, Some(1000.0));
    assert_eq!(verdicts[2].down_speed_mbps, None);
}

#[test]
fn plan_empty_file_gives_zero_summary() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "empty.csv", "");
    let out = run(
        dir.path(),
        &["plan", "empty.csv", "--years", "2", "--out", "o"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Vec<SummaryRow> =
        read_csv(fs::File::open(dir.path().join("o/summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 2 * 3);
    assert!(summary.iter().all(|r| r.meets + r.fails + r.saturated == 0));
    let verdicts = fs::read_to_string(dir.path().join("o/verdicts.csv")).unwrap();
    assert!(verdicts.is_empty());
}

#[test]
fn plan_skips_rows_without_upload() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "areas.csv",
        &format!("{AREAS}noup,2025,2Gb/s,0.1,,\n"),
    );
    let out = run(dir.path(), &["plan", "areas.csv", "--out", "o"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("warning: line 5 (noup)"),
        "{}",
        stderr(&out)
    );
    let issues = fs::read_to_string(dir.path().join("o/issues.csv")).unwrap();
    assert_eq!(issues.lines().count(), 2);
}

#[test]
fn plan_unreadable_input_exits_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        run(dir.path(), &["plan", "nope.csv"]).status.code(),
        Some(2)
    );
    write(dir.path(), "cols.csv", "id,rate\na,1\n");
    assert_eq!(
        run(dir.path(), &["plan", "cols.csv"]).status.code(),
        Some(2)
    );
    write(dir.path(), "areas.csv", AREAS);
    assert_eq!(
        run(dir.path(), &["plan", "areas.csv", "--growth", "-1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn infer_rho_cases() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "full.csv",
        "measured_speed,channel_rate\n100Mb/s,100Mb/s\n5e7,5e7\n",
    );
    let out = run(dir.path(), &["infer-rho", "full.csv", "--out", "a"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc = read_json(&dir.path().join("a/inference.json"));
    assert_eq!(doc["rho"].as_f64(), Some(0.0));

    write(
        dir.path(),
        "mixed.csv",
        "measured_speed,channel_rate\n60Mb/s,100Mb/s\n120Mb/s,100Mb/s\n40Mb/s,100Mb/s\n",
    );
    let out = run(dir.path(), &["infer-rho", "mixed.csv", "--out", "b"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc = read_json(&dir.path().join("b/inference.json"));
    assert!((doc["rho"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(doc["inconsistent_lines"], serde_json::json!([3]));

    write(
        dir.path(),
        "junk.csv",
        "measured_speed,channel_rate\n1,2\nx,2\n1,2\n",
    );
    assert_eq!(
        run(dir.path(), &["infer-rho", "junk.csv"]).status.code(),
        Some(2)
    );
    let out = run(
        dir.path(),
        &[
            "infer-rho",
            "junk.csv",
            "--max-malformed",
            "0.5",
            "--out",
            "c",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn infer_rho_maps_mcs_through_rate_table() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "table.toml",
        "technology = \"lte\"\n[mcs]\n10 = \"50Mb/s\"\n20 = \"100Mb/s\"\n",
    );
    write(
        dir.path(),
        "s.csv",
        "measured_speed,mcs\n25Mb/s,10\n50Mb/s,20\n",
    );
    let out = run(
        dir.path(),
        &[
            "infer-rho",
            "s.csv",
            "--rate-table",
            "table.toml",
            "--out",
            "o",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let doc = read_json(&dir.path().join("o/inference.json"));
    assert!((doc["rho"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(
        run(dir.path(), &["infer-rho", "s.csv"]).status.code(),
        Some(2)
    );
}

#[test]
fn output_dir_defaults_from_environment() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "pf.toml", PF_TWO_CLASS);
    let out = bin()
        .current_dir(dir.path())
        .env("ACCESSPERF_OUT_DIR", "from-env")
        .args(["predict", "pf.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/prediction.csv").exists());
    let out = run(dir.path(), &["predict", "pf.toml"]);
    assert!(out.status.success());
    assert!(dir.path().join("accessperf-out/manifest.json").exists());
}

#[test]
fn every_command_replays_byte_identically() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "pf.toml", PF_TWO_CLASS);
    write(
        dir.path(),
        "half.toml",
        &HALF_LOAD.replace("60000.0", "3000.0"),
    );
    write(dir.path(), "sweep.toml", SWEEP);
    write(dir.path(), "areas.csv", AREAS);
    write(
        dir.path(),
        "s.csv",
        "measured_speed,channel_rate\n60Mb/s,100Mb/s\n",
    );
    let runs: [&[&str]; 5] = [
        &["predict", "pf.toml"],
        &["simulate", "half.toml", "--trace", "--seed", "3"],
        &["validate", "sweep.toml", "--format", "json"],
        &["plan", "areas.csv", "--growth", "0.12"],
        &["infer-rho", "s.csv"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let first = format!("run{i}");
        let mut full = args.to_vec();
        full.extend(["--out", &first]);
        assert!(run(dir.path(), &full).status.success(), "{args:?}");
        let manifest = format!("{first}/manifest.json");
        let again = format!("replay{i}");
        let out = run(dir.path(), &["replay", &manifest, "--out", &again]);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        let recorded = read_json(&dir.path().join(&manifest));
        for file in recorded["outputs"].as_array().unwrap() {
            let name = file["file"].as_str().unwrap();
            assert_eq!(
                fs::read(dir.path().join(&first).join(name)).unwrap(),
                fs::read(dir.path().join(&again).join(name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn replay_detects_tampered_outputs() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "pf.toml", PF_TWO_CLASS);
    run(dir.path(), &["predict", "pf.toml", "--out", "o"]);
    let path = dir.path().join("o/manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    let mut manifest: Value = serde_json::from_str(&text).unwrap();
    manifest["outputs"][0]["sha256"] = Value::String("00".repeat(32));
    fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = run(dir.path(), &["replay", "o/manifest.json", "--out", "r"]);
    assert_eq!(out.status.code(), Some(4));
}
