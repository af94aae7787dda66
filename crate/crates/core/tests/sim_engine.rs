use accessperf_core::model::{ChannelSpec, UserClass};
use accessperf_core::sim::{
    insensitivity_check, run_simulation, PopulationClass, SimConfig, SizeDistribution,
};
use accessperf_core::speedtest::{run_speed_test, ProbeSchedule, ProbeSize, ProbeSpec, RhoWindow};

fn config(rho: f64, service: SizeDistribution, seed: u64) -> SimConfig {
    let (c, m) = (100e6, 10e6);
    SimConfig::new(
        ChannelSpec::fair(c).unwrap(),
        vec![PopulationClass::new(
            UserClass::new("bg", rho * c / m, m, c),
            10_000,
        )],
        service,
        20_000.0,
        seed,
    )
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let a = run_simulation(&config(0.5, SizeDistribution::Exponential, 1)).unwrap();
    let b = run_simulation(&config(0.5, SizeDistribution::Exponential, 1)).unwrap();
    let c = run_simulation(&config(0.5, SizeDistribution::Exponential, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn busy_fraction_matches_offered_load() {
    let stats = run_simulation(&config(0.5, SizeDistribution::Exponential, 3)).unwrap();
    assert!(
        (stats.busy_fraction - 0.5).abs() < 0.03,
        "{}",
        stats.busy_fraction
    );
}

#[test]
fn heavy_tail_gives_similar_mean_time() {
    let report = insensitivity_check(
        &config(0.4, SizeDistribution::Exponential, 5),
        &config(
            0.4,
            SizeDistribution::BoundedPareto {
                shape: 1.5,
                cap_ratio: 100.0,
            },
            5,
        ),
    )
    .unwrap();
    assert!(report.max_relative_gap < 0.15, "{report:?}");
}

#[test]
fn speed_test_samples_carry_whole_run_load() {
    let sim = config(0.3, SizeDistribution::Exponential, 7);
    let mut probe = ProbeSpec::new(
        100e6,
        ProbeSize::Bits(1e9),
        ProbeSchedule::Sequential {
            count: 20,
            mean_gap: 10.0,
            start: 2000.0,
        },
    );
    probe.window = RhoWindow::WholeRun;
    let samples = run_speed_test(&sim, &probe).unwrap();
    assert_eq!(samples.len(), 20);
    let rho = samples[0].rho;
    assert!(samples.iter().all(|s| s.rho == rho));
    assert!((rho - 0.3).abs() < 0.05);
    assert!(samples
        .iter()
        .all(|s| s.measured_speed > 0.0 && s.measured_speed <= 100e6 * (1.0 + 1e-9)));
}
