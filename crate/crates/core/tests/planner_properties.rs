use accessperf_core::planner::{
    evaluate_area, required_channel_rate, AreaRecord, Classification, DirectionLoad,
    DirectionRecord, GrowthModel, TargetThreshold,
};
use proptest::prelude::*;

fn area(down: (f64, f64), up: (f64, f64)) -> AreaRecord {
    let dir = |(channel_rate, rho): (f64, f64)| DirectionRecord {
        channel_rate,
        load: DirectionLoad::Supplied { rho },
    };
    AreaRecord {
        area_id: "x".into(),
        base_year: 2025,
        download: dir(down),
        upload: dir(up),
    }
}

proptest! {
    #[test]
    fn verdicts_never_improve_over_time(
        down in (1e6f64..5e9, 0.0f64..1.2),
        up in (1e6f64..1e9, 0.0f64..1.2),
        g in 0.0f64..0.5,
    ) {
        let growth = GrowthModel::new(g, 10).unwrap();
        let verdict = evaluate_area(&area(down, up), &TargetThreshold::defaults(), &growth).unwrap();
        for t in &verdict.thresholds {
            prop_assert!(t.classes.windows(2).all(|w| w[0] <= w[1]));
            let first_bad = t.classes.iter().position(|c| *c != Classification::Meets);
            prop_assert_eq!(t.binding_year, first_bad.map(|i| 2025 + i as i32));
        }
    }

    #[test]
    fn faster_channels_never_hurt(
        down in (1e6f64..5e9, 0.0f64..0.99),
        up in (1e6f64..1e9, 0.0f64..0.99),
        boost in 1.0f64..10.0,
    ) {
        let growth = GrowthModel::new(0.1, 5).unwrap();
        let base = evaluate_area(&area(down, up), &TargetThreshold::defaults(), &growth).unwrap();
        let better = evaluate_area(
            &area((down.0 * boost, down.1), (up.0 * boost, up.1)),
            &TargetThreshold::defaults(),
            &growth,
        )
        .unwrap();
        for (a, b) in base.thresholds.iter().zip(&better.thresholds) {
            prop_assert!(a.classes.iter().zip(&b.classes).all(|(x, y)| y <= x));
        }
    }

    #[test]
    fn required_rate_is_the_threshold_boundary(floor in 1e6f64..1e9, rho in 0.0f64..0.99) {
        let c = required_channel_rate(floor, rho).unwrap().unwrap();
        let growth = GrowthModel::new(0.0, 0).unwrap();
        let t = [TargetThreshold::new("t", floor, 0.0).unwrap()];
        let at = evaluate_area(&area((c * (1.0 + 1e-12), rho), (1e6, 0.0)), &t, &growth).unwrap();
        let below = evaluate_area(&area((c * 0.999, rho), (1e6, 0.0)), &t, &growth).unwrap();
        prop_assert_eq!(at.thresholds[0].classes[0], Classification::Meets);
        prop_assert_eq!(below.thresholds[0].classes[0], Classification::Fails);
    }
}

#[test]
fn saturation_takes_precedence() {
    let growth = GrowthModel::new(0.0, 0).unwrap();
    let v = evaluate_area(
        &area((1e10, 1.0), (1e10, 0.0)),
        &TargetThreshold::defaults(),
        &growth,
    )
    .unwrap();
    assert!(v
        .thresholds
        .iter()
        .all(|t| t.classes[0] == Classification::Saturated));
    assert!(v.years[0].download.speed.is_none());
}
