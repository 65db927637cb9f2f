use geodiff::extflow::*;
use geodiff::integrate::{IntegratorConfig, Method, Solver};
use geodiff::scalar::wrap_centered;
use proptest::prelude::*;
use std::sync::Arc;

fn golden() -> ExternalFlowModel<f64> {
    ExternalFlowModel::golden()
}

#[test]
fn linear_flow_closed_form() {
    let f = ExternalFlowModel::linear(vec![1.0, 2f64.sqrt()]).unwrap();
    assert_eq!(f.advance(&[0.4, 0.1], 0.0).unwrap(), vec![0.4, 0.1]);
    let th = f.advance(&[0.0, 0.0], 1.0).unwrap();
    assert_eq!(th, vec![0.0, 2f64.sqrt() - 1.0]);
    assert!(f.advance(&[0.0], 1.0).is_err());
}

#[test]
fn golden_frequency_is_the_default() {
    let nu = golden().frequency().unwrap().to_vec();
    assert_eq!(nu[0], 1.0);
    assert!((nu[1] - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-16);
}

#[test]
fn shear_flow_matches_richardson_extrapolated_reference() {
    let f = ExternalFlowModel::shear(vec![1.0, 0.4], 0.3).unwrap();
    let th0 = [0.15, 0.6];
    let t = 2.5;
    let got = f.advance_lifted(&th0, t).unwrap();
    let rhs = |_: f64, u: &[f64], du: &mut [f64]| {
        du[0] = 1.0;
        du[1] = 0.4 + 0.3 * (std::f64::consts::TAU * u[0]).sin();
    };
    // Fourth-order fixed-step runs at h and h/2, combined to cancel the leading error.
    let run = |h: f64| {
        Solver::new(IntegratorConfig::symplectic(Method::SymplecticGauss4, h))
            .run_to(rhs, 0.0, &th0, t)
            .unwrap()
    };
    let (a, b) = (run(0.01), run(0.005));
    for i in 0..2 {
        let reference = b[i] + (b[i] - a[i]) / 15.0;
        assert!((got[i] - reference).abs() < 1e-9, "{i}: {} vs {reference}", got[i]);
    }
}

#[test]
fn recurrence_gaps_match_a_direct_scan() {
    let f = golden();
    let th0 = [0.2, 0.7];
    let (radius, horizon) = (0.08, 120.0);
    let prof = f.recurrence_profile(&th0, radius, horizon, true).unwrap();
    assert_eq!(prof.status, RecurrenceStatus::Observed);
    for w in prof.intervals.windows(2) {
        assert!(w[0].entry < w[0].exit && w[0].exit < w[1].entry);
    }
    // Brute-force sampling of the distance along the line.
    let nu = f.frequency().unwrap().to_vec();
    let dt = 1e-4;
    let mut gaps = Vec::new();
    let mut last_exit: Option<f64> = None;
    let mut inside = true;
    let n = (horizon / dt) as usize;
    for k in 1..=n {
        let t = k as f64 * dt;
        let d = th0
            .iter()
            .zip(&nu)
            .map(|(a, v)| wrap_centered(a + v * t - a).powi(2))
            .sum::<f64>()
            .sqrt();
        let now = d < radius;
        if inside && !now {
            last_exit = Some(t);
        }
        if !inside && now {
            if let Some(e) = last_exit {
                gaps.push(t - e);
            }
        }
        inside = now;
    }
    let brute = gaps.iter().cloned().fold(0.0, f64::max);
    let got = prof.max_gap.unwrap();
    assert!((got - brute).abs() < 2.0 * dt, "{got} vs {brute}");
    assert!(got.is_finite() && got < horizon);

    let mut buf = Vec::new();
    prof.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t_entry,t_exit"));
    assert_eq!(text.lines().count(), prof.intervals.len() + 1);
}

#[test]
fn short_horizon_reports_no_recurrence() {
    let prof = golden().recurrence_profile(&[0.2, 0.7], 0.05, 0.5, true).unwrap();
    assert_eq!(prof.status, RecurrenceStatus::NotObserved);
}

fn with_fixed_point() -> ExternalFlowModel<f64> {
    ExternalFlowModel::custom(
        2,
        Arc::new(|th: &[f64], out: &mut [f64]| {
            out[0] = (std::f64::consts::TAU * th[0]).sin();
            out[1] = 0.0;
        }),
    )
}

#[test]
fn fixed_points_are_rejected() {
    let f = with_fixed_point();
    assert!(matches!(
        f.recurrence_profile(&[0.0, 0.3], 0.1, 10.0, true),
        Err(ExtFlowError::Precondition(_))
    ));
    assert!(matches!(f.build_flow_box(&[0.0, 0.3], 0.1, 0.05), Err(ExtFlowError::Precondition(_))));
}

#[test]
fn linear_flow_boxes_are_transverse() {
    let f = golden();
    for rho in [0.05, 0.1, 0.2] {
        let b = f.build_flow_box(&[0.3, 0.3], rho, 0.05).unwrap();
        assert!(b.contains(&[0.3, 0.3]));
        let nu = f.frequency().unwrap();
        let along: f64 = nu.iter().zip(&b.normal).map(|(a, n)| a * n).sum();
        assert!(along > 0.0);
    }
    assert!(matches!(
        f.build_flow_box(&[0.3, 0.3], 0.45, 0.05),
        Err(ExtFlowError::ShrinkRequired { .. })
    ));
}

#[test]
fn strongly_sheared_flow_needs_a_thinner_box() {
    let f = ExternalFlowModel::shear(vec![1.0, 0.2], 10.0).unwrap();
    let th0 = [0.0, 0.0];
    let max_rho = match f.build_flow_box(&th0, 0.8, 0.01) {
        Err(ExtFlowError::ShrinkRequired { max_rho }) => max_rho,
        other => panic!("expected a shrink request, got {other:?}"),
    };
    assert!(max_rho > 0.0 && max_rho < 0.8);
    let b = f.build_flow_box(&th0, max_rho, 0.01).unwrap();
    // Direct sampling of X·n along the central flow line.
    for k in 0..=200 {
        let t = max_rho * (-1.0 + k as f64 / 100.0);
        let th = f.advance_lifted(&th0, t).unwrap();
        let x = f.field_vec(&th);
        let xn: f64 = x.iter().zip(&b.normal).map(|(a, n)| a * n).sum();
        assert!(xn > 0.0, "t = {t}: X·n = {xn}");
    }
}

#[test]
fn linear_residence_time_is_the_box_thickness() {
    let f = golden();
    let th0 = [0.1, 0.4];
    let rho = 0.1;
    let b = f.build_flow_box(&th0, rho, 0.05).unwrap();
    let rb = f.residence_bounds(&th0, &b, 400.0).unwrap();
    // Flow lines are parallel to the box axis, so each complete visit lasts 2ρ.
    assert!((rb.tau0 - 2.0 * rho).abs() < 1e-9, "{rb:?}");
    assert!((rb.tau0p - 2.0 * rho).abs() < 1e-9, "{rb:?}");
    assert!(rb.tau0 <= rb.tau0p && rb.tau1 <= rb.tau1p);
    assert!(rb.visits >= 3);

    let prof_short = f.residence_bounds(&th0, &b, 1.0);
    assert!(matches!(prof_short, Err(ExtFlowError::InsufficientData { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_flow_property(th in prop::array::uniform2(0.0f64..1.0), t1 in -50.0f64..50.0, t2 in -50.0f64..50.0) {
        let f = golden();
        let a = f.advance(&f.advance(&th, t1).unwrap(), t2).unwrap();
        let b = f.advance(&th, t1 + t2).unwrap();
        for i in 0..2 {
            prop_assert!(wrap_centered(a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shear_flow_property(th in prop::array::uniform2(0.0f64..1.0), t1 in -3.0f64..3.0, t2 in -3.0f64..3.0) {
        let f = ExternalFlowModel::shear(vec![1.0, 0.4], 0.3).unwrap();
        let a = f.advance_lifted(&f.advance_lifted(&th, t1).unwrap(), t2).unwrap();
        let b = f.advance_lifted(&th, t1 + t2).unwrap();
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn residence_bounds_bracket_every_visit(c in prop::array::uniform2(0.0f64..1.0), rho in 0.03f64..0.2) {
        let f = golden();
        let b = f.build_flow_box(&c, rho, 0.05).unwrap();
        let rb = f.residence_bounds(&c, &b, 300.0).unwrap();
        let prof = f.recurrence_profile(&c, 1e-3, 1.0, false).unwrap();
        prop_assert!(prof.intervals[0].entry == 0.0);
        prop_assert!(rb.tau0 <= rb.tau0p && rb.tau1 <= rb.tau1p);
        prop_assert!(rb.tau0 > 0.0 && rb.tau1 > 0.0);
    }
}
