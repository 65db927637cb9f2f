use geodiff::integrate::*;
use geodiff::models::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn torus() -> SystemModel<f64> {
    SystemModel::torus_default()
}

fn cfg() -> IntegratorConfig<f64> {
    IntegratorConfig::default()
}

/// A state of `H₀ = ½` on the torus off the closed orbit.
fn generic_unit_state() -> CotangentState<f64> {
    let m = torus();
    let x = [0.31, 0.2];
    let f = 2.0 + (2.0 * PI * x[0]).cos();
    let py = 0.8;
    let px = (1.0 - py * py / (f * f)).sqrt();
    let z = CotangentState::new(x, [px, py]);
    assert!((m.eval_h0(&z).unwrap() - 0.5).abs() < 1e-14);
    z
}

#[test]
fn zero_time_is_identity() {
    let z = generic_unit_state();
    assert_eq!(flow_unperturbed(&torus(), &z, 0.0, &cfg()).unwrap(), z);
}

#[test]
fn closed_orbit_is_a_relative_equilibrium() {
    let m = torus();
    let z = CotangentState::from_polar(PI, 0.0, 0.0, 1.0);
    // The orbit is hyperbolic with rate 2π, so round-off grows like e^{2πt}.
    let w = flow_unperturbed(&m, &z, 2.0, &cfg()).unwrap();
    assert!((w.x[0] - 0.5).abs() < 1e-9);
    assert!(w.y[0].abs() < 1e-9);
    assert!((w.x[1] - 2.0).abs() < 1e-9);
    assert_eq!(w.y[1], 1.0);
}

#[test]
fn unperturbed_energy_and_clairaut_integral_are_conserved() {
    let m = torus();
    let z = generic_unit_state();
    let w = flow_unperturbed(&m, &z, 100.0, &IntegratorConfig::with_tol(1e-12)).unwrap();
    assert!((m.eval_h0(&w).unwrap() - 0.5).abs() < 1e-9);
    assert!((w.y[1] - z.y[1]).abs() < 1e-10);
}

#[test]
fn flows_are_reversible() {
    let m = torus();
    let z = generic_unit_state();
    let c = IntegratorConfig::with_tol(1e-12);
    let w = flow_unperturbed(&m, &z, 7.0, &c).unwrap();
    let back = flow_unperturbed(&m, &w, -7.0, &c).unwrap();
    for (a, b) in back.to_vec().iter().zip(z.to_vec()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn geodesic_flow_commutes_with_dilation() {
    let m = torus();
    let z = generic_unit_state();
    for e in [2.0f64, 0.125] {
        let c = (2.0 * e).sqrt();
        let d = m.dilate(&z, e).unwrap();
        for t in [0.5, 3.0, 10.0] {
            let lhs = flow_unperturbed(&m, &d, t, &IntegratorConfig::with_tol(1e-12)).unwrap();
            let inner = flow_unperturbed(&m, &z, c * t, &IntegratorConfig::with_tol(1e-12)).unwrap();
            let rhs = m.dilate(&inner, e).unwrap();
            for (a, b) in lhs.to_vec().iter().zip(rhs.to_vec()) {
                assert!((a - b).abs() < 1e-8, "E = {e}, t = {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn uncoupled_extended_flow_splits() {
    let m = torus().with_potential(Potential::zero());
    let z = ExtendedState::new(generic_unit_state(), vec![0.1, 0.8], 0.0);
    let w = flow_extended(&m, &z, 4.0, &cfg()).unwrap();
    let base = flow_unperturbed(&m, &z.base, 4.0, &cfg()).unwrap();
    let theta = m.external.advance_lifted(&z.theta, 4.0).unwrap();
    for (a, b) in w.base.to_vec().iter().zip(base.to_vec()) {
        assert!((a - b).abs() < 1e-9);
    }
    for (a, b) in w.theta.iter().zip(&theta) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(w.time, 4.0);
}

#[test]
fn energy_rate_is_the_derivative_along_the_external_flow() {
    let m = torus();
    let z = ExtendedState::new(generic_unit_state(), vec![0.1, 0.8], 0.0);
    let h = 1e-4;
    let c = IntegratorConfig::with_tol(1e-13);
    for t in [0.7, 2.2, 5.0] {
        let tr = trajectory_extended(&m, &z, &[t - h, t, t + h], &c).unwrap();
        let fd = (tr.energy_track[2] - tr.energy_track[0]) / (2.0 * h);
        let mid = &tr.samples[1];
        let exact = m.d_x_v(&mid.base.x, &mid.theta);
        assert!((fd - exact).abs() < 1e-6 * (1.0 + exact.abs()), "t = {t}: {fd} vs {exact}");
    }
}

#[test]
fn energy_grows_at_most_linearly() {
    let m = torus();
    // sup |D_X V| by grid search; the spatial factor and the weight rate separate.
    let n = 200;
    let mut sup_v: f64 = 0.0;
    let mut sup_w: f64 = 0.0;
    let nu = m.external.frequency().unwrap().to_vec();
    for i in 0..n {
        for k in 0..n {
            let (a, b) = (i as f64 / n as f64, k as f64 / n as f64);
            let (r, p) = (2.0 * PI * a, 2.0 * PI * b);
            sup_v = sup_v.max((r.cos() + 0.3 * r.sin() * (p.sin() + 0.5 * (2.0 * p).sin())).abs());
            let mut g = [0.0; 2];
            m.potential.terms[0].weight.gradient(&[a, b], &mut g);
            sup_w = sup_w.max((g[0] * nu[0] + g[1] * nu[1]).abs());
        }
    }
    let bound_rate = 1.01 * sup_v * sup_w;
    let z = ExtendedState::new(generic_unit_state(), vec![0.1, 0.8], 0.0);
    let times: Vec<f64> = (1..=40).map(|k| 0.5 * k as f64).collect();
    let tr = trajectory_extended(&m, &z, &times, &cfg()).unwrap();
    let h0 = m.eval_h(&z).unwrap();
    for (t, h) in times.iter().zip(&tr.energy_track) {
        assert!((h - h0).abs() <= t * bound_rate + 1e-8, "t = {t}");
    }
    assert!(tr.stats.accepted > 0);
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,x0,x1,y0,y1,theta0,theta1,H"));
    assert_eq!(text.lines().count(), times.len() + 1);
}

#[test]
fn slow_fast_flow_is_conjugate_to_the_coupled_flow() {
    let m = torus();
    let z = ExtendedState::new(CotangentState::new([0.31, 0.2], [0.3, 0.9]), vec![0.1, 0.8], 0.4);
    let c = IntegratorConfig::with_tol(1e-12);
    for eps in [0.5, 0.1] {
        let s = 3.0;
        let scaled = flow_scaled(&m, &m.to_scaled(&z, eps).unwrap(), s, &c).unwrap();
        let back = m.from_scaled(&scaled);
        let direct = flow_extended(&m, &z, eps * s, &c).unwrap();
        for (a, b) in back.base.to_vec().iter().zip(direct.base.to_vec()) {
            assert!((a - b).abs() < 1e-8, "eps {eps}: {a} vs {b}");
        }
        for (a, b) in back.theta.iter().zip(&direct.theta) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((back.time - direct.time).abs() < 1e-12);
    }
}

#[test]
fn frozen_angles_at_zero_scale() {
    let m = torus();
    let z = ScaledState {
        q: [0.3, 0.1],
        p: [0.2, 1.0],
        theta: vec![0.25, 0.5],
        s: 0.0,
        epsilon: 0.0,
    };
    let w = flow_scaled(&m, &z, 5.0, &cfg()).unwrap();
    assert_eq!(w.theta, z.theta);
}

#[test]
fn scaled_energy_is_slow() {
    let m = torus();
    let eps = 0.1;
    let z = ScaledState {
        q: [0.31, 0.2],
        p: [0.3, 1.2],
        theta: vec![0.1, 0.8],
        s: 0.0,
        epsilon: eps,
    };
    let c = IntegratorConfig::with_tol(1e-13);
    let h = 1e-2;
    for s in [0.5, 1.5] {
        let a = flow_scaled(&m, &z, s - h, &c).unwrap();
        let mid = flow_scaled(&m, &z, s, &c).unwrap();
        let b = flow_scaled(&m, &z, s + h, &c).unwrap();
        let fd = (m.eval_h_eps(&b).unwrap() - m.eval_h_eps(&a).unwrap()) / (2.0 * h);
        let exact = eps.powi(3) * m.d_x_v(&mid.q, &mid.theta);
        assert!((fd - exact).abs() < 1e-6, "{fd} vs {exact}");
    }
}

#[test]
fn symplectic_energy_error_stays_bounded() {
    let m = torus();
    let z = generic_unit_state();
    let c = IntegratorConfig::symplectic(Method::SymplecticGauss4, 0.005);
    let mut worst_early: f64 = 0.0;
    let mut worst_late: f64 = 0.0;
    let mut w = z;
    for k in 0..100 {
        w = flow_unperturbed(&m, &w, 1.0, &c).unwrap();
        let err = (m.eval_h0(&w).unwrap() - 0.5).abs();
        if k < 50 {
            worst_early = worst_early.max(err);
        } else {
            worst_late = worst_late.max(err);
        }
    }
    assert!(worst_late < 1e-6);
    assert!(worst_late < 3.0 * worst_early + 1e-12, "{worst_early} then {worst_late}");
}

#[test]
fn invalid_configurations_are_rejected() {
    let m = torus();
    let z = generic_unit_state();
    let bad = IntegratorConfig { abs_tol: 0.0, ..cfg() };
    assert!(matches!(flow_unperturbed(&m, &z, 1.0, &bad), Err(IntegrateError::Config(_))));
    let short = IntegratorConfig { max_steps: 3, ..cfg() };
    assert!(matches!(flow_unperturbed(&m, &z, 100.0, &short), Err(IntegrateError::TooManySteps(_))));
    let zt = ExtendedState::new(z, vec![0.0, 0.0], 0.0);
    assert!(trajectory_extended(&m, &zt, &[1.0, 1.0], &cfg()).is_err());
}

#[test]
fn single_precision_flow_conserves_energy() {
    let m = SystemModel::<f32>::torus_default();
    let z = CotangentState::new([0.31f32, 0.2], [0.6, 0.8]);
    let h0 = m.eval_h0(&z).unwrap();
    let c = IntegratorConfig::<f32>::with_tol(1e-6);
    let w = flow_unperturbed(&m, &z, 10.0, &c).unwrap();
    assert!((m.eval_h0(&w).unwrap() - h0).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reversal_on_random_states(x in prop::array::uniform2(0.0f64..1.0), y in prop::array::uniform2(-1.5f64..1.5), t in 0.1f64..10.0) {
        let m = torus();
        let z = CotangentState::new(x, y);
        let c = IntegratorConfig::with_tol(1e-12);
        let back = flow_unperturbed(&m, &flow_unperturbed(&m, &z, t, &c).unwrap(), -t, &c).unwrap();
        for (a, b) in back.to_vec().iter().zip(z.to_vec()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
