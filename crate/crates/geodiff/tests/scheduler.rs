use geodiff::invariant::*;
use geodiff::melnikov::*;
use geodiff::models::*;
use geodiff::scalar::wrap_centered;
use geodiff::scheduler::*;
use proptest::prelude::*;
use std::f64::consts::SQRT_2;

struct Setup {
    model: SystemModel<f64>,
    h1: HomoclinicData,
    h2: HomoclinicData,
    gains: GainModel,
}

fn setup(model: SystemModel<f64>) -> Setup {
    let h1 = find_homoclinics(&model, 1.0, Branch::One).unwrap();
    let h2 = find_homoclinics(&model, 1.0, Branch::Two).unwrap();
    let gains = GainModel::new(&model, &h1, &h2).unwrap();
    Setup { model, h1, h2, gains }
}

fn start(phi: f64) -> BlockState {
    BlockState {
        j: SQRT_2,
        phi,
        theta: vec![0.0, 0.0],
    }
}

fn rem() -> RemainderModel {
    RemainderModel::default()
}

#[test]
fn block_bookkeeping() {
    let mut s = setup(SystemModel::torus_default());
    let a = s.gains.phase_shift();
    let st = BlockState {
        j: 1.7,
        phi: 0.3,
        theta: vec![0.2, 0.6],
    };
    let eps = 0.05;
    let b = make_block(&mut s.gains, Branch::Two, &st, a + 1.0, eps, &rem()).unwrap();
    let fresh = g1_angle(&s.model, &s.h2, 1.7, 0.3, &[0.2, 0.6], a + 1.0).unwrap().value;
    assert!((b.g1 - fresh).abs() < 1e-12, "{} vs {fresh}", b.g1);
    assert_eq!(b.predicted_gain, eps.powi(3) * b.g1);
    assert!((b.scaled_duration - 1.0 / 1.7).abs() < 1e-15);
    assert!((b.remainder_bound - DEFAULT_REMAINDER_C * eps.powi(4) * eps.ln().abs()).abs() < 1e-18);

    let unit = make_block(&mut s.gains, Branch::One, &start(0.0), a + 1.0, eps, &rem()).unwrap();
    assert!((unit.scaled_duration - 1.0 / SQRT_2).abs() < 1e-15);
}

#[test]
fn block_preconditions() {
    let mut s = setup(SystemModel::torus_default());
    let a = s.gains.phase_shift();
    let hot = BlockState {
        j: 3.0,
        phi: 0.0,
        theta: vec![0.0, 0.0],
    };
    assert!(matches!(
        make_block(&mut s.gains, Branch::One, &hot, a + 1.0, 0.1, &rem()),
        Err(SchedulerError::Domain(_))
    ));
    let short = BlockState {
        theta: vec![0.0],
        ..start(0.0)
    };
    assert!(matches!(
        make_block(&mut s.gains, Branch::One, &short, a + 1.0, 0.1, &rem()),
        Err(SchedulerError::Domain(_))
    ));
    assert!(make_block(&mut s.gains, Branch::One, &start(0.0), a, 0.1, &rem()).is_err());
}

#[test]
fn uncoupled_model_does_not_move() {
    let mut s = setup(SystemModel::torus_default().with_potential(Potential::zero()));
    let a = s.gains.phase_shift();
    let b = make_block(&mut s.gains, Branch::One, &start(0.2), a + 1.0, 0.1, &rem()).unwrap();
    assert_eq!(b.predicted_gain, 0.0);
    let sched = schedule_single_map(&mut s.gains, Branch::One, 0.1, &start(0.2), 50, &rem()).unwrap();
    assert_eq!(sched.net_gain(), 0.0);
}

#[test]
fn ledger_and_angle_path_are_consistent() {
    let mut s = setup(SystemModel::torus_default());
    let eps = 0.1;
    let sched = schedule_single_map(&mut s.gains, Branch::One, eps, &start(0.35), 150, &rem()).unwrap();
    assert_eq!(sched.policy, Policy::SingleMap);
    assert_eq!(sched.blocks.len(), 150);
    assert_eq!(sched.ledger.len(), 151);
    assert_eq!(sched.theta_path.len(), 151);
    assert!((sched.net_gain() - sched.predicted_total()).abs() < 1e-12);
    for (n, b) in sched.blocks.iter().enumerate() {
        let (l0, l1) = (sched.ledger[n], sched.ledger[n + 1]);
        assert!((l1.h_eps - l0.h_eps - b.predicted_gain).abs() < 1e-15);
        assert!((l1.h_physical - l1.h_eps / (eps * eps)).abs() < 1e-12 * l1.h_physical);
        assert!((l1.t_physical - l0.t_physical - eps * b.scaled_duration).abs() < 1e-12);
        assert_eq!(b.pre_state.theta, sched.theta_path[n]);
        assert!((b.pre_state.h_eps() - l0.h_eps).abs() < 1e-12);
        // Every block but the first starts on the chosen angle.
        assert!((b.pre_state.phi - 0.35).abs() < 1e-12);
        let step = s.model.external.advance(&sched.theta_path[n], eps * b.scaled_duration).unwrap();
        for (x, y) in step.iter().zip(&sched.theta_path[n + 1]) {
            assert!(wrap_centered(x - y).abs() < 1e-12);
        }
    }
    let total = s.model.external.advance(&[0.0, 0.0], eps * sched.scaled_time()).unwrap();
    for (x, y) in total.iter().zip(sched.theta_path.last().unwrap()) {
        assert!(wrap_centered(x - y).abs() < 1e-8);
    }
    assert_eq!(sched.final_state.theta, *sched.theta_path.last().unwrap());
}

fn default_plan(s: &Setup) -> (A4Report, TwoMapPlan) {
    let l = s.h1.phase_shift + 1.0;
    let r = check_a4(&s.model, &s.h1, &s.h2, &[0.0, 0.0], l, &A4Options::default()).unwrap();
    let plan = TwoMapPlan::from_report(&r).unwrap();
    (r, plan)
}

#[test]
fn two_map_gain_beats_the_residence_bound() {
    let mut s = setup(SystemModel::torus_default());
    let (r, plan) = default_plan(&s);
    let eps: f64 = 0.1;
    let n1 = (1.0 / (eps * eps)).ceil() as usize;
    let sched = schedule_two_map(&mut s.gains, &plan, eps, &start(r.phi_star), n1, false, &rem()).unwrap();
    assert_eq!(sched.policy, Policy::TwoMap);
    let rb = s
        .model
        .external
        .residence_bounds(&[0.0, 0.0], &plan.flow_box, 400.0)
        .unwrap();
    let bound = 0.5 * eps * rb.tau0 * r.delta;
    assert!(sched.net_gain() >= bound, "{} < {bound}", sched.net_gain());

    // Resummation with independent evaluations of each block's gain.
    let oracle: f64 = sched
        .blocks
        .iter()
        .map(|b| {
            let h = if b.branch == Branch::One { &s.h1 } else { &s.h2 };
            let st = &b.pre_state;
            eps.powi(3) * g1_angle(&s.model, h, st.j, st.phi, &st.theta, b.l).unwrap().value
        })
        .sum();
    assert!((oracle - sched.net_gain()).abs() < 1e-12, "{oracle} vs {}", sched.net_gain());

    // Branch choice follows membership of θ in the box, except within one block's θ-step of
    // the box faces where the choice is made before the budget is final.
    for b in &sched.blocks[1..] {
        let inside = plan.flow_box.contains(&b.pre_state.theta);
        if (b.branch == plan.lead) != inside {
            let (s_flow, _) = plan.flow_box.locate(&b.pre_state.theta).unwrap();
            let step = 2.0 * eps / b.pre_state.j;
            assert!((s_flow.abs() - plan.flow_box.rho).abs() <= step, "s = {s_flow}");
        }
    }
}

#[test]
fn boundary_crossings_are_rare() {
    let mut s = setup(SystemModel::torus_default());
    let (r, plan) = default_plan(&s);
    let rb = s
        .model
        .external
        .residence_bounds(&[0.0, 0.0], &plan.flow_box, 400.0)
        .unwrap();
    for eps in [0.1f64, 0.05] {
        let n1 = (1.0 / (eps * eps)).ceil() as usize;
        let sched = schedule_two_map(&mut s.gains, &plan, eps, &start(r.phi_star), n1, false, &rem()).unwrap();
        // Each visit of the box costs two switches; visits are at least τ₀ + τ₁ apart.
        let t = sched.ledger.last().unwrap().t_physical;
        let visits = (t / (rb.tau0 + rb.tau1)).floor() + 1.0;
        assert!(sched.transitions() as f64 <= 2.0 * visits, "{} switches over t = {t}", sched.transitions());
        assert!(sched.transitions() > 0);
    }
}

#[test]
fn plans_need_a_positive_margin() {
    let s = setup(SystemModel::torus_default().with_potential(Potential::symmetric(Weight::standard(2))));
    let l = s.h1.phase_shift + 1.0;
    let report = match check_a4(&s.model, &s.h1, &s.h2, &[0.0, 0.0], l, &A4Options::default()) {
        Err(MelnikovError::A4Indeterminate(r)) => r,
        other => panic!("expected indeterminate, got {other:?}"),
    };
    assert!(matches!(
        TwoMapPlan::from_report(&report),
        Err(SchedulerError::Precondition(_))
    ));
}

#[test]
fn single_map_change_is_second_order() {
    let mut s = setup(SystemModel::torus_default());
    let mut pts = Vec::new();
    for eps in [0.1f64, 0.05] {
        let n = (1.0 / eps).ceil() as usize;
        let sched = schedule_single_map(&mut s.gains, Branch::One, eps, &start(0.3), n, &rem()).unwrap();
        pts.push((eps, sched.net_gain().abs()));
    }
    let exponent = (pts[0].1 / pts[1].1).ln() / 2f64.ln();
    assert!(exponent >= 1.5, "{pts:?}: exponent {exponent}");
}

#[test]
fn reinitialization_halves_the_scale() {
    let mut s = setup(SystemModel::torus_default());
    let (r, plan) = default_plan(&s);
    let eps0 = 0.35;
    let d = run_diffusion(&mut s.gains, &plan, eps0, &start(r.phi_star), 2, 200_000, &rem()).unwrap();
    assert_eq!(d.epochs.len(), 2);
    assert!((d.epochs[1].epsilon - eps0 / SQRT_2).abs() < 1e-15);
    // Physical energy and time are continuous across the seam.
    let (a, b) = (&d.schedules[0], &d.schedules[1]);
    let end = a.ledger.last().unwrap();
    assert!((b.ledger[0].h_physical - end.h_physical).abs() < 1e-9 * end.h_physical);
    assert_eq!(b.ledger[0].t_physical, end.t_physical);
    assert!((b.ledger[0].h_eps - end.h_eps / 2.0).abs() < 1e-12);
    assert!(a.reached_ceiling && end.h_eps >= 2.0);
    for e in &d.epochs {
        assert!(e.slope > 0.0);
        assert!(e.h_end * e.epsilon * e.epsilon >= 2.0);
    }
    let next = reinitialize(b).unwrap();
    assert!((next.epsilon - eps0 / 2.0).abs() < 1e-15);
    assert!(d.summary_json().contains("\"slope_a\""));

    // Every ledger point sits above the fitted line.
    for sch in &d.schedules {
        for l in &sch.ledger {
            assert!(l.h_physical >= d.slope_a * l.t_physical + d.intercept_b - 1e-9);
        }
    }

    let early = schedule_single_map(&mut s.gains, Branch::One, 0.1, &start(0.0), 3, &rem()).unwrap();
    assert!(matches!(reinitialize(&early), Err(SchedulerError::PrematureReinit { .. })));
}

#[test]
fn epoch_energies_double() {
    // Unit scaled energy at ε reads as E = 1/ε²: E 1 → 2 → 4 while ε 1 → 1/√2 → ½.
    let mut eps: f64 = 1.0;
    let mut e = 1.0;
    for _ in 0..2 {
        e *= 2.0;
        eps /= SQRT_2;
        assert!((e * eps * eps - 1.0).abs() < 1e-12);
    }
    assert!((eps - 0.5).abs() < 1e-15 && e == 4.0);
}

#[test]
fn energy_path_validation() {
    assert!(EnergyPath::new(vec![0.0, 1.0], vec![10.0, 12.0], 1.0, 5.0).is_err());
    assert!(EnergyPath::new(vec![0.0, 1.0], vec![10.0, 4.0], 10.0, 5.0).is_err());
    assert!(EnergyPath::new(vec![1.0, 1.0], vec![10.0, 10.0], 1.0, 5.0).is_err());
    let p = EnergyPath::new(vec![0.0, 2.0, 4.0], vec![10.0, 12.0, 11.0], 1.0, 5.0).unwrap();
    assert_eq!(p.at(-1.0), 10.0);
    assert_eq!(p.at(1.0), 11.0);
    assert_eq!(p.at(3.0), 11.5);
    assert_eq!(p.at(9.0), 11.0);
    assert_eq!(p.end_time(), 4.0);

    let mut s = setup(SystemModel::torus_default());
    let ramp = EnergyPath::ramp(10.0, 5.0, 10.0);
    assert!(matches!(
        schedule_energy_path(&mut s.gains, 0.2, &start(0.0), &ramp, 16, 1.0, &rem()),
        Err(SchedulerError::Precondition(_))
    ));
}

#[test]
fn constant_energy_path_is_held() {
    let mut s = setup(SystemModel::torus_default());
    let e: f64 = 25.0;
    let eps = 1.0 / e.sqrt();
    let phis: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
    let (rate, _) = max_gain_rate(&mut s.gains, &[0.0, 0.0], &phis, 64, 0.25).unwrap();
    assert!(rate > 0.0);
    let path = EnergyPath::constant(e, 40.0);
    let tr = schedule_energy_path(&mut s.gains, eps, &start(0.0), &path, 16, rate, &rem()).unwrap();
    assert!(tr.measured_d <= tr.d_bound, "{} > {}", tr.measured_d, tr.d_bound);
    for (sched, taus) in tr.schedules.iter().zip(&tr.path_times) {
        assert_eq!(sched.policy, Policy::EnergyPath);
        assert_eq!(sched.ledger.len(), taus.len());
        for (l, t) in sched.ledger.iter().zip(taus) {
            assert!((l.h_physical - path.at(*t)).abs() * e.sqrt() <= tr.measured_d + 1e-12);
        }
    }
    assert!(*tr.path_times.last().unwrap().last().unwrap() >= path.end_time());
}

#[test]
fn blocks_reproduce_the_integrated_flow() {
    let mut s = setup(SystemModel::torus_default());
    let eps = 0.05;
    let blocks = random_blocks(&mut s.gains, 10, eps, 7, &rem()).unwrap();
    for b in &blocks {
        let v = validate_block(&s.gains, b, eps, 1.0).unwrap();
        assert!(v.error() <= 2.0 * v.remainder_bound, "{v:?}");
        assert_eq!(v.predicted, b.predicted_gain);
    }
    let again = random_blocks(&mut s.gains, 10, eps, 7, &rem()).unwrap();
    assert_eq!(blocks, again);
}

#[test]
fn schedule_csv() {
    let mut s = setup(SystemModel::torus_default());
    let sched = schedule_single_map(&mut s.gains, Branch::Two, 0.1, &start(0.5), 4, &rem()).unwrap();
    let mut buf = Vec::new();
    sched.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "block,branch,J,phi,theta0,theta1,H_eps,H_physical,t_physical");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,2,"));
    assert!(lines[5].starts_with("4,,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retarget_hits_the_target(phi in 0.0f64..1.0, target in 0.0f64..1.0, a in -1.0f64..1.0) {
        let l = retarget(phi, target, a);
        prop_assert!(l >= a + 1.0 && l < a + 2.0);
        prop_assert!(wrap_centered(phi + l - target).abs() < 1e-12);
    }

    #[test]
    fn lower_fit_is_below_every_point(ys in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect();
        let (a, b) = lower_linear_fit(&pts);
        for (t, h) in &pts {
            prop_assert!(*h >= a * t + b - 1e-12);
        }
    }
}
