//! Hyperbolic closed geodesic, Floquet data, homoclinic branches, action-angle
//! charts and the phase shift of the unperturbed scattering map.
//!
//! Both built-in testbeds are integrable, so each homoclinic branch reduces to the
//! one-dimensional equation `dw/dσ̂ = −h(w)·sin(πw)` for the deviation `w` of the
//! transverse coordinate from the closed orbit, solved at unit action and mapped to
//! any other energy exactly. Working with `w` rather than the coordinate itself keeps
//! full relative precision in the exponential tails.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix4};
use thiserror::Error;

use crate::integrate::{IntegrateError, IntegratorConfig, Solver};
use crate::models::{CotangentState, Metric, ModelError, SystemModel};
use crate::quad;
use crate::scalar::wrap_unit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("Newton iteration for the periodic orbit did not converge (residual {residual:e})")]
    NoOrbitFound { residual: f64 },
    #[error("periodic orbit is not hyperbolic: largest multiplier modulus {modulus}")]
    NotHyperbolic { modulus: f64 },
    #[error("no homoclinic orbit: {0}")]
    NoHomoclinic(String),
    #[error("tail not converged: {0}")]
    NotConverged(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One of the two geometrically distinct homoclinic branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Branch {
    One,
    Two,
}

impl Branch {
    pub fn index(self) -> u8 {
        match self {
            Branch::One => 1,
            Branch::Two => 2,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Branch::One => Branch::Two,
            Branch::Two => Branch::One,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Branch::One => 1.0,
            Branch::Two => -1.0,
        }
    }
}

/// Integrable testbed that the invariant computations understand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Testbed {
    Torus { bulge: f64 },
    Pendulum,
}

impl Testbed {
    pub fn of(model: &SystemModel<f64>) -> Self {
        match model.metric {
            Metric::Torus(p) => Testbed::Torus { bulge: p.bulge() },
            Metric::PendulumRotator => Testbed::Pendulum,
        }
    }

    /// Transverse coordinate of the hyperbolic closed orbit.
    pub fn orbit_coordinate(&self) -> f64 {
        match self {
            Testbed::Torus { .. } => 0.5,
            Testbed::Pendulum => 0.0,
        }
    }

    /// Hyperbolic rate of the separatrix at unit action.
    fn unit_rate(&self) -> f64 {
        match self {
            Testbed::Torus { bulge } => 2.0 * PI * bulge.sqrt(),
            Testbed::Pendulum => 1.0,
        }
    }

    /// Factor relating the separatrix time at action `J` to the unit-action time.
    fn time_scale(&self, j: f64) -> f64 {
        match self {
            Testbed::Torus { .. } => j,
            Testbed::Pendulum => 1.0,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(self, Testbed::Torus { .. })
    }

    /// Lyapunov exponent of the closed orbit at action `J`, per unit scaled time.
    pub fn hyperbolic_rate(&self, j: f64) -> f64 {
        self.unit_rate() * self.time_scale(j)
    }
}

/// Action-angle coordinates on the cylinder of closed orbits: `J = √(2E)`, angle of
/// period one, `H₀ = ½J²` and angular speed `J`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ActionAngleChart {
    pub j: f64,
    pub phi: f64,
}

impl ActionAngleChart {
    pub fn new(j: f64, phi: f64) -> Self {
        Self { j, phi: wrap_unit(phi) }
    }

    pub fn from_energy_time(e: f64, s: f64) -> Self {
        let j = (2.0 * e).sqrt();
        Self::new(j, j * s)
    }

    pub fn energy(&self) -> f64 {
        0.5 * self.j * self.j
    }

    /// Time phase `s ∈ [0, 1/J)`.
    pub fn time(&self) -> f64 {
        self.phi / self.j
    }

    /// Point of the closed orbit at this angle.
    pub fn point(&self, testbed: &Testbed) -> CotangentState<f64> {
        CotangentState::new([testbed.orbit_coordinate(), self.phi], [0.0, self.j])
    }
}

/// Unperturbed scattering map `(J, φ) ↦ (J, φ + a)`.
pub fn unperturbed_scattering(chart: ActionAngleChart, phase_shift: f64) -> ActionAngleChart {
    ActionAngleChart::new(chart.j, chart.phi + phase_shift)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbitData {
    pub energy: f64,
    pub initial_point: CotangentState<f64>,
    pub period: f64,
    /// `(μ, 1/μ)` with `|μ| > 1`.
    pub floquet_multipliers: (f64, f64),
    pub unstable_direction: [f64; 4],
    pub stable_direction: [f64; 4],
    /// `ln|μ| / period`.
    pub lyapunov_exponent: f64,
    pub residual: f64,
}

const HYPERBOLICITY_MARGIN: f64 = 1e-3;

fn tight() -> IntegratorConfig<f64> {
    IntegratorConfig::with_tol(1e-13)
}

/// `y₁ > 0` on the energy surface `H₀ = E` given `(x, y₀)`.
fn momentum_on_shell(metric: &Metric<f64>, x: [f64; 2], y0: f64, e: f64) -> Option<f64> {
    let base = metric.h0(&x, &[y0, 0.0]);
    let unit = metric.h0(&x, &[y0, 1.0]) - base;
    let r = (e - base) / unit;
    (r > 0.0).then(|| r.sqrt())
}

fn unperturbed_field(metric: &Metric<f64>, z: &[f64], dz: &mut [f64]) {
    let x = [z[0], z[1]];
    let y = [z[2], z[3]];
    let hy = metric.dh0_dy(&x, &y);
    let hx = metric.dh0_dx(&x, &y);
    dz[0] = hy[0];
    dz[1] = hy[1];
    dz[2] = -hx[0];
    dz[3] = -hx[1];
}

/// First return to `x₁ = x₁(0) + 1`, integrating with `x₁` as the independent variable.
/// Returns the state and the elapsed time.
fn return_map(metric: &Metric<f64>, z: [f64; 4]) -> Result<([f64; 4], f64), InvariantError> {
    let solver = Solver::new(tight());
    let mut y0 = z.to_vec();
    y0.push(0.0);
    let f = |_: f64, u: &[f64], du: &mut [f64]| {
        let mut d = [0.0; 4];
        unperturbed_field(metric, &u[..4], &mut d);
        let inv = 1.0 / d[1];
        for i in 0..4 {
            du[i] = d[i] * inv;
        }
        du[4] = inv;
    };
    let y = solver.run_to(f, z[1], &y0, z[1] + 1.0)?;
    Ok(([y[0], y[1], y[2], y[3]], y[4]))
}

/// Hyperbolic closed orbit of the unperturbed flow at energy `E` near the default guess.
pub fn find_periodic_orbit(model: &SystemModel<f64>, e: f64) -> Result<PeriodicOrbitData, InvariantError> {
    let tb = Testbed::of(model);
    find_periodic_orbit_near(model, e, tb.orbit_coordinate())
}

/// Newton refinement of the fixed point of the return map to `x₁ + 1`, starting from
/// transverse coordinate `x0_guess` with zero transverse momentum.
pub fn find_periodic_orbit_near(
    model: &SystemModel<f64>,
    e: f64,
    x0_guess: f64,
) -> Result<PeriodicOrbitData, InvariantError> {
    if !(e > 0.0) {
        return Err(InvariantError::Model(ModelError::InvalidParameter(format!(
            "energy must be positive, got {e}"
        ))));
    }
    let metric = model.metric;
    let lift = |u: [f64; 2]| -> Result<[f64; 4], InvariantError> {
        let y1 = momentum_on_shell(&metric, [u[0], 0.0], u[1], e).ok_or(InvariantError::NoOrbitFound {
            residual: f64::INFINITY,
        })?;
        Ok([u[0], 0.0, u[1], y1])
    };
    let residual = |u: [f64; 2]| -> Result<[f64; 2], InvariantError> {
        let (z1, _) = return_map(&metric, lift(u)?)?;
        Ok([z1[0] - u[0], z1[2] - u[1]])
    };
    let mut u = [x0_guess, 0.0];
    let mut r = residual(u)?;
    let mut rn = r[0].hypot(r[1]);
    for _ in 0..30 {
        if rn < 1e-12 {
            break;
        }
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut up = u;
            let mut um = u;
            up[k] += h;
            um[k] -= h;
            let rp = residual(up)?;
            let rm = residual(um)?;
            jac[0][k] = (rp[0] - rm[0]) / (2.0 * h);
            jac[1][k] = (rp[1] - rm[1]) / (2.0 * h);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            return Err(InvariantError::NoOrbitFound { residual: rn });
        }
        let du0 = (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        let du1 = (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det;
        u = [u[0] - du0, u[1] - du1];
        r = residual(u)?;
        rn = r[0].hypot(r[1]);
        if !rn.is_finite() {
            break;
        }
    }
    if !(rn < 1e-10) {
        return Err(InvariantError::NoOrbitFound { residual: rn });
    }
    let z0 = lift(u)?;
    let (_, period) = return_map(&metric, z0)?;
    let m = monodromy(&metric, z0, period)?;
    let (mu, mu_inv, v_u, v_s) = floquet(&m)?;
    if mu.abs() <= 1.0 + HYPERBOLICITY_MARGIN {
        return Err(InvariantError::NotHyperbolic { modulus: mu.abs() });
    }
    Ok(PeriodicOrbitData {
        energy: e,
        initial_point: CotangentState::from_slice(&z0),
        period,
        floquet_multipliers: (mu, mu_inv),
        unstable_direction: v_u,
        stable_direction: v_s,
        lyapunov_exponent: mu.abs().ln() / period,
        residual: rn,
    })
}

/// Monodromy matrix from the variational equation, with the Jacobian of the vector
/// field by centered differences.
fn monodromy(metric: &Metric<f64>, z0: [f64; 4], period: f64) -> Result<Matrix4<f64>, InvariantError> {
    let solver = Solver::new(tight());
    let mut y0 = z0.to_vec();
    for i in 0..4 {
        for j in 0..4 {
            y0.push(if i == j { 1.0 } else { 0.0 });
        }
    }
    let f = |_: f64, u: &[f64], du: &mut [f64]| {
        unperturbed_field(metric, &u[..4], &mut du[..4]);
        let mut jac = [[0.0; 4]; 4];
        let h = 1e-6;
        for k in 0..4 {
            let mut zp = [u[0], u[1], u[2], u[3]];
            let mut zm = zp;
            zp[k] += h;
            zm[k] -= h;
            let mut fp = [0.0; 4];
            let mut fm = [0.0; 4];
            unperturbed_field(metric, &zp, &mut fp);
            unperturbed_field(metric, &zm, &mut fm);
            for i in 0..4 {
                jac[i][k] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += jac[i][k] * u[4 + 4 * k + j];
                }
                du[4 + 4 * i + j] = acc;
            }
        }
    };
    let y = solver.run_to(f, 0.0, &y0, period)?;
    Ok(Matrix4::from_row_slice(&y[4..20]))
}

fn null_vector(m: &Matrix4<f64>, lambda: f64) -> [f64; 4] {
    let a = DMatrix::from_fn(4, 4, |i, j| m[(i, j)] - if i == j { lambda } else { 0.0 });
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    let row = vt.row(k);
    let mut v = [row[0], row[1], row[2], row[3]];
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = if v.iter().fold(0.0, |a: f64, x| if x.abs() > a.abs() { *x } else { a }) < 0.0 {
        -1.0
    } else {
        1.0
    };
    for x in v.iter_mut() {
        *x *= s / n;
    }
    v
}

/// Dominant multiplier, its reciprocal partner and the two eigen-directions.
fn floquet(m: &Matrix4<f64>) -> Result<(f64, f64, [f64; 4], [f64; 4]), InvariantError> {
    let eig = m.complex_eigenvalues();
    let (mut big, mut small) = (eig[0], eig[0]);
    for z in eig.iter() {
        if z.norm() > big.norm() {
            big = *z;
        }
        if z.norm() < small.norm() {
            small = *z;
        }
    }
    if big.im.abs() > 1e-9 * big.norm() || big.norm() <= 1.0 + HYPERBOLICITY_MARGIN {
        return Err(InvariantError::NotHyperbolic { modulus: big.norm() });
    }
    let mu = big.re;
    let inv = m
        .try_inverse()
        .ok_or(InvariantError::NotHyperbolic { modulus: big.norm() })?;
    // 1/μ as the reciprocal of the dominant multiplier of the backward monodromy.
    let back = inv.complex_eigenvalues();
    let top = back.iter().fold(back[0], |a, z| if z.norm() > a.norm() { *z } else { a });
    let mu_inv = 1.0 / top.re;
    let _ = small;
    Ok((mu, mu_inv, null_vector(m, mu), null_vector(m, mu_inv)))
}

/// Options controlling the sampling of homoclinic orbits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomoclinicOptions {
    /// Panel width in unit-action time.
    pub panel: f64,
    /// Gauss–Legendre nodes per panel.
    pub nodes: usize,
    /// Scale parameter entering the span `max(40, 12|ln ε|)/rate`.
    pub epsilon: f64,
}

impl Default for HomoclinicOptions {
    fn default() -> Self {
        Self {
            panel: 0.05,
            nodes: 8,
            epsilon: 0.1,
        }
    }
}

impl HomoclinicOptions {
    /// Finer panels when the potential has compactly supported bumps.
    pub fn for_model(model: &SystemModel<f64>) -> Self {
        let has_bump = model
            .potential
            .terms
            .iter()
            .any(|t| matches!(t.spatial, crate::models::Spatial::Bump(_)));
        Self {
            panel: if has_bump { 0.005 } else { 0.05 },
            epsilon: model.epsilon().min(0.1),
            ..Self::default()
        }
    }
}

/// Separatrix at unit action on `σ̂ ≥ 0`, shared by both branches and all energies.
#[derive(Debug, Clone, PartialEq)]
struct ReducedSeparatrix {
    testbed: Testbed,
    /// Half span in unit-action time; a multiple of two panels.
    half_span: f64,
    /// Nodes on `(0, half_span)` with weights, deviation `w`, transverse momentum
    /// magnitude and the angle excess `ṽ = v − σ̂`.
    sigma: Vec<f64>,
    weight: Vec<f64>,
    w: Vec<f64>,
    p: Vec<f64>,
    v_excess: Vec<f64>,
    /// `ṽ(∞)` estimated at the full and at the half span.
    v_inf: f64,
    v_inf_half: f64,
    decay_fit: f64,
}

fn reduced_rhs(tb: &Testbed, w: f64) -> (f64, f64) {
    let s = (PI * w).sin();
    match *tb {
        Testbed::Torus { bulge: b } => {
            let f = 1.0 + 2.0 * b * s * s;
            let dw = -(2.0 * b).sqrt() * s * (2.0 + 2.0 * b * s * s).sqrt() / f;
            (dw, 1.0 / (f * f) - 1.0)
        }
        Testbed::Pendulum => (-s / PI, 0.0),
    }
}

/// `(w, ṽ)` at the requested nonnegative times, integrating `ln w` for relative accuracy
/// in the tail.
fn solve_reduced(tb: &Testbed, outs: &[f64]) -> Result<Vec<[f64; 2]>, InvariantError> {
    let cfg = IntegratorConfig::with_tol(1e-13);
    let ys = Solver::new(cfg).run(
        |_, u, du| {
            let w = u[0].exp();
            let (dw, dv) = reduced_rhs(tb, w);
            du[0] = dw / w;
            du[1] = dv;
        },
        0.0,
        &[0.5f64.ln(), 0.0],
        outs,
    )?;
    Ok(ys.into_iter().map(|y| [y[0].exp(), y[1]]).collect())
}

fn reduce(tb: Testbed, opts: &HomoclinicOptions) -> Result<ReducedSeparatrix, InvariantError> {
    let rate = tb.unit_rate();
    let span_min = (40.0f64).max(12.0 * opts.epsilon.ln().abs()) / rate;
    let pair = 2.0 * opts.panel;
    let half_span = (span_min / pair).ceil() * pair;
    let panels = (half_span / opts.panel).round() as usize;
    let (sigma, weight) = quad::composite(0.0, half_span, panels, opts.nodes);
    let mut outs = sigma.clone();
    outs.push(half_span / 2.0);
    outs.push(half_span);
    outs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let ys = solve_reduced(&tb, &outs)?;
    let mut w = Vec::with_capacity(sigma.len());
    let mut v_excess = Vec::with_capacity(sigma.len());
    let mut v_half = 0.0;
    let mut v_full = 0.0;
    for (t, y) in outs.iter().zip(&ys) {
        if *t == half_span / 2.0 && !sigma.contains(t) {
            v_half = y[1];
            continue;
        }
        if *t == half_span {
            v_full = y[1];
            continue;
        }
        w.push(y[0]);
        v_excess.push(y[1]);
    }
    if w.len() != sigma.len() || w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(InvariantError::NotConverged(
            "separatrix deviation left (0, 1/2]".into(),
        ));
    }
    let p: Vec<f64> = w.iter().map(|&x| -reduced_rhs(&tb, x).0).collect();
    // Tail rate from ln w against σ̂ where w ∈ [1e-9, 1e-6].
    let pts: Vec<(f64, f64)> = sigma
        .iter()
        .zip(&w)
        .filter(|(_, w)| (1e-9..=1e-6).contains(*w))
        .map(|(s, w)| (*s, w.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(InvariantError::NotConverged(
            "too few tail samples to fit the decay rate".into(),
        ));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mx) * (p.1 - my), a.1 + (p.0 - mx) * (p.0 - mx)));
    let decay_fit = -sxy / sxx;
    Ok(ReducedSeparatrix {
        testbed: tb,
        half_span,
        sigma,
        weight,
        w,
        p,
        v_excess,
        v_inf: v_full,
        v_inf_half: v_half,
        decay_fit,
    })
}

/// One quadrature node of a sampled homoclinic orbit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomSample {
    pub sigma: f64,
    pub weight: f64,
    /// Configuration at phase zero; the orbit at time phase `s` has `x[1] + J s`.
    pub x: [f64; 2],
    pub y: [f64; 2],
    /// Transverse deviation from the closed orbit.
    pub dist: f64,
    /// Angle of the asymptotic closed-orbit point at this time, at phase zero.
    pub lambda_angle: f64,
    /// Whether the node lies in `[-T/2, T/2]`.
    pub inner: bool,
}

/// Homoclinic branch `γ^j_E` to the closed orbit `λ_E`, sampled at quadrature nodes on
/// `[-T, T]`. At phase `s` the past footpoint is `λ(s)` and the future one `λ(s + a/J)`.
#[derive(Debug, Clone)]
pub struct HomoclinicData {
    pub testbed: Testbed,
    pub branch: Branch,
    pub energy: f64,
    pub action: f64,
    pub span: f64,
    pub samples: Vec<HomSample>,
    pub footpoint_minus: CotangentState<f64>,
    pub footpoint_plus: CotangentState<f64>,
    pub phase_shift: f64,
    /// Phase shift from the half span, for the convergence check.
    pub phase_shift_half: f64,
    pub decay_rate: f64,
    /// `C` in `dist(σ) ≤ C e^{−rate|σ|}`.
    pub tail_constant: f64,
    reduced: Arc<ReducedSeparatrix>,
}

/// Homoclinic branch at energy `E`.
pub fn find_homoclinics(
    model: &SystemModel<f64>,
    e: f64,
    branch: Branch,
) -> Result<HomoclinicData, InvariantError> {
    find_homoclinics_with(model, e, branch, &HomoclinicOptions::for_model(model))
}

pub fn find_homoclinics_with(
    model: &SystemModel<f64>,
    e: f64,
    branch: Branch,
    opts: &HomoclinicOptions,
) -> Result<HomoclinicData, InvariantError> {
    if !(e > 0.0) || !e.is_finite() {
        return Err(InvariantError::NoHomoclinic(format!(
            "energy {e} is below the separatrix regime"
        )));
    }
    let red = Arc::new(reduce(Testbed::of(model), opts)?);
    Ok(assemble(red, e, branch))
}

fn assemble(red: Arc<ReducedSeparatrix>, e: f64, branch: Branch) -> HomoclinicData {
    let tb = red.testbed;
    let j = (2.0 * e).sqrt();
    let k = tb.time_scale(j);
    let a = 2.0 * red.v_inf;
    let chi = branch.sign();
    let c0 = tb.orbit_coordinate();
    let homog = tb.is_homogeneous();
    let n = red.sigma.len();
    let mut samples = Vec::with_capacity(2 * n);
    let half = red.half_span / 2.0;
    let mut push = |i: usize, future: bool| {
        let sh = red.sigma[i];
        let w = red.w[i];
        let (sig, x0, v_ex) = if future {
            (sh / k, c0 + chi * (1.0 - w), red.v_excess[i])
        } else {
            (-sh / k, c0 + chi * w, -red.v_excess[i])
        };
        let p0 = chi * red.p[i] * if homog { j } else { 1.0 };
        let x1 = j * sig + v_ex + 0.5 * a;
        samples.push(HomSample {
            sigma: sig,
            weight: red.weight[i] / k,
            x: [wrap_unit(x0), x1],
            y: [p0, j],
            dist: w,
            lambda_angle: j * sig + if future { a } else { 0.0 },
            inner: sh <= half,
        });
    };
    for i in (0..n).rev() {
        push(i, false);
    }
    for i in 0..n {
        push(i, true);
    }
    let decay = red.decay_fit * k;
    let tail_constant = samples
        .iter()
        .filter(|s| s.sigma.abs() * decay >= 1.0)
        .map(|s| s.dist * (decay * s.sigma.abs()).exp())
        .fold(0.0, f64::max);
    HomoclinicData {
        testbed: tb,
        branch,
        energy: e,
        action: j,
        span: red.half_span / k,
        samples,
        footpoint_minus: CotangentState::new([c0, 0.0], [0.0, j]),
        footpoint_plus: CotangentState::new([c0, wrap_unit(a)], [0.0, j]),
        phase_shift: a,
        phase_shift_half: 2.0 * red.v_inf_half,
        decay_rate: decay,
        tail_constant,
        reduced: red,
    }
}

impl HomoclinicData {
    /// Same branch at another energy, mapped exactly from the unit-action separatrix.
    pub fn at_energy(&self, e: f64) -> Result<HomoclinicData, InvariantError> {
        if !(e > 0.0) {
            return Err(InvariantError::NoHomoclinic(format!(
                "energy {e} is below the separatrix regime"
            )));
        }
        Ok(assemble(self.reduced.clone(), e, self.branch))
    }

    /// The other branch at the same energy.
    pub fn mirror(&self) -> HomoclinicData {
        assemble(self.reduced.clone(), self.energy, self.branch.other())
    }

    /// Period `1/J` of the closed orbit.
    pub fn orbit_period(&self) -> f64 {
        1.0 / self.action
    }

    /// Point of `γ` at time `σ` for time phase `s`, by interpolation-free evaluation of
    /// the reduced equation. Used by the validation integrations.
    pub fn point_at(&self, sigma: f64, s: f64) -> Result<CotangentState<f64>, InvariantError> {
        let tb = self.testbed;
        let k = tb.time_scale(self.action);
        let sh = (sigma * k).abs();
        let [w, vex] = solve_reduced(&tb, &[sh])?[0];
        let chi = self.branch.sign();
        let c0 = tb.orbit_coordinate();
        let future = sigma > 0.0;
        let x0 = if future { c0 + chi * (1.0 - w) } else { c0 + chi * w };
        let vex = if future { vex } else { -vex };
        let pmag = -reduced_rhs(&tb, w).0 * if tb.is_homogeneous() { self.action } else { 1.0 };
        Ok(CotangentState::new(
            [x0, self.action * (sigma + s) + vex + 0.5 * self.phase_shift],
            [chi * pmag, self.action],
        ))
    }

    /// Verified phase shift: the full- and half-span estimates must agree.
    pub fn phase_shift_checked(&self, tol: f64) -> Result<f64, InvariantError> {
        let d = (self.phase_shift - self.phase_shift_half).abs();
        if d > tol {
            return Err(InvariantError::NotConverged(format!(
                "phase shift truncations differ by {d:e}"
            )));
        }
        Ok(self.phase_shift)
    }

    /// `dist(γ(σ), λ) ≤ C·e^{−rate|σ|}` at every node outside the core `|σ| < 1/rate`.
    pub fn tail_bound_holds(&self) -> bool {
        self.samples.iter().all(|s| {
            s.sigma.abs() * self.decay_rate < 1.0
                || s.dist <= self.tail_constant * (-self.decay_rate * s.sigma.abs()).exp() * (1.0 + 1e-9)
        })
    }

    /// CSV with columns `sigma, r, p_r, phi, p_phi` in 2π-periodic units.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["sigma", "r", "p_r", "phi", "p_phi"])?;
        for s in &self.samples {
            let z = CotangentState::new([s.x[0], wrap_unit(s.x[1])], s.y).to_polar();
            wr.write_record(
                [s.sigma, z[0], z[2], z[1], z[3]]
                    .iter()
                    .map(|v| format!("{v:.17e}")),
            )?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Phase shift `a` of the unperturbed scattering map, checked against the half span.
pub fn phase_shift(hom: &HomoclinicData) -> Result<f64, InvariantError> {
    hom.phase_shift_checked(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_orbit_is_inner_equator() {
        let m = SystemModel::<f64>::torus_default();
        let po = find_periodic_orbit(&m, 0.5).unwrap();
        assert!((po.initial_point.x[0] - 0.5).abs() < 1e-12);
        assert!(po.initial_point.y[0].abs() < 1e-12);
        assert!((po.initial_point.y[1] - 1.0).abs() < 1e-12);
        assert!((po.period - 1.0).abs() < 1e-11);
        let (mu, mi) = po.floquet_multipliers;
        assert!((mu - (2.0 * PI).exp()).abs() / mu < 1e-8, "{mu}");
        assert!((mu * mi - 1.0).abs() < 1e-8);
    }

    #[test]
    fn outer_equator_is_elliptic() {
        let m = SystemModel::<f64>::torus_default();
        let r = find_periodic_orbit_near(&m, 0.5, 0.0);
        assert!(matches!(r, Err(InvariantError::NotHyperbolic { .. })), "{r:?}");
    }

    #[test]
    fn homoclinic_has_constant_energy() {
        let m = SystemModel::<f64>::torus_default();
        let h = find_homoclinics(&m, 1.0, Branch::One).unwrap();
        for s in &h.samples {
            let e = m.metric.h0(&s.x, &s.y);
            assert!((e - 1.0).abs() < 1e-11, "{e}");
        }
        assert!(h.phase_shift < 0.0);
        assert!(h.tail_bound_holds());
    }
}
