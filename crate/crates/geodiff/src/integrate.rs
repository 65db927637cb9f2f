//! Flow maps of the unperturbed, coupled and scaled systems.
//!
//! The numerical core is a Dormand–Prince 5(4) pair with step-size control and
//! cubic Hermite dense output, plus two fixed-step implicit Gauss collocation
//! methods (midpoint, order 2; two-stage Gauss–Legendre, order 4) that are
//! symplectic on Hamiltonian vector fields.

use std::io::Write;

use thiserror::Error;

use crate::models::{CotangentState, ExtendedState, ModelError, ScaledState, SystemModel};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t} (h = {h}); the problem looks stiff")]
    Stiffness { t: f64, h: f64 },
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
    #[error("implicit stage iteration failed to converge at t = {0}")]
    ImplicitDivergence(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Dormand–Prince 5(4).
    AdaptiveRk45,
    /// Implicit midpoint rule, order 2.
    SymplecticMidpoint,
    /// Two-stage Gauss–Legendre collocation, order 4.
    SymplecticGauss4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig<S> {
    pub method: Method,
    pub abs_tol: S,
    pub rel_tol: S,
    pub max_step: S,
    /// Step of the fixed-step methods.
    pub fixed_step: S,
    pub max_steps: usize,
}

impl<S: Scalar> Default for IntegratorConfig<S> {
    fn default() -> Self {
        Self {
            method: Method::AdaptiveRk45,
            abs_tol: S::lit(1e-10),
            rel_tol: S::lit(1e-10),
            max_step: S::infinity(),
            fixed_step: S::lit(1e-3),
            max_steps: 50_000_000,
        }
    }
}

impl<S: Scalar> IntegratorConfig<S> {
    pub fn with_tol(tol: S) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: tol,
            ..Self::default()
        }
    }

    pub fn symplectic(method: Method, step: S) -> Self {
        Self {
            method,
            fixed_step: step,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), IntegrateError> {
        let pos = |v: S| v > S::zero();
        if !(pos(self.abs_tol) && pos(self.rel_tol) && pos(self.max_step) && pos(self.fixed_step)) {
            return Err(IntegrateError::Config(
                "tolerances and step sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Counters of one integration run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Largest accepted scaled local error estimate (0 for fixed-step methods).
    pub max_error: f64,
}

/// One accepted step, enough for cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct StepRecord<S> {
    pub t0: S,
    pub t1: S,
    pub y0: Vec<S>,
    pub y1: Vec<S>,
    pub f0: Vec<S>,
    pub f1: Vec<S>,
}

impl<S: Scalar> StepRecord<S> {
    /// Cubic Hermite interpolant at `t ∈ [t0, t1]`.
    pub fn eval(&self, t: S) -> Vec<S> {
        let h = self.t1 - self.t0;
        let th = (t - self.t0) / h;
        let one = S::one();
        let two = S::lit(2.0);
        let three = S::lit(3.0);
        let h00 = (one + two * th) * (one - th) * (one - th);
        let h10 = th * (one - th) * (one - th);
        let h01 = th * th * (three - two * th);
        let h11 = th * th * (th - one);
        (0..self.y0.len())
            .map(|i| {
                h00 * self.y0[i] + h10 * h * self.f0[i] + h01 * self.y1[i] + h11 * h * self.f1[i]
            })
            .collect()
    }
}

/// Dense solution assembled from accepted steps.
#[derive(Debug, Clone)]
pub struct DenseSolution<S> {
    pub steps: Vec<StepRecord<S>>,
    pub stats: RunStats,
}

impl<S: Scalar> DenseSolution<S> {
    pub fn eval(&self, t: S) -> Option<Vec<S>> {
        let fwd = self.steps.first().map(|s| s.t1 >= s.t0).unwrap_or(true);
        let idx = self.steps.partition_point(|s| if fwd { s.t1 < t } else { s.t1 > t });
        self.steps.get(idx).map(|s| s.eval(t))
    }

    pub fn final_state(&self) -> Option<&[S]> {
        self.steps.last().map(|s| s.y1.as_slice())
    }
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// ODE solver for `dy/dt = f(t, y)`.
#[derive(Debug, Clone, Copy)]
pub struct Solver<S> {
    pub cfg: IntegratorConfig<S>,
}

impl<S: Scalar> Solver<S> {
    pub fn new(cfg: IntegratorConfig<S>) -> Self {
        Self { cfg }
    }

    /// State at `t1`.
    pub fn run_to<F>(&self, f: F, t0: S, y0: &[S], t1: S) -> Result<Vec<S>, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let mut out = self.run(f, t0, y0, &[t1])?;
        Ok(out.pop().expect("one output"))
    }

    /// States at the monotone list of output times; steps are clipped so that every
    /// output time is hit exactly.
    pub fn run<F>(&self, f: F, t0: S, y0: &[S], t_out: &[S]) -> Result<Vec<Vec<S>>, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let mut out = Vec::with_capacity(t_out.len());
        self.drive(f, t0, y0, t_out, &mut |k, y| {
            debug_assert_eq!(k, out.len());
            out.push(y.to_vec());
        }, None)?;
        Ok(out)
    }

    /// As [`Solver::run`], also returning the step counters.
    pub fn run_with_stats<F>(&self, f: F, t0: S, y0: &[S], t_out: &[S]) -> Result<(Vec<Vec<S>>, RunStats), IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let mut out = Vec::with_capacity(t_out.len());
        let stats = self.drive(f, t0, y0, t_out, &mut |_, y| out.push(y.to_vec()), None)?;
        Ok((out, stats))
    }

    /// Integrates to `t1` recording every accepted step.
    pub fn run_dense<F>(&self, f: F, t0: S, y0: &[S], t1: S) -> Result<DenseSolution<S>, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let mut steps = Vec::new();
        let stats = self.drive(f, t0, y0, &[t1], &mut |_, _| {}, Some(&mut steps))?;
        Ok(DenseSolution { steps, stats })
    }

    fn drive<F>(
        &self,
        f: F,
        t0: S,
        y0: &[S],
        t_out: &[S],
        sink: &mut dyn FnMut(usize, &[S]),
        record: Option<&mut Vec<StepRecord<S>>>,
    ) -> Result<RunStats, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        self.cfg.validate()?;
        match self.cfg.method {
            Method::AdaptiveRk45 => self.dopri(f, t0, y0, t_out, sink, record),
            m => self.gauss(m, f, t0, y0, t_out, sink, record),
        }
    }

    fn err_norm(&self, y0: &[S], y1: &[S], err: &[S]) -> S {
        let mut acc = S::zero();
        for i in 0..y0.len() {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * y0[i].abs().max(y1[i].abs());
            let r = err[i] / sc;
            acc = acc + r * r;
        }
        (acc / S::lit(y0.len().max(1) as f64)).sqrt()
    }

    fn initial_step<F>(&self, f: &mut F, t0: S, y0: &[S], f0: &[S], span: S) -> S
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let n = y0.len();
        let sc: Vec<S> = y0
            .iter()
            .map(|y| self.cfg.abs_tol + self.cfg.rel_tol * y.abs())
            .collect();
        let rms = |v: &[S]| {
            let s = v
                .iter()
                .zip(&sc)
                .fold(S::zero(), |a, (x, s)| a + (*x / *s) * (*x / *s));
            (s / S::lit(n.max(1) as f64)).sqrt()
        };
        let d0 = rms(y0);
        let d1 = rms(f0);
        let small = S::lit(1e-5);
        let mut h0 = if d0 < small || d1 < small {
            S::lit(1e-6)
        } else {
            S::lit(0.01) * d0 / d1
        };
        if !(h0 > S::zero()) || !h0.is_finite() {
            h0 = S::lit(1e-6);
        }
        h0 = h0.min(span.abs()).min(self.cfg.max_step);
        let y1: Vec<S> = (0..n).map(|i| y0[i] + h0 * f0[i]).collect();
        let mut f1 = vec![S::zero(); n];
        f(t0 + h0, &y1, &mut f1);
        let df: Vec<S> = (0..n).map(|i| f1[i] - f0[i]).collect();
        let d2 = rms(&df) / h0;
        let h1 = if d1.max(d2) <= S::lit(1e-15) {
            (h0 * S::lit(1e-3)).max(S::lit(1e-6))
        } else {
            (S::lit(0.01) / d1.max(d2)).powf(S::lit(0.2))
        };
        (S::lit(100.0) * h0).min(h1).min(span.abs()).min(self.cfg.max_step)
    }

    fn dopri<F>(
        &self,
        mut f: F,
        t0: S,
        y0: &[S],
        t_out: &[S],
        sink: &mut dyn FnMut(usize, &[S]),
        mut record: Option<&mut Vec<StepRecord<S>>>,
    ) -> Result<RunStats, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let n = y0.len();
        let mut stats = RunStats::default();
        let mut t = t0;
        let mut y = y0.to_vec();
        let mut k: Vec<Vec<S>> = vec![vec![S::zero(); n]; 7];
        f(t, &y, &mut k[0]);
        let t_end = match t_out.last() {
            Some(&te) => te,
            None => return Ok(stats),
        };
        let dir = if t_end >= t0 { S::one() } else { -S::one() };
        let mut h = S::zero();
        let mut ytmp = vec![S::zero(); n];
        let mut ynew = vec![S::zero(); n];
        let mut err = vec![S::zero(); n];
        let mut steps = 0usize;
        for (idx, &target) in t_out.iter().enumerate() {
            while (target - t) * dir > S::zero() {
                if h == S::zero() {
                    h = self.initial_step(&mut f, t, &y, &k[0], target - t);
                }
                let remaining = (target - t).abs();
                let mut hs = h.min(self.cfg.max_step);
                let clipped = hs >= remaining;
                if clipped {
                    hs = remaining;
                }
                let floor = S::lit(1e-14) * t.abs().max(S::one());
                if hs < floor && !clipped {
                    return Err(IntegrateError::Stiffness {
                        t: t.as_f64(),
                        h: hs.as_f64(),
                    });
                }
                steps += 1;
                if steps > self.cfg.max_steps {
                    return Err(IntegrateError::TooManySteps(self.cfg.max_steps));
                }
                let hd = hs * dir;
                for s in 0..6 {
                    for i in 0..n {
                        let mut acc = S::zero();
                        for j in 0..=s {
                            let a = A[s][j];
                            if a != 0.0 {
                                acc = acc + S::lit(a) * k[j][i];
                            }
                        }
                        ytmp[i] = y[i] + hd * acc;
                    }
                    let (head, tail) = k.split_at_mut(s + 1);
                    let _ = head;
                    f(t + S::lit(C[s]) * hd, &ytmp, &mut tail[0]);
                    if s == 5 {
                        ynew.copy_from_slice(&ytmp);
                    }
                }
                for i in 0..n {
                    let mut acc = S::zero();
                    for (j, e) in E.iter().enumerate() {
                        if *e != 0.0 {
                            acc = acc + S::lit(*e) * k[j][i];
                        }
                    }
                    err[i] = hd * acc;
                }
                let en = self.err_norm(&y, &ynew, &err);
                if !en.is_finite() {
                    stats.rejected += 1;
                    h = hs * S::lit(0.2);
                    continue;
                }
                if en <= S::one() {
                    stats.accepted += 1;
                    stats.max_error = stats.max_error.max(en.as_f64());
                    let t_new = if clipped { target } else { t + hd };
                    if let Some(rec) = record.as_deref_mut() {
                        rec.push(StepRecord {
                            t0: t,
                            t1: t_new,
                            y0: y.clone(),
                            y1: ynew.clone(),
                            f0: k[0].clone(),
                            f1: k[6].clone(),
                        });
                    }
                    t = t_new;
                    y.copy_from_slice(&ynew);
                    k.swap(0, 6);
                    let fac = if en == S::zero() {
                        S::lit(5.0)
                    } else {
                        (S::lit(0.9) * en.powf(S::lit(-0.2))).min(S::lit(5.0)).max(S::lit(0.2))
                    };
                    // A clipped step says nothing about the natural step size.
                    if !clipped || fac < S::one() {
                        h = hs * fac;
                    }
                } else {
                    stats.rejected += 1;
                    let fac = (S::lit(0.9) * en.powf(S::lit(-0.2))).max(S::lit(0.2));
                    h = hs * fac;
                }
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(IntegrateError::NonFinite(t.as_f64()));
            }
            sink(idx, &y);
        }
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn gauss<F>(
        &self,
        method: Method,
        mut f: F,
        t0: S,
        y0: &[S],
        t_out: &[S],
        sink: &mut dyn FnMut(usize, &[S]),
        mut record: Option<&mut Vec<StepRecord<S>>>,
    ) -> Result<RunStats, IntegrateError>
    where
        F: FnMut(S, &[S], &mut [S]),
    {
        let n = y0.len();
        let (a, b, c): (Vec<Vec<S>>, Vec<S>, Vec<S>) = match method {
            Method::SymplecticMidpoint => (vec![vec![S::lit(0.5)]], vec![S::one()], vec![S::lit(0.5)]),
            _ => {
                let r = S::lit(3f64.sqrt() / 6.0);
                let q = S::lit(0.25);
                let h = S::lit(0.5);
                (vec![vec![q, q - r], vec![q + r, q]], vec![h, h], vec![h - r, h + r])
            }
        };
        let st = b.len();
        let mut stats = RunStats::default();
        let mut t = t0;
        let mut y = y0.to_vec();
        let mut kk = vec![vec![S::zero(); n]; st];
        let mut knew = vec![vec![S::zero(); n]; st];
        let mut ys = vec![S::zero(); n];
        let mut f0 = vec![S::zero(); n];
        let mut steps = 0usize;
        for (idx, &target) in t_out.iter().enumerate() {
            let span = target - t;
            let m = (span.abs() / self.cfg.fixed_step).ceil().to_usize().unwrap_or(0);
            if m > 0 {
                let h = span / S::lit(m as f64);
                for _ in 0..m {
                    steps += 1;
                    if steps > self.cfg.max_steps {
                        return Err(IntegrateError::TooManySteps(self.cfg.max_steps));
                    }
                    f(t, &y, &mut f0);
                    for ks in kk.iter_mut() {
                        ks.copy_from_slice(&f0);
                    }
                    let mut converged = false;
                    for _ in 0..100 {
                        let mut delta = S::zero();
                        for s in 0..st {
                            for i in 0..n {
                                let mut acc = S::zero();
                                for j in 0..st {
                                    acc = acc + a[s][j] * kk[j][i];
                                }
                                ys[i] = y[i] + h * acc;
                            }
                            f(t + c[s] * h, &ys, &mut knew[s]);
                            for i in 0..n {
                                let d = (knew[s][i] - kk[s][i]).abs()
                                    / (S::one() + kk[s][i].abs());
                                delta = delta.max(d);
                            }
                        }
                        std::mem::swap(&mut kk, &mut knew);
                        if delta <= S::lit(4.0) * S::epsilon() {
                            converged = true;
                            break;
                        }
                    }
                    if !converged {
                        return Err(IntegrateError::ImplicitDivergence(t.as_f64()));
                    }
                    let y_prev = y.clone();
                    for i in 0..n {
                        let mut acc = S::zero();
                        for s in 0..st {
                            acc = acc + b[s] * kk[s][i];
                        }
                        y[i] = y[i] + h * acc;
                    }
                    let t_new = t + h;
                    if let Some(rec) = record.as_deref_mut() {
                        let mut f1 = vec![S::zero(); n];
                        f(t_new, &y, &mut f1);
                        rec.push(StepRecord {
                            t0: t,
                            t1: t_new,
                            y0: y_prev,
                            y1: y.clone(),
                            f0: f0.clone(),
                            f1,
                        });
                    }
                    t = t_new;
                    stats.accepted += 1;
                }
            }
            t = target;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(IntegrateError::NonFinite(t.as_f64()));
            }
            sink(idx, &y);
        }
        Ok(stats)
    }
}

/// Vector field of the coupled system in the state layout `(x₀, x₁, y₀, y₁, θ…)`.
pub fn extended_rhs<S: Scalar>(model: &SystemModel<S>, z: &[S], dz: &mut [S]) {
    let x = [z[0], z[1]];
    let y = [z[2], z[3]];
    let theta = &z[4..];
    let hy = model.metric.dh0_dy(&x, &y);
    let hx = model.metric.dh0_dx(&x, &y);
    let vx = model.potential.grad_x(&x, theta);
    dz[0] = hy[0];
    dz[1] = hy[1];
    dz[2] = -hx[0] - vx[0];
    dz[3] = -hx[1] - vx[1];
    model.external.field(theta, &mut dz[4..]);
}

/// Vector field of the slow-fast system `dq/ds = ∂H₀/∂p`, `dp/ds = −∂H₀/∂q − ε²∂V/∂q`,
/// `dθ/ds = εX(θ)`.
pub fn scaled_rhs<S: Scalar>(model: &SystemModel<S>, eps: S, z: &[S], dz: &mut [S]) {
    let q = [z[0], z[1]];
    let p = [z[2], z[3]];
    let theta = &z[4..];
    let hp = model.metric.dh0_dy(&q, &p);
    let hq = model.metric.dh0_dx(&q, &p);
    let vq = model.potential.grad_x(&q, theta);
    let e2 = eps * eps;
    dz[0] = hp[0];
    dz[1] = hp[1];
    dz[2] = -hq[0] - e2 * vq[0];
    dz[3] = -hq[1] - e2 * vq[1];
    model.external.field(theta, &mut dz[4..]);
    for d in dz[4..].iter_mut() {
        *d = *d * eps;
    }
}

fn unperturbed_rhs<S: Scalar>(model: &SystemModel<S>, z: &[S], dz: &mut [S]) {
    let x = [z[0], z[1]];
    let y = [z[2], z[3]];
    let hy = model.metric.dh0_dy(&x, &y);
    let hx = model.metric.dh0_dx(&x, &y);
    dz[0] = hy[0];
    dz[1] = hy[1];
    dz[2] = -hx[0];
    dz[3] = -hx[1];
}

fn pack<S: Scalar>(base: &CotangentState<S>, theta: &[S]) -> Vec<S> {
    let mut v = base.to_vec();
    v.extend_from_slice(theta);
    v
}

/// Geodesic (or pendulum-rotator) flow `ξ_t`.
pub fn flow_unperturbed<S: Scalar>(
    model: &SystemModel<S>,
    z: &CotangentState<S>,
    t: S,
    cfg: &IntegratorConfig<S>,
) -> Result<CotangentState<S>, IntegrateError> {
    model.eval_h0(z)?;
    let y = Solver::new(*cfg).run_to(|_, u, du| unperturbed_rhs(model, u, du), S::zero(), &z.to_vec(), t)?;
    Ok(CotangentState::from_slice(&y))
}

/// Flow `ψ_t` of the coupled system together with the external flow.
pub fn flow_extended<S: Scalar>(
    model: &SystemModel<S>,
    z: &ExtendedState<S>,
    t: S,
    cfg: &IntegratorConfig<S>,
) -> Result<ExtendedState<S>, IntegrateError> {
    model.eval_h(z)?;
    let y0 = pack(&z.base, &z.theta);
    let y = Solver::new(*cfg).run_to(|_, u, du| extended_rhs(model, u, du), z.time, &y0, z.time + t)?;
    Ok(ExtendedState::new(
        CotangentState::from_slice(&y),
        y[4..].to_vec(),
        z.time + t,
    ))
}

/// Flow of the slow-fast system over scaled time `s`.
pub fn flow_scaled<S: Scalar>(
    model: &SystemModel<S>,
    z: &ScaledState<S>,
    s: S,
    cfg: &IntegratorConfig<S>,
) -> Result<ScaledState<S>, IntegrateError> {
    model.eval_h_eps(z)?;
    let eps = z.epsilon;
    let y0 = pack(&z.base(), &z.theta);
    let y = Solver::new(*cfg).run_to(|_, u, du| scaled_rhs(model, eps, u, du), z.s, &y0, z.s + s)?;
    Ok(ScaledState {
        q: [y[0], y[1]],
        p: [y[2], y[3]],
        theta: y[4..].to_vec(),
        s: z.s + s,
        epsilon: eps,
    })
}

/// Sampled orbit of the coupled system with its energy record.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub samples: Vec<ExtendedState<S>>,
    pub energy_track: Vec<S>,
    pub stats: RunStats,
}

impl<S: Scalar> Trajectory<S> {
    pub fn times(&self) -> impl Iterator<Item = S> + '_ {
        self.samples.iter().map(|z| z.time)
    }

    /// CSV with columns `t, x0, x1, y0, y1, theta…, H`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.samples.first().map(|z| z.theta.len()).unwrap_or(0);
        let mut header: Vec<String> = ["t", "x0", "x1", "y0", "y1"].iter().map(|s| s.to_string()).collect();
        header.extend((0..d).map(|i| format!("theta{i}")));
        header.push("H".into());
        wr.write_record(&header)?;
        for (z, h) in self.samples.iter().zip(&self.energy_track) {
            let mut row = vec![z.time.as_f64(), z.base.x[0].as_f64(), z.base.x[1].as_f64()];
            row.push(z.base.y[0].as_f64());
            row.push(z.base.y[1].as_f64());
            row.extend(z.theta.iter().map(|t| t.as_f64()));
            row.push(h.as_f64());
            wr.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Samples the coupled flow at the increasing times `times` (relative to `z.time`).
pub fn trajectory_extended<S: Scalar>(
    model: &SystemModel<S>,
    z: &ExtendedState<S>,
    times: &[S],
    cfg: &IntegratorConfig<S>,
) -> Result<Trajectory<S>, IntegrateError> {
    model.eval_h(z)?;
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IntegrateError::Config("sample times must increase strictly".into()));
    }
    let y0 = pack(&z.base, &z.theta);
    let abs: Vec<S> = times.iter().map(|&t| z.time + t).collect();
    let mut samples = Vec::with_capacity(times.len());
    let mut energy = Vec::with_capacity(times.len());
    let (ys, stats) = Solver::new(*cfg).run_with_stats(|_, u, du| extended_rhs(model, u, du), z.time, &y0, &abs)?;
    for (y, &t) in ys.iter().zip(&abs) {
        let st = ExtendedState::new(CotangentState::from_slice(y), y[4..].to_vec(), t);
        energy.push(model.eval_h(&st)?);
        samples.push(st);
    }
    Ok(Trajectory {
        samples,
        energy_track: energy,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth_is_resolved() {
        let s = Solver::new(IntegratorConfig::<f64>::with_tol(1e-12));
        let y = s.run_to(|_, y, dy| dy[0] = y[0], 0.0, &[1.0], 2.0).unwrap();
        assert!((y[0] - 2f64.exp()).abs() < 1e-10);
        let back = s.run_to(|_, y, dy| dy[0] = y[0], 2.0, &y, 0.0).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn outputs_hit_requested_times() {
        let s = Solver::new(IntegratorConfig::<f64>::with_tol(1e-12));
        let ts = [0.3, 1.0, 2.5];
        let ys = s
            .run(|_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            }, 0.0, &[0.0, 1.0], &ts)
            .unwrap();
        for (t, y) in ts.iter().zip(&ys) {
            assert!((y[0] - t.sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn dense_output_interpolates() {
        let s = Solver::new(IntegratorConfig::<f64>::with_tol(1e-10));
        let d = s
            .run_dense(|_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            }, 0.0, &[0.0, 1.0], 5.0)
            .unwrap();
        for k in 0..50 {
            let t = 0.1 * k as f64;
            let y = d.eval(t).unwrap();
            assert!((y[0] - t.sin()).abs() < 1e-5);
        }
    }

    #[test]
    fn gauss_orders() {
        let run = |m, h: f64| {
            Solver::new(IntegratorConfig::symplectic(m, h))
                .run_to(|_, y, dy| {
                    dy[0] = y[1];
                    dy[1] = -y[0];
                }, 0.0, &[0.0, 1.0], 1.0)
                .unwrap()[0]
                - 1f64.sin()
        };
        let r2 = run(Method::SymplecticMidpoint, 0.02) / run(Method::SymplecticMidpoint, 0.01);
        assert!((r2 - 4.0).abs() < 0.1, "{r2}");
        let r4 = run(Method::SymplecticGauss4, 0.1) / run(Method::SymplecticGauss4, 0.05);
        assert!((r4 - 16.0).abs() < 1.0, "{r4}");
    }

    #[test]
    fn stiffness_is_reported() {
        let s = Solver::new(IntegratorConfig::<f64>::with_tol(1e-10));
        let r = s.run_to(|_, y, dy| dy[0] = y[0] * y[0], 0.0, &[1.0], 2.0);
        assert!(matches!(r, Err(IntegrateError::Stiffness { .. }) | Err(IntegrateError::NonFinite(_))));
    }
}
