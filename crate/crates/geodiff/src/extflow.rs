//! External dynamics `(N, χ)` on tori `T^d`, recurrence diagnostics and flow boxes.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::integrate::{IntegrateError, IntegratorConfig, Solver};
use crate::scalar::{wrap_centered, wrap_unit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtFlowError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("flow box not transverse at the requested size; largest feasible rho is {max_rho}")]
    ShrinkRequired { max_rho: f64 },
    #[error("only {visits} complete visits observed, need at least 3")]
    InsufficientData { visits: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

pub type VectorField<S> = Arc<dyn Fn(&[S], &mut [S]) + Send + Sync>;

#[derive(Clone)]
pub enum FlowKind<S> {
    /// `θ̇ = ν`.
    Linear { nu: Vec<S> },
    /// `θ̇ = ν + c·sin(2πθ₀)·e₁`: a smooth non-constant field whose direction rotates.
    Shear { nu: Vec<S>, coupling: S },
    /// Arbitrary smooth bounded field.
    Custom(VectorField<S>),
}

impl<S: fmt::Debug> fmt::Debug for FlowKind<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::Linear { nu } => f.debug_struct("Linear").field("nu", nu).finish(),
            FlowKind::Shear { nu, coupling } => f
                .debug_struct("Shear")
                .field("nu", nu)
                .field("coupling", coupling)
                .finish(),
            FlowKind::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Flow on `T^d` in period-1 coordinates.
#[derive(Clone, Debug)]
pub struct ExternalFlowModel<S> {
    dim: usize,
    kind: FlowKind<S>,
    cfg: IntegratorConfig<S>,
}

impl<S: Scalar> ExternalFlowModel<S> {
    pub fn linear(nu: Vec<S>) -> Result<Self, ExtFlowError> {
        if nu.is_empty() || nu.iter().all(|v| *v == S::zero()) || nu.iter().any(|v| !v.is_finite()) {
            return Err(ExtFlowError::InvalidParameter(
                "frequency vector must be finite and nonzero".into(),
            ));
        }
        Ok(Self {
            dim: nu.len(),
            kind: FlowKind::Linear { nu },
            cfg: IntegratorConfig::with_tol(S::lit(1e-12)),
        })
    }

    /// `ν = (1, (√5 − 1)/2)`.
    pub fn golden() -> Self {
        let g = (S::lit(5.0).sqrt() - S::one()) / S::lit(2.0);
        Self::linear(vec![S::one(), g]).expect("nonzero")
    }

    pub fn shear(nu: Vec<S>, coupling: S) -> Result<Self, ExtFlowError> {
        if nu.len() < 2 {
            return Err(ExtFlowError::InvalidParameter(
                "shear flow needs at least two dimensions".into(),
            ));
        }
        Ok(Self {
            dim: nu.len(),
            kind: FlowKind::Shear { nu, coupling },
            cfg: IntegratorConfig::with_tol(S::lit(1e-12)),
        })
    }

    pub fn custom(dim: usize, field: VectorField<S>) -> Self {
        Self {
            dim,
            kind: FlowKind::Custom(field),
            cfg: IntegratorConfig::with_tol(S::lit(1e-12)),
        }
    }

    pub fn with_integrator(mut self, cfg: IntegratorConfig<S>) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FlowKind<S> {
        &self.kind
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, FlowKind::Linear { .. })
    }

    /// Frequency vector of a linear flow.
    pub fn frequency(&self) -> Option<&[S]> {
        match &self.kind {
            FlowKind::Linear { nu } => Some(nu),
            _ => None,
        }
    }

    /// `X(θ)`.
    #[inline]
    pub fn field(&self, theta: &[S], out: &mut [S]) {
        match &self.kind {
            FlowKind::Linear { nu } => out.copy_from_slice(nu),
            FlowKind::Shear { nu, coupling } => {
                out.copy_from_slice(nu);
                out[1] = out[1] + *coupling * (S::two_pi() * theta[0]).sin();
            }
            FlowKind::Custom(f) => f(theta, out),
        }
    }

    pub fn field_vec(&self, theta: &[S]) -> Vec<S> {
        let mut v = vec![S::zero(); self.dim];
        self.field(theta, &mut v);
        v
    }

    /// `χ_t(θ)` without reduction modulo 1.
    pub fn advance_lifted(&self, theta: &[S], t: S) -> Result<Vec<S>, ExtFlowError> {
        if theta.len() != self.dim {
            return Err(ExtFlowError::InvalidParameter(format!(
                "expected a point of T^{}, got {} coordinates",
                self.dim,
                theta.len()
            )));
        }
        match &self.kind {
            FlowKind::Linear { nu } => Ok(theta.iter().zip(nu).map(|(a, b)| *a + *b * t).collect()),
            _ => {
                if t == S::zero() {
                    return Ok(theta.to_vec());
                }
                let y = Solver::new(self.cfg).run_to(|_, u, du| self.field(u, du), S::zero(), theta, t)?;
                Ok(y)
            }
        }
    }

    /// `χ_t(θ)` reduced to `[0,1)^d`.
    pub fn advance(&self, theta: &[S], t: S) -> Result<Vec<S>, ExtFlowError> {
        Ok(self.advance_lifted(theta, t)?.into_iter().map(wrap_unit).collect())
    }

    fn speed_bound(&self, theta0: &[S]) -> S {
        match &self.kind {
            FlowKind::Linear { nu } => norm(nu),
            FlowKind::Shear { nu, coupling } => norm(nu) + coupling.abs(),
            FlowKind::Custom(_) => {
                // Coarse grid estimate around the whole torus.
                let mut m = norm(&self.field_vec(theta0));
                let n = 8usize;
                let total = n.pow(self.dim.min(3) as u32);
                for idx in 0..total {
                    let mut th = vec![S::zero(); self.dim];
                    let mut r = idx;
                    for c in th.iter_mut().take(self.dim.min(3)) {
                        *c = S::lit((r % n) as f64 / n as f64);
                        r /= n;
                    }
                    m = m.max(norm(&self.field_vec(&th)));
                }
                m * S::lit(1.5)
            }
        }
    }

    /// Returns of `χ_t(θ₀)` to the ball of the given radius over `[0, horizon]`.
    pub fn recurrence_profile(
        &self,
        theta0: &[S],
        radius: S,
        horizon: S,
        require_nonstationary: bool,
    ) -> Result<RecurrenceProfile<S>, ExtFlowError> {
        if !(radius > S::zero()) || !(horizon > S::zero()) {
            return Err(ExtFlowError::InvalidParameter(
                "radius and horizon must be positive".into(),
            ));
        }
        let x0 = self.field_vec(theta0);
        if require_nonstationary && norm(&x0) == S::zero() {
            return Err(ExtFlowError::Precondition(
                "X(θ₀) = 0: θ₀ is a fixed point of the external flow".into(),
            ));
        }
        let c = theta0.to_vec();
        let g = move |th: &[S]| torus_dist(th, &c) - radius;
        let speed = self.speed_bound(theta0);
        let step = if speed > S::zero() {
            radius / (speed * S::lit(8.0))
        } else {
            horizon
        };
        let (inside0, events) = self.scan(theta0, horizon, step, &g)?;
        let intervals = pair_events(inside0, &events, horizon);
        let complete_returns = intervals.iter().filter(|iv| iv.entry > S::zero()).count();
        let status = if complete_returns == 0 {
            RecurrenceStatus::NotObserved
        } else {
            RecurrenceStatus::Observed
        };
        let max_gap = intervals
            .windows(2)
            .map(|w| w[1].entry - w[0].exit)
            .fold(None, |acc: Option<S>, g| Some(acc.map_or(g, |a| a.max(g))));
        Ok(RecurrenceProfile {
            intervals,
            max_gap,
            horizon,
            status,
        })
    }

    /// Sign changes of `g` along the orbit of `theta0` on `[0, horizon]`, located by bisection.
    fn scan<G>(&self, theta0: &[S], horizon: S, step: S, g: &G) -> Result<(bool, Vec<Event<S>>), ExtFlowError>
    where
        G: Fn(&[S]) -> S + Sync,
    {
        let n = (horizon / step).ceil().to_usize().unwrap_or(1).max(1);
        let h = horizon / S::lit(n as f64);
        let inside0 = g(theta0) < S::zero();
        let events = match &self.kind {
            FlowKind::Linear { nu } => {
                let at = |t: S| -> Vec<S> { theta0.iter().zip(nu).map(|(a, b)| *a + *b * t).collect() };
                let chunks = 64usize.min(n);
                let per = n.div_ceil(chunks);
                let parts: Vec<Vec<Event<S>>> = (0..chunks)
                    .into_par_iter()
                    .map(|c| {
                        let mut ev = Vec::new();
                        let lo = c * per;
                        let hi = ((c + 1) * per).min(n);
                        if lo >= hi {
                            return ev;
                        }
                        let mut t0 = h * S::lit(lo as f64);
                        let mut g0 = g(&at(t0));
                        for k in lo + 1..=hi {
                            let t1 = h * S::lit(k as f64);
                            let g1 = g(&at(t1));
                            if (g0 < S::zero()) != (g1 < S::zero()) {
                                let tc = bisect(|t| g(&at(t)), t0, t1, g0 < S::zero());
                                ev.push(Event {
                                    t: tc,
                                    entering: g1 < S::zero(),
                                });
                            }
                            t0 = t1;
                            g0 = g1;
                        }
                        ev
                    })
                    .collect();
                parts.into_iter().flatten().collect()
            }
            _ => {
                let solver = Solver::new(self.cfg);
                let mut ev = Vec::new();
                let mut th = theta0.to_vec();
                let mut t0 = S::zero();
                let mut g0 = g(&th);
                for k in 1..=n {
                    let t1 = h * S::lit(k as f64);
                    let next = solver.run_to(|_, u, du| self.field(u, du), t0, &th, t1)?;
                    let g1 = g(&next);
                    if (g0 < S::zero()) != (g1 < S::zero()) {
                        let base = th.clone();
                        let f = |t: S| -> S {
                            let y = solver
                                .run_to(|_, u, du| self.field(u, du), t0, &base, t)
                                .unwrap_or_else(|_| base.clone());
                            g(&y)
                        };
                        let tc = bisect(f, t0, t1, g0 < S::zero());
                        ev.push(Event {
                            t: tc,
                            entering: g1 < S::zero(),
                        });
                    }
                    th = next;
                    t0 = t1;
                    g0 = g1;
                }
                ev
            }
        };
        Ok((inside0, events))
    }

    /// Flow box `𝒫 = {χ_t(σ) : σ ∈ Σ, |t| < ρ}` with `Σ` the disk through `θ₀` orthogonal
    /// to `X(θ₀)`; `ρ` is measured in flow time.
    pub fn build_flow_box(&self, theta0: &[S], rho: S, sigma_radius: S) -> Result<FlowBox<S>, ExtFlowError> {
        if !(rho > S::zero()) || !(sigma_radius > S::zero()) {
            return Err(ExtFlowError::InvalidParameter(
                "rho and sigma_radius must be positive".into(),
            ));
        }
        let x0 = self.field_vec(theta0);
        let speed = norm(&x0);
        if speed == S::zero() {
            return Err(ExtFlowError::Precondition(
                "X(θ₀) = 0: no flow box around a fixed point".into(),
            ));
        }
        let normal: Vec<S> = x0.iter().map(|v| *v / speed).collect();
        let disk = orthonormal_complement(&normal);
        let fbox = FlowBox {
            center: theta0.to_vec(),
            normal,
            disk,
            sigma_radius,
            rho,
            speed,
            flow: self.clone(),
        };
        if let FlowKind::Linear { .. } = self.kind {
            let extent = rho * speed + sigma_radius * S::lit((self.dim as f64).sqrt());
            if extent >= S::lit(0.5) {
                return Err(ExtFlowError::ShrinkRequired {
                    max_rho: ((S::lit(0.5) - sigma_radius * S::lit((self.dim as f64).sqrt())) / speed)
                        .max(S::zero())
                        .as_f64()
                        * 0.99,
                });
            }
            return Ok(fbox);
        }
        // Sample X·n along flow lines through a grid on Σ, both time directions.
        let nt = 64usize;
        let mut first_bad: Option<S> = None;
        for sigma in fbox.disk_samples(3) {
            for dir in [S::one(), -S::one()] {
                let mut th = sigma.clone();
                let mut t = S::zero();
                let dt = rho / S::lit(nt as f64);
                for k in 0..=nt {
                    let xv = self.field_vec(&th);
                    let comp = dot(&xv, &fbox.normal);
                    if !(comp > S::lit(1e-3) * speed) {
                        let tb = t;
                        first_bad = Some(first_bad.map_or(tb, |b: S| b.min(tb)));
                        break;
                    }
                    if k < nt {
                        th = Solver::new(self.cfg).run_to(|_, u, du| self.field(u, du), S::zero(), &th, dt * dir)?;
                        t = t + dt;
                    }
                }
            }
        }
        match first_bad {
            None => Ok(fbox),
            Some(tb) => Err(ExtFlowError::ShrinkRequired {
                max_rho: (tb * S::lit(0.9)).as_f64(),
            }),
        }
    }

    /// In-box durations and out-of-box gaps along the orbit of `θ₀`.
    pub fn residence_bounds(&self, theta0: &[S], fbox: &FlowBox<S>, horizon: S) -> Result<ResidenceBounds<S>, ExtFlowError> {
        let g = |th: &[S]| fbox.box_function(th);
        let step = S::lit(0.25) * (fbox.rho.min(fbox.sigma_radius / self.speed_bound(theta0)));
        let (inside0, events) = self.scan(theta0, horizon, step, &g)?;
        let intervals = pair_events(inside0, &events, horizon);
        let complete: Vec<&ReturnInterval<S>> = intervals
            .iter()
            .filter(|iv| iv.entry > S::zero() && iv.exit < horizon)
            .collect();
        if complete.len() < 3 {
            return Err(ExtFlowError::InsufficientData {
                visits: complete.len(),
            });
        }
        let durations: Vec<S> = complete.iter().map(|iv| iv.exit - iv.entry).collect();
        let gaps: Vec<S> = intervals.windows(2).map(|w| w[1].entry - w[0].exit).collect();
        let (tau0, tau0p) = min_max(&durations);
        let (tau1, tau1p) = min_max(&gaps);
        Ok(ResidenceBounds {
            tau0,
            tau0p,
            tau1,
            tau1p,
            visits: complete.len(),
        })
    }
}

fn min_max<S: Scalar>(v: &[S]) -> (S, S) {
    v.iter().fold((S::infinity(), S::neg_infinity()), |(a, b), x| (a.min(*x), b.max(*x)))
}

#[derive(Debug, Clone, Copy)]
struct Event<S> {
    t: S,
    entering: bool,
}

fn pair_events<S: Scalar>(inside0: bool, events: &[Event<S>], horizon: S) -> Vec<ReturnInterval<S>> {
    let mut out = Vec::new();
    let mut open = if inside0 { Some(S::zero()) } else { None };
    for e in events {
        match (open, e.entering) {
            (None, true) => open = Some(e.t),
            (Some(t_in), false) => {
                out.push(ReturnInterval {
                    entry: t_in,
                    exit: e.t,
                });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(t_in) = open {
        out.push(ReturnInterval {
            entry: t_in,
            exit: horizon,
        });
    }
    out
}

fn bisect<S: Scalar, F: Fn(S) -> S>(f: F, mut a: S, mut b: S, neg_at_a: bool) -> S {
    for _ in 0..60 {
        let m = (a + b) * S::lit(0.5);
        if (f(m) < S::zero()) == neg_at_a {
            a = m;
        } else {
            b = m;
        }
        if b - a <= S::epsilon() * S::lit(4.0) * b.abs().max(S::one()) {
            break;
        }
    }
    (a + b) * S::lit(0.5)
}

pub(crate) fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, x| a + *x * *x).sqrt()
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Euclidean distance on the flat period-1 torus.
pub fn torus_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |acc, (x, y)| {
            let d = wrap_centered(*x - *y);
            acc + d * d
        })
        .sqrt()
}

fn orthonormal_complement<S: Scalar>(n: &[S]) -> Vec<Vec<S>> {
    let d = n.len();
    let mut basis: Vec<Vec<S>> = Vec::new();
    for i in 0..d {
        let mut v = vec![S::zero(); d];
        v[i] = S::one();
        let c = dot(&v, n);
        for (vk, nk) in v.iter_mut().zip(n) {
            *vk = *vk - c * *nk;
        }
        for b in &basis {
            let c = dot(&v, b);
            for (vk, bk) in v.iter_mut().zip(b) {
                *vk = *vk - c * *bk;
            }
        }
        let l = norm(&v);
        if l > S::lit(1e-6) {
            basis.push(v.into_iter().map(|x| x / l).collect());
        }
        if basis.len() == d - 1 {
            break;
        }
    }
    basis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrenceStatus {
    Observed,
    NotObserved,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ReturnInterval<S> {
    pub entry: S,
    pub exit: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceProfile<S> {
    pub intervals: Vec<ReturnInterval<S>>,
    /// Largest gap between consecutive visits; the empirical uniform-recurrence time.
    pub max_gap: Option<S>,
    pub horizon: S,
    pub status: RecurrenceStatus,
}

impl<S: Scalar> RecurrenceProfile<S> {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t_entry", "t_exit"])?;
        for iv in &self.intervals {
            wr.write_record([format!("{:.17e}", iv.entry.as_f64()), format!("{:.17e}", iv.exit.as_f64())])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Flow box `𝒫` around `θ₀`.
#[derive(Debug, Clone)]
pub struct FlowBox<S> {
    pub center: Vec<S>,
    /// `X(θ₀)/|X(θ₀)|`.
    pub normal: Vec<S>,
    /// Orthonormal basis of `Σ`.
    pub disk: Vec<Vec<S>>,
    pub sigma_radius: S,
    /// Half-thickness in flow time.
    pub rho: S,
    pub speed: S,
    flow: ExternalFlowModel<S>,
}

impl<S: Scalar> FlowBox<S> {
    /// Flow-box coordinates `(t, σ-coordinates)` of θ, if the local transit time lies in
    /// `[-2ρ, 2ρ]`.
    pub fn locate(&self, theta: &[S]) -> Option<(S, Vec<S>)> {
        let delta: Vec<S> = theta
            .iter()
            .zip(&self.center)
            .map(|(a, b)| wrap_centered(*a - *b))
            .collect();
        let t = match &self.flow.kind {
            FlowKind::Linear { nu } => dot(&delta, &self.normal) / dot(nu, &self.normal),
            _ => {
                // Solve (χ_{-t}(θ) − θ₀)·n = 0 for t by bisection on [−2ρ, 2ρ].
                let lifted: Vec<S> = self.center.iter().zip(&delta).map(|(c, d)| *c + *d).collect();
                let h = |t: S| -> S {
                    let y = self.flow.advance_lifted(&lifted, -t).unwrap_or_else(|_| lifted.clone());
                    let d: Vec<S> = y.iter().zip(&self.center).map(|(a, b)| *a - *b).collect();
                    dot(&d, &self.normal)
                };
                let two = S::lit(2.0);
                let (lo, hi) = (-two * self.rho, two * self.rho);
                let (hl, hh) = (h(lo), h(hi));
                if hl.signum() == hh.signum() {
                    return None;
                }
                bisect(h, lo, hi, hl < S::zero())
            }
        };
        let base = match &self.flow.kind {
            FlowKind::Linear { nu } => delta.iter().zip(nu).map(|(d, v)| *d - *v * t).collect::<Vec<S>>(),
            _ => {
                let lifted: Vec<S> = self.center.iter().zip(&delta).map(|(c, d)| *c + *d).collect();
                let y = self.flow.advance_lifted(&lifted, -t).ok()?;
                y.iter().zip(&self.center).map(|(a, b)| *a - *b).collect()
            }
        };
        Some((t, self.disk.iter().map(|e| dot(&base, e)).collect()))
    }

    /// Negative inside the box, positive outside; continuous near the box.
    pub fn box_function(&self, theta: &[S]) -> S {
        match self.locate(theta) {
            None => S::one(),
            Some((t, c)) => {
                let mut m = t.abs() / self.rho;
                for ci in c {
                    m = m.max(ci.abs() / self.sigma_radius);
                }
                m - S::one()
            }
        }
    }

    pub fn contains(&self, theta: &[S]) -> bool {
        self.box_function(theta) < S::zero()
    }

    /// Grid of `k^{d-1}` points of `Σ` (including its corners).
    pub fn disk_samples(&self, k: usize) -> Vec<Vec<S>> {
        let m = self.disk.len();
        let k = k.max(2);
        let total = k.pow(m as u32);
        (0..total)
            .map(|idx| {
                let mut p = self.center.clone();
                let mut r = idx;
                for e in &self.disk {
                    let c = S::lit(-1.0 + 2.0 * (r % k) as f64 / (k - 1) as f64) * self.sigma_radius;
                    r /= k;
                    for (pi, ei) in p.iter_mut().zip(e) {
                        *pi = *pi + c * *ei;
                    }
                }
                p
            })
            .collect()
    }

    /// Points `χ_t(σ)` on a `k^{d-1} × kt` grid of `Σ × [−ρ, ρ]` scaled by `shrink`.
    pub fn samples(&self, k: usize, kt: usize, shrink: S) -> Vec<Vec<S>> {
        let mut out = Vec::new();
        for sigma in self.disk_samples(k) {
            let s: Vec<S> = sigma
                .iter()
                .zip(&self.center)
                .map(|(a, c)| *c + (*a - *c) * shrink)
                .collect();
            for j in 0..kt.max(2) {
                let t = self.rho * shrink * S::lit(-1.0 + 2.0 * j as f64 / (kt.max(2) - 1) as f64);
                if let Ok(p) = self.flow.advance(&s, t) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// The same box with `ρ` and the disk radius multiplied by `f`.
    pub fn shrunk(&self, f: S) -> Self {
        Self {
            rho: self.rho * f,
            sigma_radius: self.sigma_radius * f,
            ..self.clone()
        }
    }
}

/// Empirical residence statistics `τ₀ ≤ τ₀′` (visits) and `τ₁ ≤ τ₁′` (gaps), in flow time.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ResidenceBounds<S> {
    pub tau0: S,
    pub tau0p: S,
    pub tau1: S,
    pub tau1p: S,
    pub visits: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_advance_is_closed_form() {
        let f = ExternalFlowModel::linear(vec![1.0, 2f64.sqrt()]).unwrap();
        let th = f.advance(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(th[0], 0.0);
        assert_eq!(th[1], 2f64.sqrt() - 1.0);
        assert_eq!(f.advance(&[0.3, 0.7], 0.0).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn zero_frequency_rejected() {
        assert!(ExternalFlowModel::<f64>::linear(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn locate_inverts_the_box_parametrization() {
        let f = ExternalFlowModel::<f64>::golden();
        let b = f.build_flow_box(&[0.2, 0.3], 0.1, 0.05).unwrap();
        let sigma: Vec<f64> = vec![0.2 + 0.03 * b.disk[0][0], 0.3 + 0.03 * b.disk[0][1]];
        let p = f.advance(&sigma, -0.07).unwrap();
        let (t, c) = b.locate(&p).unwrap();
        assert!((t + 0.07).abs() < 1e-12);
        assert!((c[0] - 0.03).abs() < 1e-12);
        assert!(b.contains(&p));
    }
}
