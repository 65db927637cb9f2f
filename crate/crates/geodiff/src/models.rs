//! Phase spaces, the built-in Hamiltonian testbeds, coupling potentials and the
//! physical/scaled coordinate change.
//!
//! All angles use period-1 coordinates. The torus of revolution with profile
//! `f(r) = 1 + b(1 + cos r)` is stored as the surface shrunk by `1/2π`, so the
//! inner equator `u = 1/2` is a closed geodesic of length one and the unit-speed
//! geodesic on it has period one. Momenta are carried over unchanged, which keeps
//! `H₀ = ½(p_r² + p_φ²/f(r)²)` numerically identical in both descriptions.

use thiserror::Error;

use crate::extflow::ExternalFlowModel;
use crate::scalar::{wrap_centered, wrap_unit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state outside the chart domain: {0}")]
    Domain(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Point `(x, y)` of the cotangent bundle of the two-dimensional configuration space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotangentState<S> {
    pub x: [S; 2],
    pub y: [S; 2],
}

impl<S: Scalar> CotangentState<S> {
    pub fn new(x: [S; 2], y: [S; 2]) -> Self {
        Self { x, y }
    }

    /// Torus state from the 2π-periodic polar description `(r, φ, p_r, p_φ)`.
    pub fn from_polar(r: S, phi: S, p_r: S, p_phi: S) -> Self {
        let tau = S::two_pi();
        Self {
            x: [r / tau, phi / tau],
            y: [p_r, p_phi],
        }
    }

    /// Inverse of [`CotangentState::from_polar`].
    pub fn to_polar(&self) -> [S; 4] {
        let tau = S::two_pi();
        [self.x[0] * tau, self.x[1] * tau, self.y[0], self.y[1]]
    }

    /// Reduces both periodic coordinates to `[0, 1)`.
    pub fn normalized(&self) -> Self {
        Self {
            x: [wrap_unit(self.x[0]), wrap_unit(self.x[1])],
            y: self.y,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }

    pub fn to_vec(&self) -> Vec<S> {
        vec![self.x[0], self.x[1], self.y[0], self.y[1]]
    }

    pub fn from_slice(v: &[S]) -> Self {
        Self {
            x: [v[0], v[1]],
            y: [v[2], v[3]],
        }
    }
}

/// Point of `T*M × N` together with the physical time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState<S> {
    pub base: CotangentState<S>,
    pub theta: Vec<S>,
    pub time: S,
}

impl<S: Scalar> ExtendedState<S> {
    pub fn new(base: CotangentState<S>, theta: Vec<S>, time: S) -> Self {
        Self { base, theta, time }
    }

    pub fn normalized(&self) -> Self {
        Self {
            base: self.base.normalized(),
            theta: self.theta.iter().map(|&t| wrap_unit(t)).collect(),
            time: self.time,
        }
    }
}

/// Slow-fast coordinates `q = x`, `p = ε y`, `s = t / ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledState<S> {
    pub q: [S; 2],
    pub p: [S; 2],
    pub theta: Vec<S>,
    pub s: S,
    pub epsilon: S,
}

impl<S: Scalar> ScaledState<S> {
    pub fn base(&self) -> CotangentState<S> {
        CotangentState::new(self.q, self.p)
    }
}

/// Profile `f(r) = 1 + b(1 + cos r)` of a torus of revolution; `b = 1` gives `2 + cos r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusProfile<S> {
    bulge: S,
}

impl<S: Scalar> TorusProfile<S> {
    pub fn new(bulge: S) -> Result<Self, ModelError> {
        if !(bulge > S::zero()) || !bulge.is_finite() {
            return Err(ModelError::InvalidParameter(format!(
                "torus bulge must be positive, got {bulge}"
            )));
        }
        Ok(Self { bulge })
    }

    pub fn bulge(&self) -> S {
        self.bulge
    }

    /// Radius of the parallel at period-1 meridian coordinate `u`.
    #[inline]
    pub fn radius(&self, u: S) -> S {
        S::one() + self.bulge * (S::one() + (S::two_pi() * u).cos())
    }

    #[inline]
    pub fn radius_du(&self, u: S) -> S {
        -self.bulge * S::two_pi() * (S::two_pi() * u).sin()
    }
}

/// Metric part `H₀` of the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric<S> {
    /// Geodesic flow on a torus of revolution, coordinates `(u, v)` = (meridian, parallel).
    Torus(TorusProfile<S>),
    /// Pendulum `½p² + (cos 2πx − 1)/4π²` times a free rotator `½I²`; not a metric and not
    /// homogeneous in the momenta.
    PendulumRotator,
}

impl<S: Scalar> Metric<S> {
    pub fn torus_default() -> Self {
        Metric::Torus(TorusProfile { bulge: S::one() })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Torus(_) => "torus",
            Metric::PendulumRotator => "pendulum-rotator",
        }
    }

    /// Degree-2 homogeneity in the momenta, required by the scaling laws.
    pub fn is_homogeneous(&self) -> bool {
        matches!(self, Metric::Torus(_))
    }

    #[inline]
    pub fn h0(&self, x: &[S; 2], y: &[S; 2]) -> S {
        let half = S::lit(0.5);
        match self {
            Metric::Torus(p) => {
                let f = p.radius(x[0]);
                half * (y[0] * y[0] + y[1] * y[1] / (f * f))
            }
            Metric::PendulumRotator => {
                let tau = S::two_pi();
                half * (y[0] * y[0] + y[1] * y[1]) + ((tau * x[0]).cos() - S::one()) / (tau * tau)
            }
        }
    }

    #[inline]
    pub fn dh0_dx(&self, x: &[S; 2], y: &[S; 2]) -> [S; 2] {
        match self {
            Metric::Torus(p) => {
                let f = p.radius(x[0]);
                [-y[1] * y[1] * p.radius_du(x[0]) / (f * f * f), S::zero()]
            }
            Metric::PendulumRotator => {
                let tau = S::two_pi();
                [-(tau * x[0]).sin() / tau, S::zero()]
            }
        }
    }

    #[inline]
    pub fn dh0_dy(&self, x: &[S; 2], y: &[S; 2]) -> [S; 2] {
        match self {
            Metric::Torus(p) => {
                let f = p.radius(x[0]);
                [y[0], y[1] / (f * f)]
            }
            Metric::PendulumRotator => [y[0], y[1]],
        }
    }
}

/// One periodic factor `cos(2πkx)`, `sin(2πkx)` or `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Harmonic {
    One,
    Cos(i32),
    Sin(i32),
}

impl Harmonic {
    #[inline]
    fn eval<S: Scalar>(self, x: S) -> (S, S) {
        let tau = S::two_pi();
        match self {
            Harmonic::One => (S::one(), S::zero()),
            Harmonic::Cos(k) => {
                let w = tau * S::lit(k as f64);
                let (s, c) = (w * x).sin_cos();
                (c, -w * s)
            }
            Harmonic::Sin(k) => {
                let w = tau * S::lit(k as f64);
                let (s, c) = (w * x).sin_cos();
                (s, w * c)
            }
        }
    }
}

/// `amp · h₀(x₀) · h₁(x₁)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monomial<S> {
    pub amp: S,
    pub factors: [Harmonic; 2],
}

/// Smooth bump supported in an ellipse of the flat period-1 chart, equal to one on the
/// concentric ellipse of half the size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticBump<S> {
    pub center: [S; 2],
    /// Unit vector of the long axis.
    pub tangent: [S; 2],
    pub r_long: S,
    pub r_short: S,
}

fn flat_step<S: Scalar>(t: S) -> (S, S) {
    // C^∞ step from 0 (t ≤ 0) to 1 (t ≥ 1) and its derivative.
    if t <= S::zero() {
        return (S::zero(), S::zero());
    }
    if t >= S::one() {
        return (S::one(), S::zero());
    }
    let g = |t: S| (-S::one() / t).exp();
    let dg = |t: S| g(t) / (t * t);
    let (a, b) = (g(t), g(S::one() - t));
    let den = a + b;
    let d = (dg(t) * b + a * dg(S::one() - t)) / (den * den);
    (a / den, d)
}

impl<S: Scalar> EllipticBump<S> {
    /// Normalized elliptic radius and its gradient.
    fn radius(&self, x: &[S; 2]) -> (S, [S; 2]) {
        let d = [
            wrap_centered(x[0] - self.center[0]),
            wrap_centered(x[1] - self.center[1]),
        ];
        let t = self.tangent;
        let n = [-t[1], t[0]];
        let a = (d[0] * t[0] + d[1] * t[1]) / self.r_long;
        let b = (d[0] * n[0] + d[1] * n[1]) / self.r_short;
        let rho = (a * a + b * b).sqrt();
        if rho == S::zero() {
            return (rho, [S::zero(), S::zero()]);
        }
        let ga = [t[0] / self.r_long, t[1] / self.r_long];
        let gb = [n[0] / self.r_short, n[1] / self.r_short];
        (
            rho,
            [
                (a * ga[0] + b * gb[0]) / rho,
                (a * ga[1] + b * gb[1]) / rho,
            ],
        )
    }

    pub fn value_grad(&self, x: &[S; 2]) -> (S, [S; 2]) {
        let (rho, g) = self.radius(x);
        let two = S::lit(2.0);
        let (v, dv) = flat_step(two * (S::one() - rho));
        let f = -two * dv;
        (v, [f * g[0], f * g[1]])
    }

    /// True where the bump is strictly positive.
    pub fn in_support(&self, x: &[S; 2]) -> bool {
        self.radius(x).0 < S::one()
    }
}

/// Configuration-space factor of a separable potential term.
#[derive(Debug, Clone, PartialEq)]
pub enum Spatial<S> {
    Trig(Vec<Monomial<S>>),
    Bump(EllipticBump<S>),
}

impl<S: Scalar> Spatial<S> {
    #[inline]
    pub fn value_grad(&self, x: &[S; 2]) -> (S, [S; 2]) {
        match self {
            Spatial::Trig(ms) => {
                let mut v = S::zero();
                let mut g = [S::zero(), S::zero()];
                for m in ms {
                    let (a, da) = m.factors[0].eval(x[0]);
                    let (b, db) = m.factors[1].eval(x[1]);
                    v = v + m.amp * a * b;
                    g[0] = g[0] + m.amp * da * b;
                    g[1] = g[1] + m.amp * a * db;
                }
                (v, g)
            }
            Spatial::Bump(b) => b.value_grad(x),
        }
    }

    #[inline]
    pub fn value(&self, x: &[S; 2]) -> S {
        self.value_grad(x).0
    }
}

/// `amp · cos(2π k·θ + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMode<S> {
    pub amp: S,
    pub k: Vec<i32>,
    pub phase: S,
}

/// Trigonometric polynomial on the torus `N = T^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight<S> {
    pub constant: S,
    pub modes: Vec<FourierMode<S>>,
}

impl<S: Scalar> Weight<S> {
    pub fn constant(c: S) -> Self {
        Self {
            constant: c,
            modes: Vec::new(),
        }
    }

    /// `sin 2πθ₁ + ½ cos 2πθ₂ + ⅓ sin 2πθ₃` truncated to the dimension.
    pub fn standard(dim: usize) -> Self {
        let mut modes = Vec::new();
        let half_pi = S::FRAC_PI_2();
        let specs: [(f64, bool); 3] = [(1.0, true), (0.5, false), (1.0 / 3.0, true)];
        for (i, &(amp, is_sin)) in specs.iter().enumerate().take(dim) {
            let mut k = vec![0; dim];
            k[i] = 1;
            modes.push(FourierMode {
                amp: S::lit(amp),
                k,
                phase: if is_sin { -half_pi } else { S::zero() },
            });
        }
        Self {
            constant: S::zero(),
            modes,
        }
    }

    #[inline]
    fn arg(&self, m: &FourierMode<S>, theta: &[S]) -> S {
        let mut a = m.phase;
        for (ki, ti) in m.k.iter().zip(theta) {
            a = a + S::two_pi() * S::lit(*ki as f64) * *ti;
        }
        a
    }

    pub fn value(&self, theta: &[S]) -> S {
        self.modes
            .iter()
            .fold(self.constant, |acc, m| acc + m.amp * self.arg(m, theta).cos())
    }

    pub fn gradient(&self, theta: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
        for m in &self.modes {
            let s = m.amp * self.arg(m, theta).sin();
            for (o, ki) in out.iter_mut().zip(&m.k) {
                *o = *o - s * S::two_pi() * S::lit(*ki as f64);
            }
        }
    }

    /// Derivative along a constant vector `nu`.
    pub fn directional(&self, theta: &[S], nu: &[S]) -> S {
        let mut acc = S::zero();
        for m in &self.modes {
            let kn = m
                .k
                .iter()
                .zip(nu)
                .fold(S::zero(), |a, (ki, ni)| a + S::lit(*ki as f64) * *ni);
            acc = acc - m.amp * self.arg(m, theta).sin() * S::two_pi() * kn;
        }
        acc
    }

    pub fn is_constant(&self) -> bool {
        self.modes.iter().all(|m| m.amp == S::zero() || m.k.iter().all(|&k| k == 0))
    }
}

/// `coef · spatial(x) · weight(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTerm<S> {
    pub coef: S,
    pub spatial: Spatial<S>,
    pub weight: Weight<S>,
}

/// Coupling potential `V(x, θ)` as a finite sum of separable terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Potential<S> {
    pub terms: Vec<PotentialTerm<S>>,
}

impl<S: Scalar> Potential<S> {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn single(spatial: Spatial<S>, weight: Weight<S>) -> Self {
        Self {
            terms: vec![PotentialTerm {
                coef: S::one(),
                spatial,
                weight,
            }],
        }
    }

    /// `(cos r + β sin r (sin φ + κ sin 2φ)) · w(θ)` on the torus.
    pub fn torus_default(beta: S, kappa: S, weight: Weight<S>) -> Self {
        use Harmonic::*;
        let ms = vec![
            Monomial {
                amp: S::one(),
                factors: [Cos(1), One],
            },
            Monomial {
                amp: beta,
                factors: [Sin(1), Sin(1)],
            },
            Monomial {
                amp: beta * kappa,
                factors: [Sin(1), Sin(2)],
            },
        ];
        Self::single(Spatial::Trig(ms), weight)
    }

    /// `cos(2π x₀) · w(θ)`: reflection-symmetric in the first coordinate.
    pub fn symmetric(weight: Weight<S>) -> Self {
        Self::single(
            Spatial::Trig(vec![Monomial {
                amp: S::one(),
                factors: [Harmonic::Cos(1), Harmonic::One],
            }]),
            weight,
        )
    }

    pub fn scaled(&self, c: S) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| PotentialTerm {
                    coef: t.coef * c,
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coef == S::zero())
    }

    /// True when no term depends on θ.
    pub fn is_theta_independent(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.coef == S::zero() || t.weight.is_constant())
    }

    pub fn value(&self, x: &[S; 2], theta: &[S]) -> S {
        self.terms.iter().fold(S::zero(), |acc, t| {
            acc + t.coef * t.spatial.value(x) * t.weight.value(theta)
        })
    }

    pub fn grad_x(&self, x: &[S; 2], theta: &[S]) -> [S; 2] {
        let mut g = [S::zero(), S::zero()];
        for t in &self.terms {
            let (_, gs) = t.spatial.value_grad(x);
            let w = t.coef * t.weight.value(theta);
            g[0] = g[0] + w * gs[0];
            g[1] = g[1] + w * gs[1];
        }
        g
    }

    pub fn grad_theta(&self, x: &[S; 2], theta: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
        let mut tmp = vec![S::zero(); theta.len()];
        for t in &self.terms {
            let v = t.coef * t.spatial.value(x);
            t.weight.gradient(theta, &mut tmp);
            for (o, g) in out.iter_mut().zip(&tmp) {
                *o = *o + v * *g;
            }
        }
    }
}

/// The single immutable object every computation reads.
#[derive(Debug, Clone)]
pub struct SystemModel<S> {
    pub metric: Metric<S>,
    pub potential: Potential<S>,
    pub external: ExternalFlowModel<S>,
    /// Base energy `E*`; the scale parameter is `ε = 1/√E*`.
    pub base_energy: S,
}

fn check_finite<S: Scalar>(z: &CotangentState<S>) -> Result<(), ModelError> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Domain(format!("non-finite coordinates {z:?}")))
    }
}

impl<S: Scalar> SystemModel<S> {
    pub fn new(
        metric: Metric<S>,
        potential: Potential<S>,
        external: ExternalFlowModel<S>,
        base_energy: S,
    ) -> Result<Self, ModelError> {
        if !(base_energy > S::zero()) {
            return Err(ModelError::InvalidParameter(format!(
                "base energy must be positive, got {base_energy}"
            )));
        }
        Ok(Self {
            metric,
            potential,
            external,
            base_energy,
        })
    }

    /// Torus `2 + cos r`, the default potential, the golden linear flow on `T²` and `E* = 100`.
    pub fn torus_default() -> Self {
        let ext = ExternalFlowModel::golden();
        Self {
            metric: Metric::torus_default(),
            potential: Potential::torus_default(S::lit(0.3), S::lit(0.5), Weight::standard(2)),
            external: ext,
            base_energy: S::lit(100.0),
        }
    }

    /// Pendulum-rotator with `V = cos(2πx) · w(θ)`.
    pub fn pendulum_default() -> Self {
        Self {
            metric: Metric::PendulumRotator,
            potential: Potential::symmetric(Weight::standard(2)),
            external: ExternalFlowModel::golden(),
            base_energy: S::lit(100.0),
        }
    }

    pub fn with_potential(&self, potential: Potential<S>) -> Self {
        Self {
            potential,
            ..self.clone()
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.external.dim()
    }

    pub fn epsilon(&self) -> S {
        S::one() / self.base_energy.sqrt()
    }

    pub fn eval_h0(&self, z: &CotangentState<S>) -> Result<S, ModelError> {
        check_finite(z)?;
        Ok(self.metric.h0(&z.x, &z.y))
    }

    pub fn eval_h(&self, z: &ExtendedState<S>) -> Result<S, ModelError> {
        check_finite(&z.base)?;
        self.check_theta(&z.theta)?;
        Ok(self.metric.h0(&z.base.x, &z.base.y) + self.potential.value(&z.base.x, &z.theta))
    }

    /// Scaled Hamiltonian `H₀(q, p) + ε² V(q, θ)`.
    pub fn eval_h_eps(&self, z: &ScaledState<S>) -> Result<S, ModelError> {
        check_finite(&z.base())?;
        self.check_theta(&z.theta)?;
        let e2 = z.epsilon * z.epsilon;
        Ok(self.metric.h0(&z.q, &z.p) + e2 * self.potential.value(&z.q, &z.theta))
    }

    fn check_theta(&self, theta: &[S]) -> Result<(), ModelError> {
        if theta.len() != self.theta_dim() || theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Domain(format!(
                "θ must be a finite point of T^{}",
                self.theta_dim()
            )));
        }
        Ok(())
    }

    /// `∇_θ V(x, θ) · X(θ)`.
    pub fn d_x_v(&self, x: &[S; 2], theta: &[S]) -> S {
        let d = theta.len();
        let mut g = vec![S::zero(); d];
        let mut xv = vec![S::zero(); d];
        self.potential.grad_theta(x, theta, &mut g);
        self.external.field(theta, &mut xv);
        g.iter().zip(&xv).fold(S::zero(), |a, (gi, xi)| a + *gi * *xi)
    }

    /// `D_{√(2E)}(x, y) = (x, √(2E) y)`.
    pub fn dilate(&self, z: &CotangentState<S>, energy: S) -> Result<CotangentState<S>, ModelError> {
        if !self.metric.is_homogeneous() {
            return Err(ModelError::Unsupported(format!(
                "dilation needs a homogeneous metric, {} is not",
                self.metric.name()
            )));
        }
        if !(energy > S::zero()) {
            return Err(ModelError::InvalidParameter(format!(
                "dilation energy must be positive, got {energy}"
            )));
        }
        check_finite(z)?;
        let c = (S::lit(2.0) * energy).sqrt();
        Ok(CotangentState::new(z.x, [c * z.y[0], c * z.y[1]]))
    }

    pub fn to_scaled(&self, z: &ExtendedState<S>, eps: S) -> Result<ScaledState<S>, ModelError> {
        if !(eps > S::zero()) || !eps.is_finite() {
            return Err(ModelError::InvalidParameter(format!(
                "ε must be positive, got {eps}"
            )));
        }
        check_finite(&z.base)?;
        Ok(ScaledState {
            q: z.base.x,
            p: [eps * z.base.y[0], eps * z.base.y[1]],
            theta: z.theta.clone(),
            s: z.time / eps,
            epsilon: eps,
        })
    }

    pub fn from_scaled(&self, z: &ScaledState<S>) -> ExtendedState<S> {
        let e = z.epsilon;
        ExtendedState {
            base: CotangentState::new(z.q, [z.p[0] / e, z.p[1] / e]),
            theta: z.theta.clone(),
            time: z.s * e,
        }
    }
}
