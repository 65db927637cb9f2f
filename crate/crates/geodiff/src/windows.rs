//! `(n₁, n₂)`-windows with their exit/entry boundary partition, a sampled check of
//! correct alignment, the greedy choice of window sizes and transit times, chains of
//! windows around a pseudo-orbit, and extraction of a point whose orbit visits them all.
//!
//! Chains live in the product chart `(s, u, φ, J, θ)` of the unperturbed cylinder:
//! `s`, `u` are the stable and unstable fiber coordinates, `(J, φ)` the action-angle
//! pair and `θ` the lifted external angles.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::extflow::ExtFlowError;
use crate::integrate::{scaled_rhs, IntegratorConfig, Solver};
use crate::invariant::{find_periodic_orbit, Branch, HomoclinicData, InvariantError, Testbed};
use crate::models::SystemModel;
use crate::scheduler::Schedule;

type Model = SystemModel<f64>;

#[derive(Debug, Error)]
pub enum WindowsError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("window inequalities infeasible at ε = {eps}; admissible for ε < {eps_max}")]
    Infeasible { eps: f64, eps_max: f64 },
    #[error("link {link} failed at the {stage} stage: {check} margin {margin:e} ({verdict:?})")]
    LinkFailed {
        link: usize,
        stage: Stage,
        check: String,
        margin: f64,
        verdict: Verdict,
    },
    #[error("shadow point not isolated at window {window}: margin {margin:e}")]
    ShadowNotIsolated { window: usize, margin: f64 },
    #[error("integration failed: {0}")]
    Integrate(String),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    ExtFlow(#[from] ExtFlowError),
}

/// Chart coordinate indices.
pub const S: usize = 0;
pub const U: usize = 1;
pub const PHI: usize = 2;
pub const J: usize = 3;
pub const THETA: usize = 4;

/// Margins within this band of zero are reported indeterminate.
pub const MARGIN_NOISE: f64 = 1e-9;

/// Padding applied to measured constants and to strict inequalities in the greedy solve.
const PAD: f64 = 1.25;

// ---------------------------------------------------------------------------------------
// Windows

/// Parallelepiped `c + Σ vₖ hₖ aₖ`, `v ∈ [-1, 1]^m`, i.e. the affine image of the unit
/// box with the first `n1` axes as exit directions.
#[derive(Debug, Clone, Serialize)]
pub struct Window {
    pub label: String,
    pub center: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub half_widths: Vec<f64>,
    pub names: Vec<String>,
    pub n1: usize,
    pub n2: usize,
    /// Condition number of the axis matrix.
    pub condition: f64,
    #[serde(skip)]
    inverse: DMatrix<f64>,
}

impl Window {
    pub fn new(
        label: impl Into<String>,
        center: Vec<f64>,
        axes: Vec<Vec<f64>>,
        half_widths: Vec<f64>,
        n1: usize,
    ) -> Result<Self, WindowsError> {
        let label = label.into();
        let m = center.len();
        if m == 0 || axes.len() != m || half_widths.len() != m || n1 > m || axes.iter().any(|a| a.len() != m) {
            return Err(WindowsError::InvalidWindow(format!(
                "{label}: inconsistent dimensions (m = {m}, n1 = {n1})"
            )));
        }
        if center.iter().chain(axes.iter().flatten()).any(|c| !c.is_finite())
            || half_widths.iter().any(|h| !(*h > 0.0 && h.is_finite()))
        {
            return Err(WindowsError::InvalidWindow(format!(
                "{label}: non-finite data or non-positive half-width"
            )));
        }
        let a = DMatrix::from_fn(m, m, |r, c| axes[c][r]);
        let sv = a.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-12 * smax) {
            return Err(WindowsError::InvalidWindow(format!("{label}: axes are linearly dependent")));
        }
        let inverse = a
            .try_inverse()
            .ok_or_else(|| WindowsError::InvalidWindow(format!("{label}: singular axes")))?;
        Ok(Self {
            label,
            names: (0..m).map(|i| format!("x{i}")).collect(),
            center,
            axes,
            half_widths,
            n1,
            n2: m - n1,
            condition: smax / smin,
            inverse,
        })
    }

    /// Coordinate box; the axes are reordered so that exit coordinates come first.
    pub fn boxed(
        label: impl Into<String>,
        center: Vec<f64>,
        half_widths: &[f64],
        exit: &[bool],
        names: &[String],
    ) -> Result<Self, WindowsError> {
        let m = center.len();
        if half_widths.len() != m || exit.len() != m || names.len() != m {
            return Err(WindowsError::InvalidWindow("box data of mismatched lengths".into()));
        }
        let order: Vec<usize> = (0..m).filter(|&i| exit[i]).chain((0..m).filter(|&i| !exit[i])).collect();
        let axes = order
            .iter()
            .map(|&i| (0..m).map(|r| if r == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let hw = order.iter().map(|&i| half_widths[i]).collect();
        let n1 = exit.iter().filter(|e| **e).count();
        let mut w = Self::new(label, center, axes, hw, n1)?;
        w.names = order.iter().map(|&i| names[i].clone()).collect();
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Image of a point of the unit box `[0, 1]^m`.
    pub fn chart(&self, unit: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = unit.iter().map(|t| 2.0 * t - 1.0).collect();
        self.from_local(&v)
    }

    /// Point with local coordinates `v ∈ [-1, 1]^m`.
    pub fn from_local(&self, v: &[f64]) -> Vec<f64> {
        let mut x = self.center.clone();
        for (k, a) in self.axes.iter().enumerate() {
            let c = v[k] * self.half_widths[k];
            for (xi, ai) in x.iter_mut().zip(a) {
                *xi += c * ai;
            }
        }
        x
    }

    pub fn local(&self, x: &[f64]) -> Vec<f64> {
        let m = self.dim();
        (0..m)
            .map(|r| {
                let s: f64 = (0..m).map(|c| self.inverse[(r, c)] * (x[c] - self.center[c])).sum();
                s / self.half_widths[r]
            })
            .collect()
    }

    /// `1 − max|vₖ|`; positive in the interior.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let v = self.local(x);
        let worst = v.iter().fold(0.0_f64, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b.abs()) });
        1.0 - worst
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.margin(x) >= 0.0
    }

    /// On `∂[-1,1]^{n₁} × [-1,1]^{n₂}` up to `tol` in local coordinates.
    pub fn on_exit(&self, x: &[f64], tol: f64) -> bool {
        let v = self.local(x);
        v.iter().all(|c| c.abs() <= 1.0 + tol) && v[..self.n1].iter().any(|c| (c.abs() - 1.0).abs() <= tol)
    }

    /// On `[-1,1]^{n₁} × ∂[-1,1]^{n₂}` up to `tol` in local coordinates.
    pub fn on_entry(&self, x: &[f64], tol: f64) -> bool {
        let v = self.local(x);
        v.iter().all(|c| c.abs() <= 1.0 + tol) && v[self.n1..].iter().any(|c| (c.abs() - 1.0).abs() <= tol)
    }

    fn same_as(&self, other: &Window) -> bool {
        self.n1 == other.n1
            && self.center == other.center
            && self.axes == other.axes
            && self.half_widths == other.half_widths
    }
}

// ---------------------------------------------------------------------------------------
// Alignment

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Aligned,
    NotAligned,
    Indeterminate,
}

impl Verdict {
    fn of_margin(m: f64) -> Self {
        if m > MARGIN_NOISE {
            Verdict::Aligned
        } else if m < -MARGIN_NOISE || m.is_nan() {
            Verdict::NotAligned
        } else {
            Verdict::Indeterminate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// Exit faces of the first window land beyond the matching exit faces of the second.
    ExitStretch,
    /// The image stays strictly between the entry faces of the second window.
    EntryAvoid,
    /// A signed matching of exit axes exists, so the linear model has degree ±1.
    Degree,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorCheck {
    pub kind: CheckKind,
    pub source: Option<String>,
    pub target: Option<String>,
    pub margin: f64,
}

impl FactorCheck {
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            CheckKind::ExitStretch => "exit stretching",
            CheckKind::EntryAvoid => "entry avoidance",
            CheckKind::Degree => "degree",
        };
        match (&self.source, &self.target) {
            (Some(s), Some(t)) => format!("{kind} {s} → {t}"),
            (None, Some(t)) => format!("{kind} on {t}"),
            _ => kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentCertificate {
    pub from: String,
    pub to: String,
    pub map: String,
    pub checks: Vec<FactorCheck>,
    pub degree: i32,
    pub density: usize,
    pub samples: usize,
    pub verdict: Verdict,
}

impl AlignmentCertificate {
    pub fn is_aligned(&self) -> bool {
        self.verdict == Verdict::Aligned
    }

    pub fn worst(&self) -> Option<&FactorCheck> {
        self.checks
            .iter()
            .min_by(|a, b| nan_low(a.margin).total_cmp(&nan_low(b.margin)))
    }

    pub fn min_margin(&self) -> f64 {
        self.worst().map_or(f64::INFINITY, |c| nan_low(c.margin))
    }
}

fn nan_low(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// Matches each exit axis of the source to an exit axis of the target by the largest
/// Jacobian entry of the local map at the center: `(target axis, sign)` per source axis.
fn exit_pairing<G: Fn(&[f64]) -> Vec<f64>>(m: usize, n1: usize, g: &G) -> Option<Vec<(usize, f64)>> {
    let h = 1e-4;
    let mut entries = Vec::with_capacity(n1 * n1);
    for i in 0..n1 {
        let mut vp = vec![0.0; m];
        let mut vm = vec![0.0; m];
        vp[i] = h;
        vm[i] = -h;
        let (yp, ym) = (g(&vp), g(&vm));
        for t in 0..n1 {
            let d = (yp[t] - ym[t]) / (2.0 * h);
            if !d.is_finite() {
                return None;
            }
            entries.push((t, i, d));
        }
    }
    entries.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    let mut pairing: Vec<Option<(usize, f64)>> = vec![None; n1];
    let mut taken = vec![false; n1];
    for (t, i, d) in entries {
        if pairing[i].is_none() && !taken[t] && d != 0.0 {
            pairing[i] = Some((t, d.signum()));
            taken[t] = true;
        }
    }
    pairing.into_iter().collect()
}

fn pairing_degree(p: &[(usize, f64)]) -> i32 {
    let mut sign = p.iter().map(|q| q.1).product::<f64>() as i32;
    let mut seen = vec![false; p.len()];
    for start in 0..p.len() {
        let mut len = 0;
        let mut k = start;
        while !seen[k] {
            seen[k] = true;
            k = p[k].0;
            len += 1;
        }
        if len > 0 && len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

/// Local coordinates `v ∈ [-1,1]^m` of grid point `idx` on face `{v_axis = side}`.
fn face_point(m: usize, axis: usize, side: f64, k: usize, mut idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    for (c, vc) in v.iter_mut().enumerate() {
        if c == axis {
            *vc = side;
        } else {
            *vc = -1.0 + 2.0 * (idx % k) as f64 / (k - 1) as f64;
            idx /= k;
        }
    }
    v
}

/// Sampled sufficient conditions for `w1` to be correctly aligned with `w2` under `f`:
/// every exit face of `w1` is carried strictly beyond the matching exit face of `w2`
/// (same side for a consistent signed matching), and every boundary point of `w1` lands
/// strictly between the entry faces of `w2`. Faces are sampled on a grid with `density`
/// points per axis.
pub fn check_alignment<F>(
    w1: &Window,
    w2: &Window,
    f: F,
    map: &str,
    density: usize,
) -> Result<AlignmentCertificate, WindowsError>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let m = w1.dim();
    if w2.dim() != m {
        return Err(WindowsError::Precondition(format!(
            "windows {} and {} have different dimensions",
            w1.label, w2.label
        )));
    }
    if density < 2 {
        return Err(WindowsError::Precondition("sample density must be at least 2".into()));
    }
    let g = |v: &[f64]| w2.local(&f(&w1.from_local(v)));
    let mut cert = AlignmentCertificate {
        from: w1.label.clone(),
        to: w2.label.clone(),
        map: map.to_string(),
        checks: Vec::new(),
        degree: 0,
        density,
        samples: 0,
        verdict: Verdict::NotAligned,
    };
    let pairing = if w1.n1 == w2.n1 { exit_pairing(m, w1.n1, &g) } else { None };
    let Some(pairing) = pairing else {
        cert.checks.push(FactorCheck {
            kind: CheckKind::Degree,
            source: None,
            target: None,
            margin: -1.0,
        });
        return Ok(cert);
    };
    cert.degree = pairing_degree(&pairing);

    let per_face = density.pow((m - 1) as u32);
    let total = 2 * m * per_face;
    let n1 = w1.n1;
    let fresh = || (vec![f64::INFINITY; n1], vec![f64::INFINITY; m - n1]);
    let (exit_m, entry_m) = (0..total)
        .into_par_iter()
        .fold(fresh, |(mut ex, mut en), t| {
            let face = t / per_face;
            let (axis, side) = (face / 2, if face.is_multiple_of(2) { -1.0 } else { 1.0 });
            let y = g(&face_point(m, axis, side, density, t % per_face));
            if axis < n1 {
                let (j, s) = pairing[axis];
                ex[axis] = ex[axis].min(nan_low(s * side * y[j] - 1.0));
            }
            for (e, em) in en.iter_mut().enumerate() {
                *em = em.min(nan_low(1.0 - y[n1 + e].abs()));
            }
            (ex, en)
        })
        .reduce(fresh, |(a, b), (c, d)| {
            (
                a.iter().zip(&c).map(|(x, y)| x.min(*y)).collect(),
                b.iter().zip(&d).map(|(x, y)| x.min(*y)).collect(),
            )
        });
    cert.samples = total;
    cert.checks.push(FactorCheck {
        kind: CheckKind::Degree,
        source: None,
        target: None,
        margin: 1.0,
    });
    for (i, mg) in exit_m.into_iter().enumerate() {
        cert.checks.push(FactorCheck {
            kind: CheckKind::ExitStretch,
            source: Some(w1.names[i].clone()),
            target: Some(w2.names[pairing[i].0].clone()),
            margin: mg,
        });
    }
    for (e, mg) in entry_m.into_iter().enumerate() {
        cert.checks.push(FactorCheck {
            kind: CheckKind::EntryAvoid,
            source: None,
            target: Some(w2.names[n1 + e].clone()),
            margin: mg,
        });
    }
    cert.verdict = Verdict::of_margin(cert.min_margin());
    Ok(cert)
}

// ---------------------------------------------------------------------------------------
// Constants

/// Contraction and expansion rates of the time-one map: fibers contract within
/// `[λ₋, λ₊]` and expand within `[μ₋, μ₊]`, the cylinder directions within `[λ₁, μ₁]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub lambda_center: f64,
    pub mu_center: f64,
    pub mu_minus: f64,
    pub mu_plus: f64,
}

impl Rates {
    /// From the range of Lyapunov exponents over the action band, widened by 1%.
    pub fn from_exponents(min_rate: f64, max_rate: f64) -> Self {
        let mu_minus = min_rate.exp() / 1.01;
        let mu_plus = max_rate.exp() * 1.01;
        let mu_center = mu_minus.sqrt();
        Self {
            lambda_minus: 1.0 / mu_plus,
            lambda_plus: 1.0 / mu_minus,
            lambda_center: 1.0 / mu_center,
            mu_center,
            mu_minus,
            mu_plus,
        }
    }

    pub fn validate(&self) -> Result<(), WindowsError> {
        let r = self;
        let chain = [
            0.0,
            r.lambda_minus,
            r.lambda_plus,
            r.lambda_center,
            1.0,
            r.mu_center,
            r.mu_minus,
            r.mu_plus,
        ];
        if chain.windows(2).all(|w| w[0] < w[1]) && r.mu_plus.is_finite() {
            Ok(())
        } else {
            Err(WindowsError::Precondition(format!(
                "rates must satisfy 0 < λ₋ < λ₊ < λ₁ < 1 < μ₁ < μ₋ < μ₊, got {r:?}"
            )))
        }
    }
}

/// Transverse distance of the homoclinic excursions to the cylinder as a function of
/// time, used to find when they enter a neighborhood of it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Reach {
    /// `(σ, dist)` with `σ > 0` after the homoclinic point, `σ < 0` before.
    pub profile: Vec<(f64, f64)>,
}

impl Reach {
    pub fn from_homoclinics(homs: &[HomoclinicData]) -> Self {
        let mut profile: Vec<(f64, f64)> = homs
            .iter()
            .flat_map(|h| h.samples.iter().map(|s| (s.sigma, s.dist)))
            .collect();
        profile.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { profile }
    }

    /// Smallest whole numbers of steps `(n, m)` such that the excursions stay within
    /// `radius` of the cylinder for `σ ≥ n` and for `σ ≤ −m`.
    pub fn steps(&self, radius: f64) -> (usize, usize) {
        let last = |sel: &dyn Fn(f64) -> bool| {
            self.profile
                .iter()
                .filter(|(s, d)| sel(*s) && *d >= radius)
                .map(|(s, _)| s.abs())
                .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.max(b))))
                .map_or(0, |s| s.floor() as usize + 1)
        };
        (last(&|s| s >= 0.0), last(&|s| s <= 0.0))
    }
}

/// Measured data the window sizes are built from.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantInputs {
    pub rates: Rates,
    /// Bound on the chart change between the past and future fiber charts.
    pub c3: f64,
    /// `ε²`-coefficient of the deviation of the time-one map from the twist map.
    pub c4: f64,
    /// Lower bound of the twist `∂φ'/∂J`.
    pub tau: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub reach: Reach,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowConstants {
    pub eps: f64,
    pub eps1: f64,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub alpha_check: f64,
    pub alpha_hat: f64,
    pub beta_minus: f64,
    pub beta_plus: f64,
    pub beta_check: f64,
    pub beta_hat: f64,
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub gamma_check: f64,
    pub gamma_hat: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub delta_check: f64,
    pub delta_hat: f64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub c3: f64,
    pub c4: f64,
    pub tau: f64,
    pub rates: Rates,
    pub a_minus: f64,
    pub a_plus: f64,
    /// Steps after which the excursions are within the neighborhood `2ε₁` of the cylinder.
    pub reach_n: usize,
    pub reach_m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Less,
    LessEq,
    Equal,
}

#[derive(Debug, Clone, Serialize)]
pub struct Inequality {
    pub group: &'static str,
    pub statement: &'static str,
    pub lhs: f64,
    pub relation: Relation,
    pub rhs: f64,
    pub holds: bool,
}

fn ineq(group: &'static str, statement: &'static str, lhs: f64, relation: Relation, rhs: f64) -> Inequality {
    let holds = match relation {
        Relation::Less => lhs < rhs,
        Relation::LessEq => lhs <= rhs,
        Relation::Equal => lhs == rhs,
    };
    Inequality {
        group,
        statement,
        lhs,
        relation,
        rhs,
        holds,
    }
}

impl WindowConstants {
    /// Every inequality the windows rely on, evaluated from the fields.
    pub fn inequalities(&self) -> Vec<Inequality> {
        use Relation::*;
        let c = self;
        let e1 = c.eps1;
        let r = &c.rates;
        let (n, m, k) = (c.n as f64, c.m as f64, c.k as f64);
        let e2c4 = c.c4 * c.eps * c.eps;
        vec![
            ineq("s-sizes", "3ε₁ < α⁻", 3.0 * e1, Less, c.alpha_minus),
            ineq("s-sizes", "α⁻ = α̂", c.alpha_minus, Equal, c.alpha_hat),
            ineq("s-sizes", "α̂ = α̌", c.alpha_hat, Equal, c.alpha_check),
            ineq("s-sizes", "α̌ < α⁺/C₃", c.alpha_check, Less, c.alpha_plus / c.c3),
            ineq("u-sizes", "3ε₁ < β⁺", 3.0 * e1, Less, c.beta_plus),
            ineq("u-sizes", "β⁺ = β̂", c.beta_plus, Equal, c.beta_hat),
            ineq("u-sizes", "β̂ = β̌", c.beta_hat, Equal, c.beta_check),
            ineq("u-sizes", "β̌ < β⁻/C₃", c.beta_check, Less, c.beta_minus / c.c3),
            ineq(
                "transit-hyperbolic",
                "λ₊^N (a⁺ + α⁺) < 2ε₁",
                r.lambda_plus.powf(n) * (c.a_plus + c.alpha_plus),
                Less,
                2.0 * e1,
            ),
            ineq(
                "transit-hyperbolic",
                "β̌ + ε₁ < μ₋^N β⁺",
                c.beta_check + e1,
                Less,
                r.mu_minus.powf(n) * c.beta_plus,
            ),
            ineq(
                "transit-hyperbolic",
                "μ₋^{-M} (β⁻ + a⁻) < 2ε₁",
                r.mu_minus.powf(-m) * (c.beta_minus + c.a_minus),
                Less,
                2.0 * e1,
            ),
            ineq(
                "transit-hyperbolic",
                "α̂ + ε₁ < λ₊^{-M} α⁻",
                c.alpha_hat + e1,
                Less,
                r.lambda_plus.powf(-m) * c.alpha_minus,
            ),
            ineq("transit-reach", "F^N(Γ) ⊂ 𝒩(Λ)", c.reach_n as f64, LessEq, n),
            ineq("transit-reach", "F^{-M}(Γ) ⊂ 𝒩(Λ)", c.reach_m as f64, LessEq, m),
            ineq(
                "twist-stretch",
                "2γ̌ + γ̂ + 3ε₁ < Kτδ̌",
                2.0 * c.gamma_check + c.gamma_hat + 3.0 * e1,
                Less,
                k * c.tau * c.delta_check,
            ),
            ineq("departure-sizes", "δ̌ < δ̌ + ε₁", c.delta_check, Less, c.delta_check + e1),
            ineq("departure-sizes", "δ̌ + ε₁ < δ⁺", c.delta_check + e1, Less, c.delta_plus),
            ineq("departure-sizes", "δ⁺ < γ⁻/C₃", c.delta_plus, Less, c.gamma_minus / c.c3),
            ineq("departure-sizes", "γ⁻/C₃ < γ⁻", c.gamma_minus / c.c3, Less, c.gamma_minus),
            ineq(
                "departure-sizes",
                "γ⁻ < γ⁻ + Mτδ⁻ + ε₁",
                c.gamma_minus,
                Less,
                c.gamma_minus + m * c.tau * c.delta_minus + e1,
            ),
            ineq(
                "departure-sizes",
                "γ⁻ + Mτδ⁻ + ε₁ < γ̂",
                c.gamma_minus + m * c.tau * c.delta_minus + e1,
                Less,
                c.gamma_hat,
            ),
            ineq("arrival-sizes", "0 < δ̌", 0.0, Less, c.delta_check),
            ineq("arrival-sizes", "δ̌ + ε₁ < δ̂", c.delta_check + e1, Less, c.delta_hat),
            ineq("arrival-sizes", "δ̂ < δ̂ + ε₁", c.delta_hat, Less, c.delta_hat + e1),
            ineq("arrival-sizes", "δ̂ + ε₁ < δ⁻", c.delta_hat + e1, Less, c.delta_minus),
            ineq("arrival-sizes", "δ⁻ < C₃δ⁻", c.delta_minus, Less, c.c3 * c.delta_minus),
            ineq("arrival-sizes", "C₃δ⁻ < γ⁺", c.c3 * c.delta_minus, Less, c.gamma_plus),
            ineq(
                "arrival-sizes",
                "γ⁺ < γ⁺ + Nτδ⁺ + ε₁",
                c.gamma_plus,
                Less,
                c.gamma_plus + n * c.tau * c.delta_plus + e1,
            ),
            ineq(
                "arrival-sizes",
                "γ⁺ + Nτδ⁺ + ε₁ < γ̌",
                c.gamma_plus + n * c.tau * c.delta_plus + e1,
                Less,
                c.gamma_check,
            ),
            ineq("remainder-budget", "N C₄ ε² < ε₁", n * e2c4, Less, e1),
            ineq("remainder-budget", "M C₄ ε² < ε₁", m * e2c4, Less, e1),
            ineq("remainder-budget", "K C₄ ε² < ε₁", k * e2c4, Less, e1),
        ]
    }

    pub fn violations(&self) -> Vec<Inequality> {
        self.inequalities().into_iter().filter(|i| !i.holds).collect()
    }

    /// Copy with a different number of twist steps, not re-validated.
    pub fn with_twist_steps(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }
}

/// Greedy choice of window sizes and transit times at scale `eps` for the error budget
/// `eps1`: fiber sizes, then the transit steps `N`, `M`, then the angle and action
/// sizes, then the twist steps `K`, and finally the remainder budget. Fails with the
/// largest admissible `ε` when the budget cannot be met.
pub fn choose_constants(inputs: &ConstantInputs, eps: f64, eps1: f64) -> Result<WindowConstants, WindowsError> {
    inputs.rates.validate()?;
    let ConstantInputs {
        rates,
        c3,
        c4,
        tau,
        a_minus,
        a_plus,
        ..
    } = inputs.clone();
    if !(tau > 0.0) || !(c3 > 1.0) || !(c4 >= 0.0) || !(a_minus >= 0.0) || !(a_plus >= 0.0) {
        return Err(WindowsError::Precondition(format!(
            "need τ > 0, C₃ > 1, C₄ ≥ 0, a± ≥ 0; got τ = {tau}, C₃ = {c3}, C₄ = {c4}, a = ({a_minus}, {a_plus})"
        )));
    }
    if !(eps > 0.0) || !(eps1 > 0.0) {
        return Err(WindowsError::Precondition("ε and ε₁ must be positive".into()));
    }
    let e1 = eps1;
    let alpha = 4.0 * e1;
    let alpha_plus = PAD * c3 * alpha;
    let beta = 4.0 * e1;
    let beta_minus = PAD * c3 * beta;

    let (reach_n, reach_m) = inputs.reach.steps(2.0 * e1);
    let smallest = |start: usize, ok: &dyn Fn(f64) -> bool| -> Result<usize, WindowsError> {
        (start.max(1)..100_000)
            .find(|&k| ok(k as f64))
            .ok_or_else(|| WindowsError::Precondition("no admissible transit time".into()))
    };
    let n = smallest(reach_n, &|n| {
        rates.lambda_plus.powf(n) * (a_plus + alpha_plus) < 2.0 * e1 && beta + e1 < rates.mu_minus.powf(n) * beta
    })?;
    let m = smallest(reach_m, &|m| {
        rates.mu_minus.powf(-m) * (beta_minus + a_minus) < 2.0 * e1
            && alpha + e1 < rates.lambda_plus.powf(-m) * alpha
    })?;

    let delta_check = 4.0 * e1;
    let delta_plus = delta_check + 2.0 * e1;
    let delta_hat = delta_plus;
    let delta_minus = delta_hat + 2.0 * e1;
    let gamma_minus = PAD * c3 * delta_plus;
    let gamma_hat = gamma_minus + m as f64 * tau * delta_minus + 2.0 * e1;
    let gamma_plus = PAD * c3 * delta_minus;
    let gamma_check = gamma_plus + n as f64 * tau * delta_plus + 2.0 * e1;
    let k = ((2.0 * gamma_check + gamma_hat + 3.0 * e1) / (tau * delta_check)).floor() as usize + 1;

    let worst = n.max(m).max(k) as f64;
    if !(worst * c4 * eps * eps < e1) {
        return Err(WindowsError::Infeasible {
            eps,
            eps_max: (e1 / (worst * c4)).sqrt(),
        });
    }
    let out = WindowConstants {
        eps,
        eps1: e1,
        alpha_minus: alpha,
        alpha_plus,
        alpha_check: alpha,
        alpha_hat: alpha,
        beta_minus,
        beta_plus: beta,
        beta_check: beta,
        beta_hat: beta,
        gamma_minus,
        gamma_plus,
        gamma_check,
        gamma_hat,
        delta_minus,
        delta_plus,
        delta_check,
        delta_hat,
        n,
        m,
        k,
        c3,
        c4,
        tau,
        rates,
        a_minus,
        a_plus,
        reach_n,
        reach_m,
    };
    if let Some(v) = out.violations().first() {
        return Err(WindowsError::Precondition(format!(
            "greedy sizes violate {}: {} vs {}",
            v.statement, v.lhs, v.rhs
        )));
    }
    Ok(out)
}

/// Measures the constants of the chart on `model` at scale `eps` over the action band
/// `[j_lo, j_hi]`, from the homoclinic branches `homs` (any energy).
pub fn measure_inputs(
    model: &Model,
    homs: &[HomoclinicData],
    eps: f64,
    j_band: (f64, f64),
) -> Result<ConstantInputs, WindowsError> {
    let (j_lo, j_hi) = j_band;
    if !(0.0 < j_lo && j_lo <= j_hi) || homs.is_empty() {
        return Err(WindowsError::Precondition(format!(
            "need an action band 0 < J_lo ≤ J_hi and homoclinic data, got [{j_lo}, {j_hi}]"
        )));
    }
    let levels = [j_lo, j_hi];
    let mut rate = (f64::INFINITY, 0.0_f64);
    let mut c3: f64 = 1.0;
    for &j in &levels {
        let orbit = find_periodic_orbit(model, 0.5 * j * j)?;
        rate = (rate.0.min(orbit.lyapunov_exponent), rate.1.max(orbit.lyapunov_exponent));
        // Distortion of the fiber chart: conditioning of the transverse eigenbasis in
        // coordinates balanced by the exponent.
        let (vu, vs) = (orbit.unstable_direction, orbit.stable_direction);
        let k = orbit.lyapunov_exponent.sqrt();
        let basis = nalgebra::Matrix2::new(vu[0] * k, vs[0] * k, vu[2] / k, vs[2] / k);
        let sv = basis.svd(false, false).singular_values;
        c3 = c3.max(sv.max() / sv.min());
    }
    let mut at_levels = Vec::new();
    for h in homs {
        for &j in &levels {
            at_levels.push(h.at_energy(0.5 * j * j)?);
        }
    }
    let a = at_levels
        .iter()
        .filter_map(|h| {
            h.samples
                .iter()
                .min_by(|x, y| x.sigma.abs().total_cmp(&y.sigma.abs()))
                .map(|s| s.dist)
        })
        .fold(0.0_f64, f64::max);
    // Shear of the scattering map in (φ, J).
    for h in homs {
        for &j in &levels {
            let dj = 1e-4 * j;
            let ap = h.at_energy(0.5 * (j + dj).powi(2))?.phase_shift;
            let am = h.at_energy(0.5 * (j - dj).powi(2))?.phase_shift;
            let s = ((ap - am) / (2.0 * dj)).abs();
            let norm = (0.5 * (2.0 + s * s + s * (4.0 + s * s).sqrt())).sqrt();
            c3 = c3.max(norm);
        }
    }
    let (c4, tau) = measure_inner(model, eps, j_band)?;
    Ok(ConstantInputs {
        rates: Rates::from_exponents(rate.0, rate.1),
        c3: PAD * c3,
        c4,
        tau,
        a_minus: a,
        a_plus: a,
        reach: Reach::from_homoclinics(&at_levels),
    })
}

/// Deviation of the true time-one map near the cylinder from `(J, φ) ↦ (J, φ + J)`, over
/// a grid of `(J, φ, θ)`: returns the padded `ε²`-coefficient and the smallest twist.
/// Each start is moved along the unstable fiber so that its unstable component vanishes
/// after unit time, which keeps it within `O(ε²)` of the perturbed cylinder.
fn measure_inner(model: &Model, eps: f64, (j_lo, j_hi): (f64, f64)) -> Result<(f64, f64), WindowsError> {
    let tb = Testbed::of(model);
    let c0 = tb.orbit_coordinate();
    let d = model.theta_dim();
    // Transverse (x₀, y₀) parts of the unstable and stable directions per action level.
    let levels = [j_lo, 0.5 * (j_lo + j_hi), j_hi];
    let mut fibers = Vec::new();
    for &j in &levels {
        let o = find_periodic_orbit(model, 0.5 * j * j)?;
        let (u, s) = (o.unstable_direction, o.stable_direction);
        fibers.push(([u[0], u[2]], [s[0], s[2]]));
    }
    let fiber = |j: f64| fibers[levels.iter().position(|l| (l - j).abs() < 1e-3).unwrap_or(0)];
    let mut grid = Vec::new();
    for j in levels {
        for p in 0..4 {
            for t in 0..3 {
                let theta: Vec<f64> = (0..d).map(|c| ((t + 1) as f64 * 0.381_966 * (c + 1) as f64).fract()).collect();
                grid.push((j, p as f64 * 0.25, theta));
            }
        }
    }
    let solver = Solver::new(IntegratorConfig::with_tol(1e-12));
    let run = |j: f64, phi: f64, theta: &[f64], c: f64| -> Result<Vec<f64>, WindowsError> {
        let (vu, _) = fiber(j);
        let mut y0 = vec![c0 + c * vu[0], phi, c * vu[1], j];
        y0.extend_from_slice(theta);
        solver
            .run_to(|_, y, dy| scaled_rhs(model, eps, y, dy), 0.0, &y0, 1.0)
            .map_err(|e| WindowsError::Integrate(e.to_string()))
    };
    let settled = |j: f64, phi: f64, theta: &[f64]| -> Result<Vec<f64>, WindowsError> {
        let (vu, vs) = fiber(j);
        let det = vu[0] * vs[1] - vu[1] * vs[0];
        let unstable = |y: &[f64]| ((y[0] - c0) * vs[1] - y[2] * vs[0]) / det;
        let (mut c_prev, mut f_prev) = (0.0, unstable(&run(j, phi, theta, 0.0)?));
        let mut c = 1e-8;
        for _ in 0..40 {
            let y = run(j, phi, theta, c)?;
            let f = unstable(&y);
            if f.abs() < 1e-11 || f == f_prev {
                return Ok(y);
            }
            let next = c - f * (c - c_prev) / (f - f_prev);
            (c_prev, f_prev, c) = (c, f, next);
        }
        Err(WindowsError::Integrate("no orbit segment stays near the cylinder".into()))
    };
    let rows: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|(j, phi, theta)| {
            let y = settled(*j, *phi, theta)?;
            let dev = (y[3] - j).abs().max((y[1] - phi - j).abs());
            let h = 1e-5;
            let twist = (settled(j + h, *phi, theta)?[1] - settled(j - h, *phi, theta)?[1]) / (2.0 * h);
            Ok((dev, twist))
        })
        .collect::<Result<_, WindowsError>>()?;
    let dev = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let twist = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok((PAD * dev / (eps * eps), twist / 1.01))
}

// ---------------------------------------------------------------------------------------
// Chart dynamics

/// Time-one map in the chart `(s, u, φ, J, θ)`: fibers scaled by `e^{∓r(J)}` with the
/// closed-orbit exponent `r`, the twist `φ ↦ φ + J`, the action drift
/// `J ↦ J − ε² ∂_φV` evaluated on the closed orbit, and `θ` carried by the external flow
/// over flow time `ε`.
#[derive(Debug, Clone)]
pub struct ReducedMap {
    model: Model,
    testbed: Testbed,
    eps: f64,
    phase_shift: f64,
}

impl ReducedMap {
    pub fn new(model: &Model, eps: f64, phase_shift: f64) -> Self {
        Self {
            model: model.clone(),
            testbed: Testbed::of(model),
            eps,
            phase_shift,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        THETA + self.model.theta_dim()
    }

    fn step(&self, x: &mut [f64]) -> Result<(), ExtFlowError> {
        let j = x[J];
        let r = self.testbed.hyperbolic_rate(j.abs());
        x[S] *= (-r).exp();
        x[U] *= r.exp();
        let q = [self.testbed.orbit_coordinate(), x[PHI]];
        let dv = self.model.potential.grad_x(&q, &x[THETA..]);
        x[PHI] += j;
        x[J] = j - self.eps * self.eps * dv[1];
        let next = self.model.external.advance_lifted(&x[THETA..], self.eps)?;
        x[THETA..].copy_from_slice(&next);
        Ok(())
    }

    pub fn iterate(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        for _ in 0..n {
            if self.step(&mut y).is_err() {
                return vec![f64::NAN; y.len()];
            }
        }
        y
    }

    pub fn apply(&self, map: &ChainMap, x: &[f64]) -> Vec<f64> {
        match map {
            ChainMap::Iterate { steps } => self.iterate(x, *steps),
            ChainMap::ChartChange(c) => c.apply(x),
        }
    }
}

/// Change from the past fiber chart around a homoclinic point to the future one, taken
/// at the extreme allowed by `C₃`: fibers scaled by `C₃^{±1}`, with the angle and action
/// directions exchanged as in the switch of exit directions between the two windows.
#[derive(Debug, Clone, Serialize)]
pub struct ChartChange {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub c3: f64,
}

impl ChartChange {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x.iter().zip(&self.from).map(|(a, b)| a - b).collect();
        let mut y = self.to.clone();
        y[S] += self.c3 * d[S];
        y[U] += d[U] / self.c3;
        y[PHI] += self.c3 * d[J];
        y[J] += d[PHI] / self.c3;
        for i in THETA..y.len() {
            y[i] += d[i];
        }
        y
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ChainMap {
    Iterate { steps: usize },
    ChartChange(ChartChange),
}

/// Role of one alignment inside a heteroclinic link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Departure window near the cylinder into the past window at the homoclinic point.
    Departure,
    /// Past window into the future window at the same point.
    Scattering,
    /// Future window into the arrival window near the cylinder.
    Arrival,
    /// Arrival window into the next departure window along the twist.
    Twist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Departure => "departure",
            Stage::Scattering => "scattering",
            Stage::Arrival => "arrival",
            Stage::Twist => "twist",
        })
    }
}

// ---------------------------------------------------------------------------------------
// Chains

#[derive(Debug, Clone, Serialize)]
pub struct ChainLink {
    pub index: usize,
    pub branch: Branch,
    pub j_before: f64,
    pub j_after: f64,
    pub homoclinic_point: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowChain {
    pub epsilon: f64,
    pub constants: Option<WindowConstants>,
    pub windows: Vec<Window>,
    pub maps: Vec<ChainMap>,
    pub stages: Vec<Stage>,
    pub certificates: Vec<AlignmentCertificate>,
    pub links: Vec<ChainLink>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainOptions {
    /// Face sample points per axis.
    pub density: usize,
    /// Half-width of the first window in each external angle.
    pub theta_radius: f64,
    /// Factor applied to the angle half-widths from one window to the next.
    pub theta_shrink: f64,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            density: 4,
            theta_radius: 0.05,
            theta_shrink: 0.98,
        }
    }
}

impl WindowChain {
    pub fn empty(epsilon: f64) -> Self {
        Self {
            epsilon,
            constants: None,
            windows: Vec::new(),
            maps: Vec::new(),
            stages: Vec::new(),
            certificates: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn is_certified(&self) -> bool {
        self.certificates.len() == self.maps.len() && self.certificates.iter().all(|c| c.is_aligned())
    }

    /// First alignment that is not certified, as `(link, stage, certificate)`.
    pub fn first_failure(&self) -> Option<(usize, Stage, &AlignmentCertificate)> {
        self.certificates
            .iter()
            .enumerate()
            .find(|(_, c)| !c.is_aligned())
            .map(|(i, c)| (i / 4 + 1, self.stages[i], c))
    }

    /// Appends `other`, whose first window must be this chain's last one. Certificates
    /// are carried over unchanged.
    pub fn concat(mut self, other: WindowChain) -> Result<Self, WindowsError> {
        if self.windows.is_empty() {
            return Ok(other);
        }
        if other.windows.is_empty() {
            return Ok(self);
        }
        let last = self.windows.last().expect("non-empty");
        if !last.same_as(&other.windows[0]) {
            return Err(WindowsError::Precondition(format!(
                "chains do not share a window: {} vs {}",
                last.label, other.windows[0].label
            )));
        }
        let offset = self.links.len();
        self.windows.extend(other.windows.into_iter().skip(1));
        self.maps.extend(other.maps);
        self.stages.extend(other.stages);
        self.certificates.extend(other.certificates);
        self.links.extend(other.links.into_iter().map(|mut l| {
            l.index += offset;
            l
        }));
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain serializes")
    }

    /// Shadow point of the chain under the chart dynamics.
    pub fn shadow(&self, f: &ReducedMap) -> Result<ShadowResult, WindowsError> {
        shadow(&self.windows, |k, x| f.apply(&self.maps[k], x))
    }
}

fn chart_names(d: usize) -> Vec<String> {
    let mut v: Vec<String> = ["s", "u", "phi", "J"].iter().map(|s| s.to_string()).collect();
    v.extend((0..d).map(|i| format!("theta{i}")));
    v
}

/// Windows and certificates around the pseudo-orbit of `schedule`. Link `i` runs from
/// the departure window near the cylinder through the past and future windows at the
/// homoclinic point to the arrival window and on along the twist to the next departure
/// window. The chain follows the schedule's branches and action levels; angles are
/// carried by the chart dynamics. Failed alignments are recorded, not raised.
pub fn assemble_chain(
    reduced: &ReducedMap,
    schedule: &Schedule,
    c: &WindowConstants,
    opts: &ChainOptions,
) -> Result<WindowChain, WindowsError> {
    let mut chain = WindowChain::empty(reduced.eps);
    chain.constants = Some(c.clone());
    if schedule.blocks.is_empty() {
        return Ok(chain);
    }
    let d = reduced.model.theta_dim();
    if schedule.blocks.iter().any(|b| b.pre_state.theta.len() != d) {
        return Err(WindowsError::Precondition(format!("schedule angles are not points of T^{d}")));
    }
    if !(opts.theta_radius > 0.0) || !(opts.theta_shrink > 0.0 && opts.theta_shrink < 1.0) {
        return Err(WindowsError::Precondition("need θ radius > 0 and shrink in (0, 1)".into()));
    }
    let names = chart_names(d);
    let m = THETA + d;
    let mut exit_departure = vec![true; m];
    exit_departure[S] = false;
    exit_departure[J] = false;
    let mut exit_arrival = vec![true; m];
    exit_arrival[S] = false;
    exit_arrival[PHI] = false;
    let sizes = |a: f64, b: f64, g: f64, dl: f64, rho: f64| {
        let mut v = vec![a, b, g, dl];
        v.extend(std::iter::repeat_n(rho, d));
        v
    };

    let mut rho = opts.theta_radius;
    let first = &schedule.blocks[0].pre_state;
    let mut dep = vec![0.0, 0.0, first.phi, first.j];
    dep.extend_from_slice(&first.theta);
    chain.windows.push(Window::boxed(
        "departure 0",
        dep.clone(),
        &sizes(c.alpha_hat, c.beta_hat, c.gamma_hat, c.delta_hat, rho),
        &exit_departure,
        &names,
    )?);
    for (i, blk) in schedule.blocks.iter().enumerate() {
        let link = i + 1;
        let j_after = schedule
            .blocks
            .get(i + 1)
            .map_or(schedule.final_state.j, |b| b.pre_state.j);

        let mut past = reduced.iterate(&dep, c.m);
        past[S] = 0.0;
        past[U] = c.a_minus;
        rho *= opts.theta_shrink;
        chain.windows.push(Window::boxed(
            format!("homoclinic past {link}"),
            past.clone(),
            &sizes(c.alpha_minus, c.beta_minus, c.gamma_minus, c.delta_minus, rho),
            &exit_departure,
            &names,
        )?);
        chain.maps.push(ChainMap::Iterate { steps: c.m });
        chain.stages.push(Stage::Departure);

        let mut future = past.clone();
        future[S] = c.a_plus;
        future[U] = 0.0;
        future[PHI] += reduced.phase_shift;
        future[J] += j_after - blk.pre_state.j;
        rho *= opts.theta_shrink;
        chain.windows.push(Window::boxed(
            format!("homoclinic future {link}"),
            future.clone(),
            &sizes(c.alpha_plus, c.beta_plus, c.gamma_plus, c.delta_plus, rho),
            &exit_arrival,
            &names,
        )?);
        chain.maps.push(ChainMap::ChartChange(ChartChange {
            from: past.clone(),
            to: future.clone(),
            c3: c.c3,
        }));
        chain.stages.push(Stage::Scattering);

        let mut arr = reduced.iterate(&future, c.n);
        arr[S] = 0.0;
        arr[U] = 0.0;
        rho *= opts.theta_shrink;
        chain.windows.push(Window::boxed(
            format!("arrival {link}"),
            arr.clone(),
            &sizes(c.alpha_check, c.beta_check, c.gamma_check, c.delta_check, rho),
            &exit_arrival,
            &names,
        )?);
        chain.maps.push(ChainMap::Iterate { steps: c.n });
        chain.stages.push(Stage::Arrival);

        dep = reduced.iterate(&arr, c.k);
        rho *= opts.theta_shrink;
        chain.windows.push(Window::boxed(
            format!("departure {link}"),
            dep.clone(),
            &sizes(c.alpha_hat, c.beta_hat, c.gamma_hat, c.delta_hat, rho),
            &exit_departure,
            &names,
        )?);
        chain.maps.push(ChainMap::Iterate { steps: c.k });
        chain.stages.push(Stage::Twist);

        chain.links.push(ChainLink {
            index: link,
            branch: blk.branch,
            j_before: blk.pre_state.j,
            j_after,
            homoclinic_point: past,
        });
    }
    chain.certificates = (0..chain.maps.len())
        .into_par_iter()
        .map(|k| {
            let label = match &chain.maps[k] {
                ChainMap::Iterate { steps } => format!("F^{steps}"),
                ChainMap::ChartChange(_) => "chart change".to_string(),
            };
            check_alignment(
                &chain.windows[k],
                &chain.windows[k + 1],
                |x| reduced.apply(&chain.maps[k], x),
                &label,
                opts.density,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(chain)
}

/// [`assemble_chain`] that fails on the first alignment not certified.
pub fn build_chain(
    reduced: &ReducedMap,
    schedule: &Schedule,
    constants: &WindowConstants,
    opts: &ChainOptions,
) -> Result<WindowChain, WindowsError> {
    let chain = assemble_chain(reduced, schedule, constants, opts)?;
    if let Some((link, stage, cert)) = chain.first_failure() {
        let worst = cert.worst().cloned().expect("failed certificate has checks");
        return Err(WindowsError::LinkFailed {
            link,
            stage,
            check: worst.describe(),
            margin: worst.margin,
            verdict: cert.verdict,
        });
    }
    Ok(chain)
}

// ---------------------------------------------------------------------------------------
// Shadowing

#[derive(Debug, Clone, Serialize)]
pub struct Visit {
    pub window: usize,
    pub label: String,
    pub margin: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowResult {
    pub point: Vec<f64>,
    pub visits: Vec<Visit>,
}

impl ShadowResult {
    pub fn min_margin(&self) -> f64 {
        self.visits.iter().map(|v| v.margin).fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `window, label, margin, x0, x1, …`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        let m = self.point.len();
        let mut header = vec!["window".to_string(), "label".into(), "margin".into()];
        header.extend((0..m).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for v in &self.visits {
            let mut row = vec![v.window.to_string(), v.label.clone(), format!("{:e}", v.margin)];
            row.extend(v.point.iter().map(|x| format!("{x:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Largest interval inside `[a, b]` on which the increasing `h` stays in `[-1, 1]`, by
/// bisection down to adjacent floats.
fn crossing_interval<H: Fn(f64) -> f64>(h: &H, a: f64, b: f64) -> Option<(f64, f64)> {
    let (ha, hb) = (h(a), h(b));
    if !(ha <= 1.0 && hb >= -1.0) {
        return None;
    }
    let solve = |mut lo: f64, mut hi: f64, c: f64| {
        loop {
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                return (lo, hi);
            }
            if h(mid) < c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    };
    let lo = if ha < -1.0 { solve(a, b, -1.0).1 } else { a };
    let hi = if hb > 1.0 { solve(lo, b, 1.0).0 } else { b };
    (lo <= hi).then_some((lo, hi))
}

/// A point of `windows[0]` whose images under `f(0, ·)`, `f(1, ·)`, … visit every
/// window. Each exit coordinate of the first window is narrowed, window by window, to
/// the interval whose image crosses the matching exit coordinate; entry coordinates stay
/// at the center.
pub fn shadow<F: Fn(usize, &[f64]) -> Vec<f64>>(windows: &[Window], f: F) -> Result<ShadowResult, WindowsError> {
    let Some(w0) = windows.first() else {
        return Ok(ShadowResult {
            point: Vec::new(),
            visits: Vec::new(),
        });
    };
    let (m, n1) = (w0.dim(), w0.n1);
    if windows.iter().any(|w| w.dim() != m || w.n1 != n1) {
        return Err(WindowsError::Precondition(
            "shadowing needs windows of equal dimension and exit count".into(),
        ));
    }
    let image = |v: &[f64], k: usize| -> Vec<f64> {
        let mut x = w0.from_local(v);
        for t in 0..k {
            x = f(t, &x);
        }
        windows[k].local(&x)
    };
    // Exit axis of window k reached by each exit axis of the first window.
    let mut route: Vec<(usize, f64)> = (0..n1).map(|i| (i, 1.0)).collect();
    let mut v = vec![0.0; m];
    let mut lo = vec![-1.0; n1];
    let mut hi = vec![1.0; n1];
    for k in 1..windows.len() {
        let step = |u: &[f64]| windows[k].local(&f(k - 1, &windows[k - 1].from_local(u)));
        let pairing = exit_pairing(m, n1, &step).ok_or(WindowsError::ShadowNotIsolated {
            window: k,
            margin: f64::NEG_INFINITY,
        })?;
        for r in route.iter_mut() {
            let (t, s) = pairing[r.0];
            *r = (t, r.1 * s);
        }
        for _sweep in 0..4 {
            for i in 0..n1 {
                let (j, s) = route[i];
                let h = |t: f64| {
                    let mut u = v.clone();
                    u[i] = t;
                    let y = image(&u, k)[j];
                    if y.is_nan() {
                        f64::NAN
                    } else {
                        s * y
                    }
                };
                let (a, b) = crossing_interval(&h, lo[i], hi[i]).ok_or_else(|| {
                    let mut u = v.clone();
                    u[i] = 0.5 * (lo[i] + hi[i]);
                    WindowsError::ShadowNotIsolated {
                        window: k,
                        margin: 1.0 - image(&u, k)[j].abs(),
                    }
                })?;
                lo[i] = a;
                hi[i] = b;
                v[i] = 0.5 * (a + b);
            }
        }
    }
    let mut x = w0.from_local(&v);
    let point = x.clone();
    let mut visits = Vec::with_capacity(windows.len());
    for (k, w) in windows.iter().enumerate() {
        if k > 0 {
            x = f(k - 1, &x);
        }
        let margin = w.margin(&x);
        if !(margin > 0.0) {
            return Err(WindowsError::ShadowNotIsolated { window: k, margin });
        }
        visits.push(Visit {
            window: k,
            label: w.label.clone(),
            margin,
            point: x.clone(),
        });
    }
    Ok(ShadowResult { point, visits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_degree_counts_swaps_and_signs() {
        assert_eq!(pairing_degree(&[(0, 1.0), (1, 1.0)]), 1);
        assert_eq!(pairing_degree(&[(1, 1.0), (0, 1.0)]), -1);
        assert_eq!(pairing_degree(&[(0, -1.0), (1, 1.0)]), -1);
        assert_eq!(pairing_degree(&[(1, 1.0), (2, 1.0), (0, 1.0)]), 1);
    }

    #[test]
    fn face_grid_covers_corners() {
        let pts: Vec<_> = (0..9).map(|i| face_point(3, 1, 1.0, 3, i)).collect();
        assert!(pts.contains(&vec![-1.0, 1.0, -1.0]));
        assert!(pts.contains(&vec![1.0, 1.0, 1.0]));
        assert!(pts.iter().all(|p| p[1] == 1.0));
    }
}
