//! Global Melnikov functionals `Δ₁` and `G₁`, their rescaling, the genericity check on
//! the two homoclinic branches and the bump construction that enforces it.
//!
//! Every coupling potential is a finite sum `Σ_k c_k·v_k(x)·w_k(θ)`, so with `θ` frozen
//! both functionals are `Σ_k ẇ_k(θ)·M_k(φ)` where `ẇ_k = ∇w_k·X` and the moments `M_k`
//! only involve the unperturbed orbits. All sweeps over `θ` reuse the moments.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::extflow::{ExtFlowError, FlowBox};
use crate::integrate::{scaled_rhs, IntegrateError, IntegratorConfig, Solver};
use crate::invariant::{Branch, HomoclinicData, InvariantError};
use crate::models::{
    EllipticBump, FourierMode, ModelError, Potential, PotentialTerm, ScaledState, Spatial, SystemModel,
    Weight,
};
use crate::quad;
use crate::scalar::wrap_unit;

type Model = SystemModel<f64>;

#[derive(Debug, Error)]
pub enum MelnikovError {
    #[error("improper integral not converged: truncation bound {bound:e}")]
    NotConverged { bound: f64 },
    #[error("invalid block: angle budget L = {l} must exceed the phase shift a = {a}")]
    InvalidBlock { l: f64, a: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("condition A4 indeterminate: margin {} within resolution {}", .0.margin, .0.resolution)]
    A4Indeterminate(Box<A4Report>),
    #[error("invalid bump support: {0}")]
    InvalidSupport(String),
    #[error("no flow box satisfies the margin inequality down to rho = {rho:e}")]
    NoFlowBox { rho: f64 },
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    ExtFlow(#[from] ExtFlowError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Truncation bounds above this are reported as non-convergence.
pub const MAX_TRUNCATION: f64 = 1e-6;

/// `∇_θV(q, θ)·X(θ)`.
pub fn d_x_v(model: &Model, q: &[f64; 2], theta: &[f64]) -> f64 {
    model.d_x_v(q, theta)
}

/// `c_k·∇w_k(θ)·X(θ)` for each potential term.
pub fn weight_rates(model: &Model, theta: &[f64]) -> Vec<f64> {
    let x = model.external.field_vec(theta);
    let mut g = vec![0.0; theta.len()];
    model
        .potential
        .terms
        .iter()
        .map(|t| {
            if t.coef == 0.0 {
                return 0.0;
            }
            t.weight.gradient(theta, &mut g);
            t.coef * g.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Per-term homoclinic moments at one angle, at the full and at the half span.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub full: Vec<f64>,
    pub half: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            full: vec![0.0; n],
            half: vec![0.0; n],
        }
    }

    /// `(value, truncation bound)` for the given weight rates.
    pub fn contract(&self, rates: &[f64]) -> (f64, f64) {
        let v: f64 = self.full.iter().zip(rates).map(|(m, r)| m * r).sum();
        let h: f64 = self.half.iter().zip(rates).map(|(m, r)| m * r).sum();
        (v, (v - h).abs() + 1e-14 * (1.0 + v.abs()))
    }

    fn add_inner(&mut self, inner: &[f64]) {
        for (k, v) in inner.iter().enumerate() {
            self.full[k] += v;
            self.half[k] += v;
        }
    }
}

/// `∫ [v_k(γ(σ) + φ) − v_k(λ(σ) + φ)] dσ` for each term, the homoclinic taken at phase
/// `φ/J` and the comparison orbit switching from the past to the future footpoint at `σ = 0`.
pub fn homoclinic_moments(model: &Model, hom: &HomoclinicData, phi: f64) -> Moments {
    let terms = &model.potential.terms;
    let mut m = Moments::zeros(terms.len());
    let c0 = hom.testbed.orbit_coordinate();
    for (k, t) in terms.iter().enumerate() {
        if t.coef == 0.0 {
            continue;
        }
        let mut full = 0.0;
        let mut half = 0.0;
        for s in &hom.samples {
            let g = t.spatial.value(&[s.x[0], s.x[1] + phi]);
            let l = t.spatial.value(&[c0, s.lambda_angle + phi]);
            let d = s.weight * (g - l);
            full += d;
            if s.inner {
                half += d;
            }
        }
        m.full[k] = full;
        m.half[k] = half;
    }
    m
}

/// Antiderivative of one spatial factor along the closed orbit, as a function of the angle.
#[derive(Debug, Clone)]
struct OrbitPrimitive {
    h: f64,
    values: Vec<f64>,
    primitive: Vec<f64>,
    per_period: f64,
}

impl OrbitPrimitive {
    const NODES: usize = 4096;

    fn new(spatial: &Spatial<f64>, c0: f64) -> Self {
        let n = Self::NODES;
        let h = 1.0 / n as f64;
        let f = |a: f64| spatial.value(&[c0, a]);
        let values: Vec<f64> = (0..=n).map(|i| f(i as f64 * h)).collect();
        let mut primitive = vec![0.0; n + 1];
        for i in 0..n {
            let a = i as f64 * h;
            primitive[i + 1] = primitive[i] + quad::integrate(f, a, a + h, 1, 8);
        }
        Self {
            h,
            values,
            per_period: primitive[n],
            primitive,
        }
    }

    /// `∫_0^α v(λ)`, for any real α.
    fn eval(&self, alpha: f64) -> f64 {
        let periods = alpha.floor();
        let u = alpha - periods;
        let pos = u / self.h;
        let i = (pos.floor() as usize).min(Self::NODES - 1);
        let t = pos - i as f64;
        let (p0, p1) = (self.primitive[i], self.primitive[i + 1]);
        let (d0, d1) = (self.values[i] * self.h, self.values[i + 1] * self.h);
        let t2 = t * t;
        let t3 = t2 * t;
        let local = (2.0 * t3 - 3.0 * t2 + 1.0) * p0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * p1
            + (t3 - t2) * d1;
        periods * self.per_period + local
    }
}

/// Antiderivative tables of every potential term along the closed orbit.
#[derive(Debug, Clone)]
pub struct InnerTable {
    prims: Vec<OrbitPrimitive>,
}

impl InnerTable {
    pub fn new(model: &Model, hom: &HomoclinicData) -> Self {
        let c0 = hom.testbed.orbit_coordinate();
        Self {
            prims: model
                .potential
                .terms
                .iter()
                .map(|t| OrbitPrimitive::new(&t.spatial, c0))
                .collect(),
        }
    }

    /// `(1/J)·[P_k(φ + L) − P_k(φ + a)]`: the inner-dynamics moment over the block.
    pub fn moments(&self, j: f64, phi: f64, a: f64, l: f64) -> Vec<f64> {
        self.prims
            .iter()
            .map(|p| (p.eval(phi + l) - p.eval(phi + a)) / j)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Delta1,
    G1,
}

/// One evaluation of `Δ₁` or `G₁` (scaled-energy units per `ε³`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MelnikovSample {
    pub kind: SampleKind,
    pub branch: Branch,
    pub energy: f64,
    pub action: f64,
    /// Angle coordinate of the starting point on the closed orbit.
    pub phi: f64,
    /// Time phase `φ/J`.
    pub time_phase: f64,
    pub theta: Vec<f64>,
    pub value: f64,
    pub truncation_bound: f64,
}

fn at_action(hom: &HomoclinicData, j: f64) -> Result<std::borrow::Cow<'_, HomoclinicData>, MelnikovError> {
    if (hom.action - j).abs() <= 1e-15 * j {
        Ok(std::borrow::Cow::Borrowed(hom))
    } else {
        Ok(std::borrow::Cow::Owned(hom.at_energy(0.5 * j * j)?))
    }
}

fn checked(bound: f64) -> Result<(), MelnikovError> {
    if bound > MAX_TRUNCATION || !bound.is_finite() {
        Err(MelnikovError::NotConverged { bound })
    } else {
        Ok(())
    }
}

/// `Δ₁(J, φ, θ)` in action-angle coordinates.
pub fn delta1_angle(
    model: &Model,
    hom: &HomoclinicData,
    j: f64,
    phi: f64,
    theta: &[f64],
) -> Result<MelnikovSample, MelnikovError> {
    let h = at_action(hom, j)?;
    let rates = weight_rates(model, theta);
    let (value, bound) = homoclinic_moments(model, &h, phi).contract(&rates);
    checked(bound)?;
    Ok(MelnikovSample {
        kind: SampleKind::Delta1,
        branch: hom.branch,
        energy: 0.5 * j * j,
        action: j,
        phi,
        time_phase: phi / j,
        theta: theta.to_vec(),
        value,
        truncation_bound: bound,
    })
}

/// `Δ₁(E, s, θ)` with `s` the time phase along `λ_E`.
pub fn delta1(
    model: &Model,
    hom: &HomoclinicData,
    e: f64,
    s: f64,
    theta: &[f64],
) -> Result<MelnikovSample, MelnikovError> {
    let j = (2.0 * e).sqrt();
    delta1_angle(model, hom, j, j * s, theta)
}

/// `G₁(J, φ, θ)` for the angle budget `L`.
pub fn g1_angle(
    model: &Model,
    hom: &HomoclinicData,
    j: f64,
    phi: f64,
    theta: &[f64],
    l: f64,
) -> Result<MelnikovSample, MelnikovError> {
    let a = hom.phase_shift;
    if !(l > a) {
        return Err(MelnikovError::InvalidBlock { l, a });
    }
    let h = at_action(hom, j)?;
    let table = InnerTable::new(model, &h);
    let mut m = homoclinic_moments(model, &h, phi);
    m.add_inner(&table.moments(j, phi, a, l));
    let (value, bound) = m.contract(&weight_rates(model, theta));
    checked(bound)?;
    Ok(MelnikovSample {
        kind: SampleKind::G1,
        branch: hom.branch,
        energy: 0.5 * j * j,
        action: j,
        phi,
        time_phase: phi / j,
        theta: theta.to_vec(),
        value,
        truncation_bound: bound,
    })
}

pub fn g1(
    model: &Model,
    hom: &HomoclinicData,
    e: f64,
    s: f64,
    theta: &[f64],
    l: f64,
) -> Result<MelnikovSample, MelnikovError> {
    let j = (2.0 * e).sqrt();
    g1_angle(model, hom, j, j * s, theta, l)
}

/// Both sides of the rescaling identities `F(J, φ, θ) = (√2/J)·F(√2, φ, θ)` in the angle
/// coordinate, for `F = Δ₁` and `F = G₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RescalePair {
    pub delta1: (f64, f64),
    pub g1: (f64, f64),
}

impl RescalePair {
    pub fn max_error(&self) -> f64 {
        (self.delta1.0 - self.delta1.1)
            .abs()
            .max((self.g1.0 - self.g1.1).abs())
    }
}

pub fn rescale_check(
    model: &Model,
    hom: &HomoclinicData,
    j: f64,
    phi: f64,
    theta: &[f64],
    l: f64,
) -> Result<RescalePair, MelnikovError> {
    if !hom.testbed.is_homogeneous() {
        return Err(MelnikovError::Unsupported(
            "rescaling identities need a homogeneous metric".into(),
        ));
    }
    let f = SQRT_2 / j;
    let d_j = delta1_angle(model, hom, j, phi, theta)?.value;
    let d_0 = delta1_angle(model, hom, SQRT_2, phi, theta)?.value;
    let g_j = g1_angle(model, hom, j, phi, theta, l)?.value;
    let g_0 = g1_angle(model, hom, SQRT_2, phi, theta, l)?.value;
    Ok(RescalePair {
        delta1: (d_j, f * d_0),
        g1: (g_j, f * g_0),
    })
}

/// Branch-resolved `G₁` moments at one action, ready for sweeps over `(φ, θ)`.
#[derive(Debug, Clone)]
pub struct GainField {
    pub action: f64,
    pub l: f64,
    pub phase_shift: f64,
    hom: [HomoclinicData; 2],
    inner: InnerTable,
}

impl GainField {
    pub fn new(model: &Model, hom1: &HomoclinicData, hom2: &HomoclinicData, j: f64, l: f64) -> Result<Self, MelnikovError> {
        let a = hom1.phase_shift;
        if !(l > a) || !(l > hom2.phase_shift) {
            return Err(MelnikovError::InvalidBlock { l, a });
        }
        let h1 = at_action(hom1, j)?.into_owned();
        let h2 = at_action(hom2, j)?.into_owned();
        let inner = InnerTable::new(model, &h1);
        Ok(Self {
            action: j,
            l,
            phase_shift: a,
            hom: [h1, h2],
            inner,
        })
    }

    pub fn homoclinic(&self, b: Branch) -> &HomoclinicData {
        &self.hom[(b.index() - 1) as usize]
    }

    /// `G₁` moments of branch `b` at angle `φ`, with the block's own budget `l`.
    pub fn moments_with(&self, model: &Model, b: Branch, phi: f64, l: f64) -> Moments {
        let h = self.homoclinic(b);
        let mut m = homoclinic_moments(model, h, phi);
        m.add_inner(&self.inner.moments(self.action, phi, h.phase_shift, l));
        m
    }

    pub fn moments(&self, model: &Model, b: Branch, phi: f64) -> Moments {
        self.moments_with(model, b, phi, self.l)
    }

    pub fn value(&self, model: &Model, b: Branch, phi: f64, theta: &[f64]) -> (f64, f64) {
        self.moments(model, b, phi).contract(&weight_rates(model, theta))
    }
}

/// Common domain of the two scattering maps: the angle circle minus a small arc.
pub const A4_DOMAIN: (f64, f64) = (0.0, 63.0 / 64.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A4Options {
    pub grid: usize,
    pub rho0: f64,
    pub sigma0: f64,
    pub box_disk_points: usize,
    pub box_time_points: usize,
    pub phi_check_points: usize,
    pub actions: Vec<f64>,
}

impl Default for A4Options {
    fn default() -> Self {
        Self {
            grid: 512,
            rho0: 0.2,
            sigma0: 0.4,
            box_disk_points: 5,
            box_time_points: 9,
            phi_check_points: 128,
            actions: vec![SQRT_2, 1.7, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Supremum {
    pub value: f64,
    pub argmax: f64,
    /// Plain grid maximum before refinement.
    pub grid_value: f64,
    pub grid_argmax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum A4Status {
    Holds,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowBoxSummary {
    pub center: Vec<f64>,
    pub normal: Vec<f64>,
    pub rho: f64,
    pub sigma_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionMargin {
    pub action: f64,
    /// `min_{θ ∈ 𝒫, φ} G^lead(J, φ_*, θ) − G^trail(J, φ, θ)`.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct A4Report {
    pub status: A4Status,
    pub theta0: Vec<f64>,
    pub l: f64,
    pub domain: (f64, f64),
    pub sup1: Supremum,
    pub sup2: Supremum,
    /// `|sup1 − sup2|`, reported as zero when within resolution.
    pub margin: f64,
    pub raw_difference: f64,
    pub resolution: f64,
    pub leading_branch: Branch,
    pub delta: f64,
    pub phi_star: f64,
    /// Angle used on the trailing branch: its own argmax.
    pub phi_trailing: f64,
    pub flow_box: Option<FlowBoxSummary>,
    /// Minimum of the margin inequality over the flow-box samples at `J₀`.
    pub box_margin: Option<f64>,
    pub action_margins: Vec<ActionMargin>,
    #[serde(skip)]
    pub flow_box_full: Option<FlowBox<f64>>,
}

impl A4Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn trailing_branch(&self) -> Branch {
        self.leading_branch.other()
    }

    pub fn sup(&self, b: Branch) -> &Supremum {
        match b {
            Branch::One => &self.sup1,
            Branch::Two => &self.sup2,
        }
    }
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn grid(n: usize) -> Vec<f64> {
    let (a, b) = A4_DOMAIN;
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn supremum(model: &Model, field: &GainField, b: Branch, theta0: &[f64], n: usize) -> (Supremum, f64) {
    let rates = weight_rates(model, theta0);
    let phis = grid(n);
    let vals: Vec<(f64, f64)> = phis
        .par_iter()
        .map(|&p| field.moments(model, b, p).contract(&rates))
        .collect();
    let (i, &(gv, _)) = vals
        .iter()
        .enumerate()
        .fold((0, &vals[0]), |acc, (i, v)| if v.0 > acc.1 .0 { (i, v) } else { acc });
    let worst_bound = vals.iter().map(|v| v.1).fold(0.0, f64::max);
    let lo = phis[i.saturating_sub(1)];
    let hi = phis[(i + 1).min(n - 1)];
    let f = |p: f64| field.moments(model, b, p).contract(&rates).0;
    let (arg, val) = golden_max(f, lo, hi, 1e-10);
    let (value, argmax) = if val >= gv { (val, arg) } else { (gv, phis[i]) };
    (
        Supremum {
            value,
            argmax,
            grid_value: gv,
            grid_argmax: phis[i],
        },
        worst_bound,
    )
}

/// Verifies the genericity condition at `J₀ = √2`, picks `φ_*`, `δ` and a flow box around
/// `θ₀` on which the branch-`lead` blocks at `φ_*` beat every trailing block by `2δ`.
pub fn check_a4(
    model: &Model,
    hom1: &HomoclinicData,
    hom2: &HomoclinicData,
    theta0: &[f64],
    l: f64,
    opts: &A4Options,
) -> Result<A4Report, MelnikovError> {
    let j0 = SQRT_2;
    let field = GainField::new(model, hom1, hom2, j0, l)?;
    let (sup1, b1) = supremum(model, &field, Branch::One, theta0, opts.grid);
    let (sup2, b2) = supremum(model, &field, Branch::Two, theta0, opts.grid);
    let raw = sup1.value - sup2.value;
    let resolution = 1e-9 * (1.0 + sup1.value.abs().max(sup2.value.abs())) + b1 + b2;
    let leading = if raw >= 0.0 { Branch::One } else { Branch::Two };
    let (sl, st) = match leading {
        Branch::One => (sup1, sup2),
        Branch::Two => (sup2, sup1),
    };
    let mut report = A4Report {
        status: A4Status::Indeterminate,
        theta0: theta0.to_vec(),
        l,
        domain: A4_DOMAIN,
        sup1,
        sup2,
        margin: 0.0,
        raw_difference: raw,
        resolution,
        leading_branch: leading,
        delta: 0.0,
        phi_star: sl.argmax,
        phi_trailing: st.argmax,
        flow_box: None,
        box_margin: None,
        action_margins: Vec::new(),
        flow_box_full: None,
    };
    if raw.abs() <= resolution {
        return Err(MelnikovError::A4Indeterminate(Box::new(report)));
    }
    let margin = raw.abs();
    let delta = margin / 4.0;
    report.margin = margin;
    report.delta = delta;
    report.status = A4Status::Holds;

    let check_phis = grid(opts.phi_check_points);
    let fields: Vec<GainField> = opts
        .actions
        .iter()
        .map(|&j| GainField::new(model, hom1, hom2, j, l))
        .collect::<Result<_, _>>()?;
    let tables: Vec<(Moments, Vec<Moments>)> = fields
        .par_iter()
        .map(|f| {
            let lead = f.moments(model, leading, sl.argmax);
            let trail = check_phis
                .iter()
                .map(|&p| f.moments(model, leading.other(), p))
                .collect();
            (lead, trail)
        })
        .collect();
    let margin_at = |idx: usize, theta: &[f64]| -> f64 {
        let rates = weight_rates(model, theta);
        let (lead, trail) = &tables[idx];
        let g = lead.contract(&rates).0;
        trail
            .iter()
            .map(|m| g - m.contract(&rates).0)
            .fold(f64::INFINITY, f64::min)
    };
    let lead0 = field.moments(model, leading, sl.argmax);
    let trail0: Vec<Moments> = grid(opts.grid)
        .iter()
        .map(|&p| field.moments(model, leading.other(), p))
        .collect();

    // Dyadic candidates by decreasing volume; thin slabs with wide disks are allowed.
    let d = theta0.len() as i32;
    let mut sizes: Vec<(f64, f64)> = (0..8)
        .flat_map(|i| (0..8).map(move |k| (opts.rho0 / f64::from(1 << i), opts.sigma0 / f64::from(1 << k))))
        .collect();
    sizes.sort_by(|a, b| {
        let va = a.0 * a.1.powi(d - 1);
        let vb = b.0 * b.1.powi(d - 1);
        vb.total_cmp(&va).then(b.1.total_cmp(&a.1))
    });
    let mut rho = opts.rho0;
    for (r, sig) in sizes {
        rho = r;
        let fbox = match model.external.build_flow_box(theta0, r, sig) {
            Ok(b) => b,
            Err(ExtFlowError::ShrinkRequired { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let pts = fbox.samples(opts.box_disk_points, opts.box_time_points, 1.0);
        // The margin inequality at J₀ on the full φ grid, then the action extension.
        let box_margin = pts
            .par_iter()
            .map(|th| {
                let r = weight_rates(model, th);
                let g = lead0.contract(&r).0;
                trail0
                    .iter()
                    .map(|m| g - m.contract(&r).0)
                    .fold(f64::INFINITY, f64::min)
            })
            .reduce(|| f64::INFINITY, f64::min);
        if box_margin < 2.0 * delta {
            continue;
        }
        let action_margins: Vec<ActionMargin> = opts
            .actions
            .iter()
            .enumerate()
            .map(|(k, &j)| ActionMargin {
                action: j,
                margin: pts
                    .iter()
                    .map(|th| margin_at(k, th))
                    .fold(f64::INFINITY, f64::min),
            })
            .collect();
        if action_margins.iter().all(|m| m.margin >= delta) {
            report.flow_box = Some(FlowBoxSummary {
                center: fbox.center.clone(),
                normal: fbox.normal.clone(),
                rho: fbox.rho,
                sigma_radius: fbox.sigma_radius,
            });
            report.box_margin = Some(box_margin);
            report.action_margins = action_margins;
            report.flow_box_full = Some(fbox);
            return Ok(report);
        }
    }
    Err(MelnikovError::NoFlowBox { rho })
}

/// `G₁` of both branches on a `φ × θ` grid, as CSV `phi, theta0.., g1_branch1, g1_branch2`.
pub fn write_gain_grid<W: Write>(
    model: &Model,
    field: &GainField,
    phis: &[f64],
    thetas: &[Vec<f64>],
    w: W,
) -> Result<(), csv::Error> {
    let d = thetas.first().map(|t| t.len()).unwrap_or(0);
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["phi".to_string()];
    header.extend((0..d).map(|i| format!("theta{i}")));
    header.push("g1_branch1".into());
    header.push("g1_branch2".into());
    wr.write_record(&header)?;
    let rows: Vec<Vec<String>> = phis
        .par_iter()
        .flat_map_iter(|&p| {
            let m1 = field.moments(model, Branch::One, p);
            let m2 = field.moments(model, Branch::Two, p);
            thetas
                .iter()
                .map(|th| {
                    let r = weight_rates(model, th);
                    let mut row = vec![format!("{p:.17e}")];
                    row.extend(th.iter().map(|t| format!("{t:.17e}")));
                    row.push(format!("{:.17e}", m1.contract(&r).0));
                    row.push(format!("{:.17e}", m2.contract(&r).0));
                    row
                })
                .collect::<Vec<_>>()
        })
        .collect();
    for r in rows {
        wr.write_record(&r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Localized bump in configuration space and its θ-factor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BumpSpec {
    /// Center of the ball `B` in the flat period-1 chart.
    pub center: [f64; 2],
    /// Unit long axis.
    pub tangent: [f64; 2],
    pub r_short: f64,
    pub elongation: f64,
    /// Center of the ball `B′ ⊂ N`.
    pub theta0: Vec<f64>,
    /// Integer wave vector `m` of the θ-factor `sin(2π m·(θ − θ₀))`.
    pub mode: Vec<i32>,
    /// Lower bound for `D_X W` on `B ∩ γ¹ × B′`.
    pub rho: f64,
}

impl BumpSpec {
    fn bump(&self) -> EllipticBump<f64> {
        EllipticBump {
            center: self.center,
            tangent: self.tangent,
            r_long: self.r_short * self.elongation,
            r_short: self.r_short,
        }
    }
}

/// Point of `γ¹` at angle phase `φ` where its direction makes equal angles with both
/// coordinate axes, and the unit tangent there. On the torus this sits on the past half.
pub fn diagonal_point(hom: &HomoclinicData, phi: f64) -> ([f64; 2], [f64; 2]) {
    let mut best = (f64::INFINITY, 0usize);
    for (i, s) in hom.samples.iter().enumerate() {
        if s.sigma >= 0.0 {
            continue;
        }
        let v = velocity(hom, s.x, s.y);
        let r = (v[0].abs() - v[1].abs()).abs();
        if r < best.0 {
            best = (r, i);
        }
    }
    let s = hom.samples[best.1];
    let v = velocity(hom, s.x, s.y);
    let n = v[0].hypot(v[1]);
    ([wrap_unit(s.x[0]), wrap_unit(s.x[1] + phi)], [v[0] / n, v[1] / n])
}

fn velocity(hom: &HomoclinicData, x: [f64; 2], y: [f64; 2]) -> [f64; 2] {
    match hom.testbed {
        crate::invariant::Testbed::Torus { bulge } => {
            let f = crate::models::TorusProfile::new(bulge).expect("validated").radius(x[0]);
            [y[0], y[1] / (f * f)]
        }
        crate::invariant::Testbed::Pendulum => y,
    }
}

/// Adds `W(x, θ) = A·β(x)·sin(2π m·(θ − θ₀))` to the potential, with `β` a smooth bump on
/// `B` and `A` chosen so that `D_X W ≥ ρ` where `β = 1` and `cos(2π m·(θ − θ₀)) ≥ ½`.
/// The support must avoid the closed orbit and `γ²` at the phase where `B` meets `γ¹`.
pub fn bump_potential(
    model: &Model,
    hom1: &HomoclinicData,
    hom2: &HomoclinicData,
    spec: &BumpSpec,
    phi: f64,
) -> Result<Potential<f64>, MelnikovError> {
    if spec.rho == 0.0 {
        return Ok(model.potential.clone());
    }
    let b = spec.bump();
    let c0 = hom1.testbed.orbit_coordinate();
    for k in 0..2048 {
        let p = [c0, k as f64 / 2048.0];
        if b.in_support(&p) {
            return Err(MelnikovError::InvalidSupport(
                "bump meets the closed orbit".into(),
            ));
        }
    }
    for s in &hom2.samples {
        if b.in_support(&[s.x[0], s.x[1] + phi]) {
            return Err(MelnikovError::InvalidSupport(format!(
                "bump meets the second homoclinic at sigma = {:.4}",
                s.sigma
            )));
        }
    }
    if !hom1.samples.iter().any(|s| b.in_support(&[s.x[0], s.x[1] + phi])) {
        return Err(MelnikovError::InvalidSupport(
            "bump misses the first homoclinic".into(),
        ));
    }
    let x = model.external.field_vec(&spec.theta0);
    let mx: f64 = spec.mode.iter().zip(&x).map(|(m, v)| *m as f64 * v).sum();
    if mx.abs() < 1e-9 {
        return Err(MelnikovError::InvalidSupport(
            "wave vector is orthogonal to the external flow".into(),
        ));
    }
    let mt: f64 = spec
        .mode
        .iter()
        .zip(&spec.theta0)
        .map(|(m, t)| *m as f64 * t)
        .sum();
    // sin(2π m·(θ − θ₀)) written as cos(2π m·θ − 2π m·θ₀ − π/2).
    let amp = spec.rho / (PI * mx);
    let weight = Weight {
        constant: 0.0,
        modes: vec![FourierMode {
            amp,
            k: spec.mode.clone(),
            phase: -2.0 * PI * mt - PI / 2.0,
        }],
    };
    let mut out = model.potential.clone();
    out.terms.push(PotentialTerm {
        coef: 1.0,
        spatial: Spatial::Bump(b),
        weight,
    });
    Ok(out)
}

/// Default bump: short radius `0.04`, elongation 3, centered where `γ¹` crosses the
/// diagonal direction at the phase of the current branch-1 maximizer.
pub fn default_bump(
    model: &Model,
    hom1: &HomoclinicData,
    hom2: &HomoclinicData,
    theta0: &[f64],
    l: f64,
    rho: f64,
) -> Result<(BumpSpec, f64), MelnikovError> {
    let h1 = hom1.at_energy(1.0)?;
    let field = GainField::new(model, hom1, hom2, SQRT_2, l)?;
    let (sup, _) = supremum(model, &field, Branch::One, theta0, 512);
    let (center, tangent) = diagonal_point(&h1, sup.argmax);
    let mut mode = vec![0; theta0.len()];
    mode[0] = 1;
    Ok((
        BumpSpec {
            center,
            tangent,
            r_short: 0.04,
            elongation: 3.0,
            theta0: theta0.to_vec(),
            mode,
            rho,
        },
        sup.argmax,
    ))
}

/// Energy change of the slow-fast flow along one scattering event, compared with `ε³Δ₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyChange {
    pub epsilon: f64,
    pub half_span: f64,
    /// Change along the homoclinic minus the changes along the two footpoint orbits.
    pub numeric: f64,
    pub predicted: f64,
}

impl EnergyChange {
    pub fn remainder(&self) -> f64 {
        (self.numeric - self.predicted).abs()
    }
}

/// Integrates the scaled flow from the homoclinic point at `σ = 0` forward and backward over
/// `T = κ|ln ε|/rate`, with `θ(0) = θ₀`, and subtracts the energy changes of the flow
/// started on the closed orbit at the past and future footpoints.
pub fn energy_change_numeric(
    model: &Model,
    hom: &HomoclinicData,
    phi: f64,
    theta0: &[f64],
    eps: f64,
    kappa: f64,
) -> Result<EnergyChange, MelnikovError> {
    let j = hom.action;
    let t = kappa * eps.ln().abs() / hom.decay_rate;
    let s = phi / j;
    let cfg = IntegratorConfig::with_tol(1e-13);
    let solver = Solver::new(cfg);
    let run = |start: [f64; 4], dir: f64| -> Result<f64, MelnikovError> {
        let mut y0 = start.to_vec();
        y0.extend_from_slice(theta0);
        let h = |y: &[f64]| -> Result<f64, MelnikovError> {
            Ok(model.eval_h_eps(&ScaledState {
                q: [y[0], y[1]],
                p: [y[2], y[3]],
                theta: y[4..].to_vec(),
                s: 0.0,
                epsilon: eps,
            })?)
        };
        let h0 = h(&y0)?;
        let y1 = solver.run_to(|_, u, du| scaled_rhs(model, eps, u, du), 0.0, &y0, dir * t)?;
        Ok(h(&y1)? - h0)
    };
    let g = hom.point_at(0.0, s)?;
    let start = [g.x[0], g.x[1], g.y[0], g.y[1]];
    let fwd = run(start, 1.0)?;
    let bwd = run(start, -1.0)?;
    let c0 = hom.testbed.orbit_coordinate();
    let past = [c0, phi, 0.0, j];
    let future = [c0, phi + hom.phase_shift, 0.0, j];
    let lam_bwd = run(past, -1.0)?;
    let lam_fwd = run(future, 1.0)?;
    let numeric = (fwd - lam_fwd) - (bwd - lam_bwd);
    let predicted = eps.powi(3) * delta1_angle(model, hom, j, phi, theta0)?.value;
    Ok(EnergyChange {
        epsilon: eps,
        half_span: t,
        numeric,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::find_homoclinics;

    #[test]
    fn primitive_matches_closed_form() {
        let sp = Spatial::Trig(vec![crate::models::Monomial {
            amp: 1.0,
            factors: [crate::models::Harmonic::One, crate::models::Harmonic::Sin(1)],
        }]);
        let p = OrbitPrimitive::new(&sp, 0.5);
        for a in [0.0, 0.137, 0.5, 1.3, -0.4] {
            let exact = (1.0 - (2.0 * PI * a).cos()) / (2.0 * PI);
            assert!((p.eval(a) - exact).abs() < 1e-12, "{a}");
        }
    }

    #[test]
    fn theta_independent_potential_gives_zero() {
        let m = Model::torus_default().with_potential(Potential::symmetric(Weight::constant(1.0)));
        let h = find_homoclinics(&m, 1.0, Branch::One).unwrap();
        let d = delta1(&m, &h, 1.0, 0.1, &[0.2, 0.3]).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn degenerate_block_rejected() {
        let m = Model::torus_default();
        let h = find_homoclinics(&m, 1.0, Branch::One).unwrap();
        let r = g1_angle(&m, &h, SQRT_2, 0.0, &[0.0, 0.0], h.phase_shift);
        assert!(matches!(r, Err(MelnikovError::InvalidBlock { .. })));
    }
}
