//! Pseudo-orbits built from elementary blocks (one scattering jump followed by inner
//! dynamics over the angle budget `L`), with the scaled-energy ledger advanced by the
//! leading-order gain `ε³G₁`.

use std::collections::HashMap;
use std::f64::consts::SQRT_2;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::extflow::{ExtFlowError, FlowBox};
use crate::integrate::{scaled_rhs, IntegratorConfig, Solver};
use crate::invariant::{Branch, HomoclinicData, InvariantError};
use crate::melnikov::{
    energy_change_numeric, homoclinic_moments, weight_rates, A4Report, InnerTable, MelnikovError, Moments,
};
use crate::models::{ScaledState, SystemModel};
use crate::scalar::wrap_unit;

type Model = SystemModel<f64>;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("state outside the scattering domain: {0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("scaled energy {h_eps} left the band at block {block}")]
    EpochOverflow { block: usize, h_eps: f64 },
    #[error("re-initialization requested at scaled energy {h_eps} < 2")]
    PrematureReinit { h_eps: f64 },
    #[error("epoch {epoch} did not reach the doubled energy within {blocks} blocks")]
    EpochStalled { epoch: usize, blocks: usize },
    #[error("epoch {epoch}: {source}")]
    InEpoch {
        epoch: usize,
        #[source]
        source: Box<SchedulerError>,
    },
    #[error("no losing block available at block {block}")]
    PathInfeasible { block: usize },
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    ExtFlow(#[from] ExtFlowError),
}

impl SchedulerError {
    /// Epoch a diffusion run failed in, when known.
    pub fn epoch(&self) -> Option<usize> {
        match self {
            SchedulerError::InEpoch { epoch, .. } | SchedulerError::EpochStalled { epoch, .. } => Some(*epoch),
            _ => None,
        }
    }
}

/// Scaled energies accepted as starting points of blocks.
pub const SCATTERING_BAND: (f64, f64) = (0.5, 2.5);

/// Point `(J, φ, θ)` of the cylinder times `N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockState {
    pub j: f64,
    pub phi: f64,
    pub theta: Vec<f64>,
}

impl BlockState {
    pub fn h_eps(&self) -> f64 {
        0.5 * self.j * self.j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildingBlock {
    pub branch: Branch,
    pub pre_state: BlockState,
    pub l: f64,
    pub scaled_duration: f64,
    pub g1: f64,
    pub predicted_gain: f64,
    pub remainder_bound: f64,
}

/// Leading-order gains of both branches, with homoclinic moments cached per angle.
#[derive(Debug, Clone)]
pub struct GainModel {
    model: Model,
    hom: [HomoclinicData; 2],
    inner: InnerTable,
    a: f64,
    homogeneous: bool,
    cache: HashMap<(u8, u64, u64), Moments>,
}

impl GainModel {
    pub fn new(model: &Model, hom1: &HomoclinicData, hom2: &HomoclinicData) -> Result<Self, SchedulerError> {
        let h1 = hom1.at_energy(1.0)?;
        let h2 = hom2.at_energy(1.0)?;
        Ok(Self {
            inner: InnerTable::new(model, &h1),
            a: h1.phase_shift,
            homogeneous: h1.testbed.is_homogeneous(),
            model: model.clone(),
            hom: [h1, h2],
            cache: HashMap::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn phase_shift(&self) -> f64 {
        self.a
    }

    pub fn homoclinic(&self, b: Branch) -> &HomoclinicData {
        &self.hom[(b.index() - 1) as usize]
    }

    fn hom_moments(&mut self, b: Branch, j: f64, phi: f64) -> Result<Moments, SchedulerError> {
        // Homogeneous metrics: every action is the unit-energy data scaled by √2/J.
        let key_j = if self.homogeneous { SQRT_2 } else { j };
        let key = (b.index(), phi.to_bits(), key_j.to_bits());
        if !self.cache.contains_key(&key) {
            let h = self.homoclinic(b);
            let m = if self.homogeneous {
                homoclinic_moments(&self.model, h, phi)
            } else {
                homoclinic_moments(&self.model, &h.at_energy(0.5 * j * j)?, phi)
            };
            if self.cache.len() > 4096 {
                self.cache.clear();
            }
            self.cache.insert(key, m);
        }
        let m = self.cache[&key].clone();
        if self.homogeneous {
            let f = SQRT_2 / j;
            Ok(Moments {
                full: m.full.iter().map(|v| v * f).collect(),
                half: m.half.iter().map(|v| v * f).collect(),
            })
        } else {
            Ok(m)
        }
    }

    /// `(G₁, truncation bound)` of the block `(b, J, φ, θ, L)`.
    pub fn gain(&mut self, b: Branch, j: f64, phi: f64, l: f64, theta: &[f64]) -> Result<(f64, f64), SchedulerError> {
        let mut m = self.hom_moments(b, j, phi)?;
        let inner = self.inner.moments(j, phi, self.a, l);
        for (k, v) in inner.iter().enumerate() {
            m.full[k] += v;
            m.half[k] += v;
        }
        Ok(m.contract(&weight_rates(&self.model, theta)))
    }
}

/// Shortest budget `L ≥ a + 1` that lands exactly on the target angle.
pub fn retarget(phi: f64, target: f64, a: f64) -> f64 {
    let l_min = a + 1.0;
    l_min + wrap_unit(target - phi - l_min)
}

/// Remainder model `C·ε⁴|ln ε|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemainderModel {
    pub c: f64,
}

impl RemainderModel {
    pub fn bound(&self, eps: f64) -> f64 {
        self.c * eps.powi(4) * eps.ln().abs()
    }
}

impl Default for RemainderModel {
    fn default() -> Self {
        Self { c: DEFAULT_REMAINDER_C }
    }
}

/// Calibrated on the default torus model at `ε = 0.1` (see `calibrate_remainder`).
pub const DEFAULT_REMAINDER_C: f64 = 6.0;

/// Block with its gain from `G₁` and the remainder bound.
pub fn make_block(
    gains: &mut GainModel,
    branch: Branch,
    state: &BlockState,
    l: f64,
    eps: f64,
    rem: &RemainderModel,
) -> Result<BuildingBlock, SchedulerError> {
    let h = state.h_eps();
    if !(h >= SCATTERING_BAND.0 && h <= SCATTERING_BAND.1) || !state.phi.is_finite() {
        return Err(SchedulerError::Domain(format!(
            "scaled energy {h} outside [{}, {}]",
            SCATTERING_BAND.0, SCATTERING_BAND.1
        )));
    }
    if state.theta.len() != gains.model.theta_dim() {
        return Err(SchedulerError::Domain("θ has the wrong dimension".into()));
    }
    let a = gains.a;
    if !(l > a) {
        return Err(MelnikovError::InvalidBlock { l, a }.into());
    }
    let (g, _) = gains.gain(branch, state.j, state.phi, l, &state.theta)?;
    Ok(BuildingBlock {
        branch,
        pre_state: state.clone(),
        l,
        scaled_duration: (l - a) / state.j,
        g1: g,
        predicted_gain: eps.powi(3) * g,
        remainder_bound: rem.bound(eps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    TwoMap,
    SingleMap,
    EnergyPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub h_eps: f64,
    pub h_physical: f64,
    pub t_physical: f64,
}

/// Ordered blocks of one epoch with the energy ledger. `ledger[n]` and `theta_path[n]`
/// describe the state before block `n`; the last entries are the final state.
#[derive(Debug, Clone, Serialize)]
pub struct Schedule {
    pub policy: Policy,
    pub epsilon: f64,
    pub blocks: Vec<BuildingBlock>,
    pub ledger: Vec<LedgerEntry>,
    pub theta_path: Vec<Vec<f64>>,
    pub final_state: BlockState,
    /// Set when the scaled energy reached 2 and the schedule stopped early.
    pub reached_ceiling: bool,
}

impl Schedule {
    fn start(policy: Policy, eps: f64, state: &BlockState, t0: f64) -> Self {
        Self {
            policy,
            epsilon: eps,
            blocks: Vec::new(),
            ledger: vec![LedgerEntry {
                h_eps: state.h_eps(),
                h_physical: state.h_eps() / (eps * eps),
                t_physical: t0,
            }],
            theta_path: vec![state.theta.clone()],
            final_state: state.clone(),
            reached_ceiling: false,
        }
    }

    pub fn net_gain(&self) -> f64 {
        self.ledger.last().map(|l| l.h_eps).unwrap_or(0.0) - self.ledger[0].h_eps
    }

    /// Sum of the predicted gains; equals the ledger change by construction.
    pub fn predicted_total(&self) -> f64 {
        self.blocks.iter().map(|b| b.predicted_gain).sum()
    }

    /// Number of branch switches.
    pub fn transitions(&self) -> usize {
        self.blocks.windows(2).filter(|w| w[0].branch != w[1].branch).count()
    }

    /// Total scaled time.
    pub fn scaled_time(&self) -> f64 {
        self.blocks.iter().map(|b| b.scaled_duration).sum()
    }

    /// CSV `block, branch, J, phi, theta.., H_eps, H_physical, t_physical`; the final
    /// row carries the state after the last block with an empty branch.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.final_state.theta.len();
        let mut header: Vec<String> = ["block", "branch", "J", "phi"].iter().map(|s| s.to_string()).collect();
        header.extend((0..d).map(|i| format!("theta{i}")));
        header.extend(["H_eps", "H_physical", "t_physical"].iter().map(|s| s.to_string()));
        wr.write_record(&header)?;
        let f = |v: f64| format!("{v:.17e}");
        for (n, entry) in self.ledger.iter().enumerate() {
            let (branch, st) = match self.blocks.get(n) {
                Some(b) => (b.branch.index().to_string(), &b.pre_state),
                None => (String::new(), &self.final_state),
            };
            let mut row = vec![n.to_string(), branch, f(st.j), f(st.phi)];
            row.extend(st.theta.iter().map(|t| f(*t)));
            row.extend([f(entry.h_eps), f(entry.h_physical), f(entry.t_physical)]);
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Shared stepping: applies `block`, advances `θ` and the ledger, snaps `φ` to `target`.
fn push_block(
    sched: &mut Schedule,
    gains: &GainModel,
    block: BuildingBlock,
    target: f64,
) -> Result<(), SchedulerError> {
    let eps = sched.epsilon;
    let st = &block.pre_state;
    let theta = gains.model.external.advance(&st.theta, eps * block.scaled_duration)?;
    let h = st.h_eps() + block.predicted_gain;
    if !(h > 0.0) {
        return Err(SchedulerError::EpochOverflow {
            block: sched.blocks.len(),
            h_eps: h,
        });
    }
    let next = BlockState {
        j: (2.0 * h).sqrt(),
        phi: target,
        theta: theta.clone(),
    };
    let t = sched.ledger.last().expect("ledger starts non-empty").t_physical + eps * block.scaled_duration;
    sched.ledger.push(LedgerEntry {
        h_eps: h,
        h_physical: h / (eps * eps),
        t_physical: t,
    });
    sched.theta_path.push(theta);
    sched.blocks.push(block);
    sched.final_state = next;
    Ok(())
}

/// Targets of the two-map policy.
#[derive(Debug, Clone)]
pub struct TwoMapPlan {
    pub lead: Branch,
    pub phi_star: f64,
    pub phi_trailing: f64,
    pub flow_box: FlowBox<f64>,
}

impl TwoMapPlan {
    pub fn from_report(report: &A4Report) -> Result<Self, SchedulerError> {
        if !(report.margin > 0.0) {
            return Err(SchedulerError::Precondition(
                "the genericity margin is not positive".into(),
            ));
        }
        let fb = report
            .flow_box_full
            .clone()
            .ok_or_else(|| SchedulerError::Precondition("report carries no flow box".into()))?;
        Ok(Self {
            lead: report.leading_branch,
            phi_star: report.phi_star,
            phi_trailing: report.phi_trailing,
            flow_box: fb,
        })
    }

    fn choose(&self, theta: &[f64]) -> (Branch, f64) {
        if self.flow_box.contains(theta) {
            (self.lead, self.phi_star)
        } else {
            (self.lead.other(), self.phi_trailing)
        }
    }
}

/// When a run of blocks ends.
#[derive(Debug, Clone, Copy)]
struct Stop {
    max_blocks: usize,
    at_ceiling: bool,
    t_end: f64,
}

impl Stop {
    fn blocks(n: usize) -> Self {
        Self {
            max_blocks: n,
            at_ceiling: false,
            t_end: f64::INFINITY,
        }
    }
}

/// Common driver. `decide(gains, θ, sched, t)` names the branch and angle of the block that
/// starts at `θ` and physical time `t`, right after the block leaving `sched.final_state`;
/// `None` ends the run.
#[allow(clippy::too_many_arguments)]
fn run_policy<D>(
    gains: &mut GainModel,
    policy: Policy,
    eps: f64,
    start: &BlockState,
    first: (Branch, f64),
    stop: Stop,
    t0: f64,
    rem: &RemainderModel,
    mut decide: D,
) -> Result<Schedule, SchedulerError>
where
    D: FnMut(&mut GainModel, &[f64], &Schedule, f64) -> Result<Option<(Branch, f64)>, SchedulerError>,
{
    let mut sched = Schedule::start(policy, eps, start, t0);
    let mut state = start.clone();
    let mut current = first;
    let mut t = t0;
    let a = gains.a;
    for n in 0..stop.max_blocks {
        if t >= stop.t_end {
            break;
        }
        // Two passes: guess the next block's targets from θ after a stay-put budget, then
        // re-decide with the budget that actually reaches them.
        let l1 = retarget(state.phi, current.1, a);
        let dt1 = eps * (l1 - a) / state.j;
        let th1 = gains.model.external.advance(&state.theta, dt1)?;
        let Some(mut next) = decide(gains, &th1, &sched, t + dt1)? else {
            break;
        };
        let mut l = retarget(state.phi, next.1, a);
        if l != l1 {
            let dt2 = eps * (l - a) / state.j;
            let th2 = gains.model.external.advance(&state.theta, dt2)?;
            let again = decide(gains, &th2, &sched, t + dt2)?.unwrap_or(next);
            if again != next {
                next = again;
                l = retarget(state.phi, next.1, a);
            }
        }
        let block = make_block(gains, current.0, &state, l, eps, rem)?;
        push_block(&mut sched, gains, block, next.1)?;
        state = sched.final_state.clone();
        t = sched.ledger.last().expect("non-empty").t_physical;
        current = next;
        let h = state.h_eps();
        if h > SCATTERING_BAND.1 || h < SCATTERING_BAND.0 {
            return Err(SchedulerError::EpochOverflow { block: n, h_eps: h });
        }
        if stop.at_ceiling && h >= 2.0 {
            sched.reached_ceiling = true;
            break;
        }
    }
    Ok(sched)
}

/// Two-map policy: branch `lead` at `φ_*` while `θ ∈ 𝒫`, the trailing branch at its own
/// maximizer otherwise, for `n_blocks` blocks (or until `H_ε = 2` when `stop_at_ceiling`).
pub fn schedule_two_map(
    gains: &mut GainModel,
    plan: &TwoMapPlan,
    eps: f64,
    start: &BlockState,
    n_blocks: usize,
    stop_at_ceiling: bool,
    rem: &RemainderModel,
) -> Result<Schedule, SchedulerError> {
    let first = plan.choose(&start.theta);
    let first = (first.0, start.phi);
    run_policy(
        gains,
        Policy::TwoMap,
        eps,
        start,
        first,
        Stop {
            max_blocks: n_blocks,
            at_ceiling: stop_at_ceiling,
            t_end: f64::INFINITY,
        },
        0.0,
        rem,
        |_, th, _, _| Ok(Some(plan.choose(th))),
    )
}

/// One branch at one constant angle throughout.
pub fn schedule_single_map(
    gains: &mut GainModel,
    branch: Branch,
    eps: f64,
    start: &BlockState,
    n_blocks: usize,
    rem: &RemainderModel,
) -> Result<Schedule, SchedulerError> {
    let phi0 = start.phi;
    run_policy(
        gains,
        Policy::SingleMap,
        eps,
        start,
        (branch, phi0),
        Stop::blocks(n_blocks),
        0.0,
        rem,
        |_, _, _, _| Ok(Some((branch, phi0))),
    )
}

/// Starting point of the next epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStart {
    pub epsilon: f64,
    pub state: BlockState,
    pub h_physical: f64,
    pub t_physical: f64,
}

/// `ε ↦ ε/√2` with the physical state carried over; the scaled energy halves.
pub fn reinitialize(sched: &Schedule) -> Result<EpochStart, SchedulerError> {
    let last = sched.ledger.last().expect("ledger starts non-empty");
    if last.h_eps < 2.0 {
        return Err(SchedulerError::PrematureReinit { h_eps: last.h_eps });
    }
    let eps = sched.epsilon / SQRT_2;
    let h = last.h_physical * eps * eps;
    Ok(EpochStart {
        epsilon: eps,
        state: BlockState {
            j: (2.0 * h).sqrt(),
            phi: sched.final_state.phi,
            theta: sched.final_state.theta.clone(),
        },
        h_physical: h / (eps * eps),
        t_physical: last.t_physical,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub index: usize,
    pub epsilon: f64,
    pub blocks: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub h_start: f64,
    pub h_end: f64,
    /// `(H_end − H_start)/(t_end − t_start)` in physical units.
    pub slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diffusion {
    pub epochs: Vec<EpochSummary>,
    /// `H ≥ A t + B` over all ledger points: least-squares slope, intercept lowered to a
    /// lower bound.
    pub slope_a: f64,
    pub intercept_b: f64,
    #[serde(skip)]
    pub schedules: Vec<Schedule>,
}

impl Diffusion {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Largest over smallest epoch slope.
    pub fn slope_spread(&self) -> f64 {
        let s: Vec<f64> = self.epochs.iter().map(|e| e.slope).collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = s.iter().cloned().fold(f64::INFINITY, f64::min);
        mx / mn
    }
}

/// `(A, B)` with `A` the least-squares slope and `B` the largest intercept such that
/// `H ≥ A t + B` at every point.
pub fn lower_linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (0.0, points.first().map(|p| p.1).unwrap_or(0.0));
    }
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mh = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - mh)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = points.iter().map(|p| p.1 - a * p.0).fold(f64::INFINITY, f64::min);
    (a, b)
}

/// Consecutive two-map epochs from `H_ε = 1` at `ε₀`, each ended at `H_ε = 2` and
/// re-initialized.
pub fn run_diffusion(
    gains: &mut GainModel,
    plan: &TwoMapPlan,
    eps0: f64,
    start: &BlockState,
    epochs: usize,
    max_blocks: usize,
    rem: &RemainderModel,
) -> Result<Diffusion, SchedulerError> {
    let mut eps = eps0;
    let mut state = start.clone();
    let mut t0 = 0.0;
    let mut out = Vec::new();
    let mut schedules = Vec::new();
    for k in 0..epochs {
        let first = (plan.choose(&state.theta).0, state.phi);
        let sched = run_policy(
            gains,
            Policy::TwoMap,
            eps,
            &state,
            first,
            Stop {
                max_blocks,
                at_ceiling: true,
                t_end: f64::INFINITY,
            },
            t0,
            rem,
            |_, th, _, _| Ok(Some(plan.choose(th))),
        )
        .map_err(|e| SchedulerError::InEpoch {
            epoch: k,
            source: Box::new(e),
        })?;
        if !sched.reached_ceiling {
            return Err(SchedulerError::EpochStalled {
                epoch: k,
                blocks: max_blocks,
            });
        }
        let first_l = sched.ledger[0];
        let last = *sched.ledger.last().expect("non-empty");
        out.push(EpochSummary {
            index: k,
            epsilon: eps,
            blocks: sched.blocks.len(),
            t_start: first_l.t_physical,
            t_end: last.t_physical,
            h_start: first_l.h_physical,
            h_end: last.h_physical,
            slope: (last.h_physical - first_l.h_physical) / (last.t_physical - first_l.t_physical),
        });
        let next = reinitialize(&sched)?;
        eps = next.epsilon;
        state = next.state;
        t0 = next.t_physical;
        schedules.push(sched);
    }
    let pts: Vec<(f64, f64)> = schedules
        .iter()
        .flat_map(|s| s.ledger.iter().map(|l| (l.t_physical, l.h_physical)))
        .collect();
    let (a, b) = lower_linear_fit(&pts);
    Ok(Diffusion {
        epochs: out,
        slope_a: a,
        intercept_b: b,
        schedules,
    })
}

/// Piecewise-linear physical-energy target on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub slope_bound: f64,
    pub floor: f64,
}

impl EnergyPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>, slope_bound: f64, floor: f64) -> Result<Self, SchedulerError> {
        if times.len() != values.len() || times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SchedulerError::Precondition(
                "energy path needs at least two samples on increasing times".into(),
            ));
        }
        for w in times.windows(2).zip(values.windows(2)) {
            let s = (w.1[1] - w.1[0]) / (w.0[1] - w.0[0]);
            if s.abs() > slope_bound * (1.0 + 1e-12) {
                return Err(SchedulerError::Precondition(format!(
                    "path slope {s} exceeds the bound {slope_bound}"
                )));
            }
        }
        if values.iter().any(|v| *v < floor) {
            return Err(SchedulerError::Precondition("path falls below its floor".into()));
        }
        Ok(Self {
            times,
            values,
            slope_bound,
            floor,
        })
    }

    pub fn constant(e: f64, t_end: f64) -> Self {
        Self {
            times: vec![0.0, t_end],
            values: vec![e, e],
            slope_bound: 0.0,
            floor: e,
        }
    }

    pub fn ramp(e0: f64, slope: f64, t_end: f64) -> Self {
        Self {
            times: vec![0.0, t_end],
            values: vec![e0, e0 + slope * t_end],
            slope_bound: slope.abs(),
            floor: e0,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let u = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] + u * (self.values[i + 1] - self.values[i])
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathTracking {
    pub schedules: Vec<Schedule>,
    /// Path time `𝒯⁻¹` at every ledger entry, epoch by epoch.
    pub path_times: Vec<Vec<f64>>,
    /// `max |H − 𝓔(τ)|·√𝓔(τ)` over block boundaries.
    pub measured_d: f64,
    /// `2√2·G_max` with `G_max` the largest `|G₁|` on the decision grid.
    pub d_bound: f64,
    pub max_rate: f64,
}

/// Achievable mean physical gain rate along the θ-orbit, from the best block at each step.
pub fn max_gain_rate(gains: &mut GainModel, theta0: &[f64], phis: &[f64], samples: usize, dt: f64) -> Result<(f64, f64), SchedulerError> {
    let a = gains.a;
    let mut total = 0.0;
    let mut gmax: f64 = 0.0;
    let mut th = theta0.to_vec();
    for _ in 0..samples {
        let mut best = f64::NEG_INFINITY;
        for b in [Branch::One, Branch::Two] {
            for &p in phis {
                let (g, _) = gains.gain(b, SQRT_2, p, retarget(p, p, a), &th)?;
                best = best.max(g);
                gmax = gmax.max(g.abs());
            }
        }
        total += best.max(0.0);
        th = gains.model.external.advance(&th, dt)?;
    }
    // Physical gain εG per block of physical duration ε(L − a)/J.
    let stay = retarget(0.0, 0.0, a) - a;
    Ok((SQRT_2 * total / (samples as f64 * stay), gmax))
}

/// Path time after the block `prev → cur`: held when the block moved away from the target
/// by more than it could have closed.
fn advance_path_time(path: &EnergyPath, tau: f64, prev: &LedgerEntry, cur: &LedgerEntry) -> f64 {
    let dt = cur.t_physical - prev.t_physical;
    let before = (prev.h_physical - path.at(tau)).abs();
    let after = (cur.h_physical - path.at(tau + dt)).abs();
    if after <= before || (cur.h_physical - prev.h_physical).abs() >= before {
        tau + dt
    } else {
        tau
    }
}

/// Greedy tracking of a physical-energy path: gaining blocks below the target, losing
/// blocks above, over a grid of angles for both branches; epochs re-initialize at `H_ε = 2`.
///
/// The path is followed up to a time reparametrization: path time `τ` advances with physical
/// time except after a block that moved the energy away from the target, when it is held.
pub fn schedule_energy_path(
    gains: &mut GainModel,
    eps0: f64,
    start: &BlockState,
    path: &EnergyPath,
    grid_points: usize,
    max_rate: f64,
    rem: &RemainderModel,
) -> Result<PathTracking, SchedulerError> {
    if path.slope_bound > max_rate {
        return Err(SchedulerError::Precondition(format!(
            "path slope bound {} exceeds the achievable rate {max_rate}",
            path.slope_bound
        )));
    }
    let phis: Vec<f64> = (0..grid_points).map(|i| i as f64 / grid_points as f64).collect();
    let a = gains.a;
    let stay = retarget(0.0, 0.0, a) - a;
    let mut gmax: f64 = 0.0;
    let mut eps = eps0;
    let mut state = start.clone();
    let mut t0 = 0.0;
    let mut tau = 0.0;
    let mut schedules: Vec<Schedule> = Vec::new();
    let mut path_times: Vec<Vec<f64>> = Vec::new();
    let mut decisions = 0usize;
    let mut stall = 0usize;
    loop {
        let e = eps;
        // Two units of flow time of χ.
        let max_stall = (2.0 * state.j / (eps * stay)).ceil() as usize;
        let mut taus = vec![tau];
        let sched = run_policy(
            gains,
            Policy::EnergyPath,
            eps,
            &state,
            (Branch::One, state.phi),
            Stop {
                max_blocks: usize::MAX,
                at_ceiling: true,
                t_end: f64::INFINITY,
            },
            t0,
            rem,
            |g, th, so_far, t| {
                let n = so_far.ledger.len();
                if taus.len() < n {
                    tau = advance_path_time(path, tau, &so_far.ledger[n - 2], &so_far.ledger[n - 1]);
                    taus.push(tau);
                }
                if tau >= path.end_time() {
                    return Ok(None);
                }
                decisions += 1;
                let st = &so_far.final_state;
                let target = path.at(tau + (t - so_far.ledger[n - 1].t_physical));
                let want_gain = st.h_eps() / (e * e) < target;
                let mut best: Option<(f64, Branch, f64)> = None;
                for b in [Branch::One, Branch::Two] {
                    for &p in &phis {
                        let (v, _) = g.gain(b, st.j, p, retarget(p, p, a), th)?;
                        gmax = gmax.max(v.abs());
                        let score = if want_gain { v } else { -v };
                        if best.is_none_or(|(s, _, _)| score > s) {
                            best = Some((score, b, p));
                        }
                    }
                }
                let (score, b, p) = best.expect("grid is non-empty");
                // Above the target with no losing block here: take the least gaining one and
                // wait for the sign change along the θ-orbit.
                if !want_gain && score <= 0.0 {
                    stall += 1;
                    if stall > max_stall {
                        return Err(SchedulerError::PathInfeasible { block: decisions });
                    }
                } else {
                    stall = 0;
                }
                Ok(Some((b, p)))
            },
        )?;
        let n = sched.ledger.len();
        if taus.len() < n {
            tau = advance_path_time(path, tau, &sched.ledger[n - 2], &sched.ledger[n - 1]);
            taus.push(tau);
        }
        let reached = sched.reached_ceiling;
        schedules.push(sched);
        path_times.push(taus);
        if !reached {
            break;
        }
        let next = reinitialize(schedules.last().expect("pushed"))?;
        eps = next.epsilon;
        state = next.state;
        t0 = next.t_physical;
    }
    let mut measured: f64 = 0.0;
    for (sched, taus) in schedules.iter().zip(&path_times) {
        for (l, &tp) in sched.ledger.iter().zip(taus) {
            let target = path.at(tp);
            measured = measured.max((l.h_physical - target).abs() * target.sqrt());
        }
    }
    Ok(PathTracking {
        schedules,
        path_times,
        measured_d: measured,
        d_bound: 2.0 * SQRT_2 * gmax,
        max_rate,
    })
}

/// Numerically integrated energy change over one block against its prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockValidation {
    pub epsilon: f64,
    pub predicted: f64,
    pub numeric: f64,
    pub remainder_bound: f64,
}

impl BlockValidation {
    pub fn error(&self) -> f64 {
        (self.numeric - self.predicted).abs()
    }
}

/// Integrates the slow-fast flow along the homoclinic segment of length `2K|ln ε|/rate`
/// (net of the footpoint orbits) and along the inner segment of duration `(L − a)/J`.
pub fn validate_block(
    gains: &GainModel,
    block: &BuildingBlock,
    eps: f64,
    kappa: f64,
) -> Result<BlockValidation, SchedulerError> {
    let model = &gains.model;
    let st = &block.pre_state;
    let hom = gains.homoclinic(block.branch).at_energy(st.h_eps())?;
    let jump = energy_change_numeric(model, &hom, st.phi, &st.theta, eps, kappa)?;
    let c0 = hom.testbed.orbit_coordinate();
    let mut y0 = vec![c0, st.phi + hom.phase_shift, 0.0, st.j];
    y0.extend_from_slice(&st.theta);
    let h = |y: &[f64]| -> Result<f64, SchedulerError> {
        model
            .eval_h_eps(&ScaledState {
                q: [y[0], y[1]],
                p: [y[2], y[3]],
                theta: y[4..].to_vec(),
                s: 0.0,
                epsilon: eps,
            })
            .map_err(|e| SchedulerError::Melnikov(e.into()))
    };
    let y1 = Solver::new(IntegratorConfig::with_tol(1e-13))
        .run_to(|_, u, du| scaled_rhs(model, eps, u, du), 0.0, &y0, block.scaled_duration)
        .map_err(|e| SchedulerError::Melnikov(e.into()))?;
    let inner = h(&y1)? - h(&y0)?;
    Ok(BlockValidation {
        epsilon: eps,
        predicted: eps.powi(3) * block.g1,
        numeric: jump.numeric + inner,
        remainder_bound: block.remainder_bound,
    })
}

/// Random blocks `(branch, φ, θ)` at `J = √2` with the default budget.
pub fn random_blocks(
    gains: &mut GainModel,
    n: usize,
    eps: f64,
    seed: u64,
    rem: &RemainderModel,
) -> Result<Vec<BuildingBlock>, SchedulerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = gains.model.theta_dim();
    let a = gains.a;
    (0..n)
        .map(|_| {
            let b = if rng.gen::<bool>() { Branch::One } else { Branch::Two };
            let st = BlockState {
                j: SQRT_2,
                phi: rng.gen::<f64>(),
                theta: (0..d).map(|_| rng.gen::<f64>()).collect(),
            };
            make_block(gains, b, &st, a + 1.0, eps, rem)
        })
        .collect()
}

/// `C = 1.5·max |numeric − predicted| / (ε⁴|ln ε|)` over the given blocks.
pub fn calibrate_remainder(
    gains: &GainModel,
    blocks: &[BuildingBlock],
    eps: f64,
    kappa: f64,
) -> Result<RemainderModel, SchedulerError> {
    let mut worst: f64 = 0.0;
    for b in blocks {
        worst = worst.max(validate_block(gains, b, eps, kappa)?.error());
    }
    Ok(RemainderModel {
        c: 1.5 * worst / (eps.powi(4) * eps.ln().abs()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retarget_lands_on_target() {
        let a = -0.742;
        for (phi, target) in [(0.1, 0.3), (0.9, 0.05), (0.37, 0.37)] {
            let l = retarget(phi, target, a);
            assert!(l >= a + 1.0 && l < a + 2.0);
            assert!((wrap_unit(phi + l) - target).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_is_a_lower_bound() {
        let pts = [(0.0, 1.0), (1.0, 2.5), (2.0, 2.9), (3.0, 4.2)];
        let (a, b) = lower_linear_fit(&pts);
        assert!(a > 0.0);
        assert!(pts.iter().all(|p| p.1 >= a * p.0 + b - 1e-12));
    }
}
