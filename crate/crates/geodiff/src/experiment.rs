//! Pipeline stages driven by a [`RunConfig`]: each writes its CSV and JSON files into an
//! output directory and returns what it found.

use std::f64::consts::SQRT_2;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, PolicyName, RunConfig};
use crate::extflow::RecurrenceStatus;
use crate::invariant::{find_homoclinics, Branch, HomoclinicData};
use crate::melnikov::{
    bump_potential, check_a4, default_bump, write_gain_grid, A4Report, A4Status, GainField, MelnikovError,
};
use crate::models::SystemModel;
use crate::scheduler::{
    lower_linear_fit, random_blocks, run_diffusion, schedule_single_map, validate_block, BlockState,
    BlockValidation, EpochSummary, GainModel, Policy, RemainderModel, Schedule, SchedulerError, TwoMapPlan,
};
use crate::windows::{
    assemble_chain, choose_constants, measure_inputs, ChainOptions, ReducedMap, Stage, WindowsError,
};

type Model = SystemModel<f64>;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("condition A4 indeterminate: margin {margin:e} within resolution {resolution:e}")]
    A4Indeterminate { margin: f64, resolution: f64 },
    #[error("epoch {epoch} failed: {message}")]
    Epoch { epoch: usize, message: String },
    #[error("link {link} not certified at the {stage} stage: {message}")]
    Link { link: usize, stage: Stage, message: String },
    #[error("shadow orbit does not visit every window: {0}")]
    Shadow(String),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Windows(#[from] WindowsError),
}

/// Writes `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, ExperimentError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &target).map_err(io_err(&target))?;
    Ok(target)
}

fn csv_bytes<F: FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>>(f: F) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing CSV to memory");
    buf
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Model with the optional bump, both homoclinic branches at `E = 1` and the budget `L`.
pub struct Context {
    pub model: Model,
    pub hom1: HomoclinicData,
    pub hom2: HomoclinicData,
    pub budget: f64,
}

impl Context {
    pub fn new(cfg: &RunConfig) -> Result<Self, ExperimentError> {
        let base = cfg.base_model()?;
        let hom1 = find_homoclinics(&base, 1.0, Branch::One).map_err(MelnikovError::from)?;
        let hom2 = find_homoclinics(&base, 1.0, Branch::Two).map_err(MelnikovError::from)?;
        let budget = cfg.melnikov.budget.unwrap_or(hom1.phase_shift + 1.0);
        let rho = cfg.model.potential.bump_rho;
        let model = if rho > 0.0 {
            let (spec, phi) = default_bump(&base, &hom1, &hom2, &cfg.flow.theta0, budget, rho)?;
            base.with_potential(bump_potential(&base, &hom1, &hom2, &spec, phi)?)
        } else {
            base
        };
        Ok(Self {
            model,
            hom1,
            hom2,
            budget,
        })
    }

    pub fn homoclinic(&self, b: Branch) -> &HomoclinicData {
        match b {
            Branch::One => &self.hom1,
            Branch::Two => &self.hom2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecurrenceSummary {
    pub radius: f64,
    pub horizon: f64,
    pub status: RecurrenceStatus,
    pub max_gap: Option<f64>,
    pub visits: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MelnikovSummary {
    pub seed: u64,
    pub phase_shift: f64,
    pub budget: f64,
    pub recurrence: RecurrenceSummary,
    pub a4: A4Report,
}

impl MelnikovSummary {
    pub fn holds(&self) -> bool {
        self.a4.status == A4Status::Holds
    }
}

fn export_grid(n: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let off = if jitter > 0.0 { jitter * rng.gen::<f64>() } else { 0.0 };
            (i as f64 + off) / n as f64
        })
        .collect()
}

/// Recurrence profile, homoclinic branches, gain grid and the A4 report. An indeterminate
/// report is written and returned, not raised.
pub fn run_melnikov(cfg: &RunConfig, ctx: &Context, out: &Path) -> Result<MelnikovSummary, ExperimentError> {
    let model = &ctx.model;
    let th0 = &cfg.flow.theta0;
    let prof = model
        .external
        .recurrence_profile(th0, cfg.flow.recurrence_radius, cfg.flow.horizon, true)
        .map_err(MelnikovError::from)?;
    write_atomic(out, "recurrence.csv", &csv_bytes(|b| prof.write_csv(b)))?;
    for (b, name) in [(Branch::One, "homoclinic_1.csv"), (Branch::Two, "homoclinic_2.csv")] {
        write_atomic(out, name, &csv_bytes(|w| ctx.homoclinic(b).write_csv(w)))?;
    }

    let report = a4_report(cfg, ctx)?;

    let mk = &cfg.melnikov;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phis = export_grid(mk.export_phi, mk.jitter, &mut rng);
    let axis = export_grid(mk.export_theta, mk.jitter, &mut rng);
    let d = th0.len();
    let thetas: Vec<Vec<f64>> = (0..mk.export_theta.pow(d as u32))
        .map(|mut k| {
            (0..d)
                .map(|_| {
                    let v = axis[k % mk.export_theta];
                    k /= mk.export_theta;
                    v
                })
                .collect()
        })
        .collect();
    let field = GainField::new(model, &ctx.hom1, &ctx.hom2, SQRT_2, ctx.budget)?;
    write_atomic(
        out,
        "gain_grid.csv",
        &csv_bytes(|w| write_gain_grid(model, &field, &phis, &thetas, w)),
    )?;

    let summary = MelnikovSummary {
        seed: cfg.seed,
        phase_shift: ctx.hom1.phase_shift,
        budget: ctx.budget,
        recurrence: RecurrenceSummary {
            radius: cfg.flow.recurrence_radius,
            horizon: prof.horizon,
            status: prof.status,
            max_gap: prof.max_gap,
            visits: prof.intervals.len(),
        },
        a4: report,
    };
    write_atomic(out, "melnikov.json", &json_bytes(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffuseSummary {
    pub seed: u64,
    pub policy: Policy,
    pub epsilon0: f64,
    pub remainder_c: f64,
    pub epochs: Vec<EpochSummary>,
    /// Fitted `H ≥ A t + B` over every ledger point.
    pub slope_a: f64,
    pub intercept_b: f64,
    pub validation: Vec<BlockValidation>,
}

fn epoch_summary(index: usize, sched: &Schedule) -> EpochSummary {
    let first = sched.ledger[0];
    let last = *sched.ledger.last().expect("ledger starts non-empty");
    let dt = last.t_physical - first.t_physical;
    EpochSummary {
        index,
        epsilon: sched.epsilon,
        blocks: sched.blocks.len(),
        t_start: first.t_physical,
        t_end: last.t_physical,
        h_start: first.h_physical,
        h_end: last.h_physical,
        slope: if dt > 0.0 { (last.h_physical - first.h_physical) / dt } else { 0.0 },
    }
}

/// Epochs of the configured policy from `H_ε = 1`, one CSV per epoch and the fitted slopes.
/// The two-map policy needs a report in which A4 holds.
pub fn run_diffuse(
    cfg: &RunConfig,
    ctx: &Context,
    report: &A4Report,
    out: &Path,
) -> Result<DiffuseSummary, ExperimentError> {
    let s = &cfg.schedule;
    let eps0 = cfg.epsilon0();
    let rem = RemainderModel { c: s.remainder_c };
    let mut gains = GainModel::new(&ctx.model, &ctx.hom1, &ctx.hom2)?;
    let start = BlockState {
        j: SQRT_2,
        phi: report.phi_star,
        theta: cfg.flow.theta0.clone(),
    };
    let (policy, schedules, slope_a, intercept_b, epochs) = match s.policy {
        PolicyName::TwoMap => {
            if report.status != A4Status::Holds {
                return Err(ExperimentError::A4Indeterminate {
                    margin: report.margin,
                    resolution: report.resolution,
                });
            }
            let plan = TwoMapPlan::from_report(report)?;
            let d = run_diffusion(&mut gains, &plan, eps0, &start, s.epochs, s.max_blocks, &rem).map_err(|e| {
                match e.epoch() {
                    Some(epoch) => ExperimentError::Epoch {
                        epoch,
                        message: e.to_string(),
                    },
                    None => e.into(),
                }
            })?;
            (Policy::TwoMap, d.schedules, d.slope_a, d.intercept_b, d.epochs)
        }
        PolicyName::SingleMap => {
            let n = s
                .single_blocks
                .unwrap_or_else(|| (1.0 / (eps0 * eps0)).ceil() as usize);
            let sched = schedule_single_map(&mut gains, report.leading_branch, eps0, &start, n * s.epochs, &rem)
                .map_err(|e| ExperimentError::Epoch {
                    epoch: 0,
                    message: e.to_string(),
                })?;
            let pts: Vec<(f64, f64)> = sched.ledger.iter().map(|l| (l.t_physical, l.h_physical)).collect();
            let (a, b) = lower_linear_fit(&pts);
            let ep = vec![epoch_summary(0, &sched)];
            (Policy::SingleMap, vec![sched], a, b, ep)
        }
    };
    for (k, sched) in schedules.iter().enumerate() {
        write_atomic(out, &format!("schedule_epoch{k}.csv"), &csv_bytes(|w| sched.write_csv(w)))?;
    }

    let mut validation = Vec::new();
    if s.validate_blocks > 0 {
        let blocks = random_blocks(&mut gains, s.validate_blocks, eps0, cfg.seed, &rem)?;
        for b in &blocks {
            validation.push(validate_block(&gains, b, eps0, s.kappa)?);
        }
    }
    let summary = DiffuseSummary {
        seed: cfg.seed,
        policy,
        epsilon0: eps0,
        remainder_c: s.remainder_c,
        epochs,
        slope_a,
        intercept_b,
        validation,
    };
    write_atomic(out, "diffusion.json", &json_bytes(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowSummary {
    pub epsilon: f64,
    pub links: usize,
    pub windows: usize,
    pub certified: bool,
    pub visits: usize,
    pub min_margin: Option<f64>,
    pub point: Vec<f64>,
}

/// Chain of windows around a single-map schedule of `windows.blocks` blocks, its
/// certificates and the shadow point. Certificates are written before a failure is raised.
pub fn run_shadow(cfg: &RunConfig, ctx: &Context, out: &Path) -> Result<ShadowSummary, ExperimentError> {
    let w = &cfg.windows;
    let eps = w.epsilon;
    let branch = if w.branch == 1 { Branch::One } else { Branch::Two };
    let mut gains = GainModel::new(&ctx.model, &ctx.hom1, &ctx.hom2)?;
    let start = BlockState {
        j: SQRT_2,
        phi: w.phi,
        theta: cfg.flow.theta0.clone(),
    };
    let rem = RemainderModel {
        c: cfg.schedule.remainder_c,
    };
    let schedule = schedule_single_map(&mut gains, branch, eps, &start, w.blocks, &rem)?;
    let homs = [ctx.hom1.clone(), ctx.hom2.clone()];
    let inputs = measure_inputs(&ctx.model, &homs, eps, (w.j_band[0], w.j_band[1]))?;
    let mut constants = choose_constants(&inputs, eps, w.eps1)?;
    if let Some(k) = w.twist_steps {
        constants = constants.with_twist_steps(k);
    }
    let reduced = ReducedMap::new(&ctx.model, eps, ctx.homoclinic(branch).phase_shift);
    let opts = ChainOptions {
        density: w.density,
        theta_radius: w.theta_radius,
        theta_shrink: w.theta_shrink,
    };
    let chain = assemble_chain(&reduced, &schedule, &constants, &opts)?;
    write_atomic(out, "chain.json", &{
        let mut s = chain.to_json();
        s.push('\n');
        s.into_bytes()
    })?;
    if let Some((link, stage, cert)) = chain.first_failure() {
        let message = cert
            .worst()
            .map(|c| format!("{} margin {:e}", c.describe(), c.margin))
            .unwrap_or_else(|| format!("{:?}", cert.verdict));
        return Err(ExperimentError::Link { link, stage, message });
    }
    let sh = chain.shadow(&reduced)?;
    write_atomic(out, "shadow.csv", &csv_bytes(|b| sh.write_csv(b)))?;
    let summary = ShadowSummary {
        epsilon: eps,
        links: chain.links.len(),
        windows: chain.windows.len(),
        certified: chain.is_certified(),
        visits: sh.visits.len(),
        min_margin: (!sh.visits.is_empty()).then(|| sh.min_margin()),
        point: sh.point.clone(),
    };
    write_atomic(out, "shadow.json", &json_bytes(&summary))?;
    if sh.visits.len() != chain.windows.len() || sh.visits.iter().any(|v| !(v.margin > 0.0)) {
        return Err(ExperimentError::Shadow(format!(
            "{} of {} windows visited, smallest margin {:e}",
            sh.visits.len(),
            chain.windows.len(),
            sh.min_margin()
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub melnikov: MelnikovSummary,
    pub diffuse: DiffuseSummary,
    pub shadow: ShadowSummary,
}

/// Every stage in order, with the effective configuration saved alongside.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary, ExperimentError> {
    write_atomic(out, "config.toml", cfg.to_saved_toml().as_bytes())?;
    let ctx = Context::new(cfg)?;
    let melnikov = run_melnikov(cfg, &ctx, out)?;
    if cfg.schedule.policy == PolicyName::TwoMap && !melnikov.holds() {
        return Err(ExperimentError::A4Indeterminate {
            margin: melnikov.a4.margin,
            resolution: melnikov.a4.resolution,
        });
    }
    let diffuse = run_diffuse(cfg, &ctx, &melnikov.a4, out)?;
    let shadow = run_shadow(cfg, &ctx, out)?;
    Ok(PipelineSummary {
        melnikov,
        diffuse,
        shadow,
    })
}

/// A4 report for a stage run on its own; indeterminate reports are returned, not raised.
pub fn a4_report(cfg: &RunConfig, ctx: &Context) -> Result<A4Report, ExperimentError> {
    let opts = cfg.melnikov.a4_options();
    match check_a4(&ctx.model, &ctx.hom1, &ctx.hom2, &cfg.flow.theta0, ctx.budget, &opts) {
        Ok(r) => Ok(r),
        Err(MelnikovError::A4Indeterminate(r)) => Ok(*r),
        Err(e) => Err(e.into()),
    }
}
