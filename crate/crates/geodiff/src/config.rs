//! Run configuration read from TOML, and the model it describes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extflow::ExternalFlowModel;
use crate::melnikov::A4Options;
use crate::models::{Metric, Potential, SystemModel, TorusProfile, Weight};
use crate::scheduler::DEFAULT_REMAINDER_C;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    Torus,
    PendulumRotator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialName {
    /// `(cos r + β sin r (sin φ + κ sin 2φ))·w(θ)`.
    Default,
    /// `cos r · w(θ)`.
    Symmetric,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialSection {
    pub kind: PotentialName,
    pub beta: f64,
    pub kappa: f64,
    /// Strength of the localized bump added on the first branch; 0 adds nothing.
    pub bump_rho: f64,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self {
            kind: PotentialName::Default,
            beta: 0.3,
            kappa: 0.5,
            bump_rho: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub metric: MetricName,
    /// Torus profile `1 + b(1 + cos r)`.
    pub bulge: f64,
    pub base_energy: f64,
    pub potential: PotentialSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            metric: MetricName::Torus,
            bulge: 1.0,
            base_energy: 100.0,
            potential: PotentialSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowName {
    Linear,
    Shear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub kind: FlowName,
    pub frequency: Vec<f64>,
    /// Shear strength; only read for `kind = "shear"`.
    pub coupling: f64,
    pub theta0: Vec<f64>,
    pub recurrence_radius: f64,
    pub horizon: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            kind: FlowName::Linear,
            frequency: vec![1.0, (5f64.sqrt() - 1.0) / 2.0],
            coupling: 0.0,
            theta0: vec![0.0, 0.0],
            recurrence_radius: 0.05,
            horizon: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelnikovSection {
    /// Angle budget `L`; defaults to `a + 1`.
    pub budget: Option<f64>,
    pub grid: usize,
    pub rho0: f64,
    pub sigma0: f64,
    pub phi_check_points: usize,
    pub actions: Vec<f64>,
    /// Exported gain grid: angles and points per external angle.
    pub export_phi: usize,
    pub export_theta: usize,
    /// Random offset of the exported grid points, as a fraction of the spacing.
    pub jitter: f64,
}

impl Default for MelnikovSection {
    fn default() -> Self {
        let a4 = A4Options::default();
        Self {
            budget: None,
            grid: a4.grid,
            rho0: a4.rho0,
            sigma0: a4.sigma0,
            phi_check_points: a4.phi_check_points,
            actions: a4.actions,
            export_phi: 64,
            export_theta: 16,
            jitter: 0.0,
        }
    }
}

impl MelnikovSection {
    pub fn a4_options(&self) -> A4Options {
        A4Options {
            grid: self.grid,
            rho0: self.rho0,
            sigma0: self.sigma0,
            phi_check_points: self.phi_check_points,
            actions: self.actions.clone(),
            ..A4Options::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    TwoMap,
    SingleMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub policy: PolicyName,
    /// Initial scale; defaults to `1/√E*`.
    pub epsilon: Option<f64>,
    pub epochs: usize,
    /// Block cap per two-map epoch.
    pub max_blocks: usize,
    /// Blocks per epoch of the single-map policy; defaults to `⌈1/ε²⌉`.
    pub single_blocks: Option<usize>,
    pub remainder_c: f64,
    /// Random blocks checked against the integrated flow.
    pub validate_blocks: usize,
    pub kappa: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            policy: PolicyName::TwoMap,
            epsilon: None,
            epochs: 3,
            max_blocks: 4_000_000,
            single_blocks: None,
            remainder_c: DEFAULT_REMAINDER_C,
            validate_blocks: 0,
            kappa: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsSection {
    pub epsilon: f64,
    pub eps1: f64,
    /// Links of the chain, one per block of a single-map schedule.
    pub blocks: usize,
    /// Branch number (1 or 2) of the shadowed schedule.
    pub branch: u8,
    pub phi: f64,
    pub j_band: [f64; 2],
    pub density: usize,
    pub theta_radius: f64,
    pub theta_shrink: f64,
    /// Replaces the chosen twist steps `K`.
    pub twist_steps: Option<usize>,
}

impl Default for WindowsSection {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            eps1: 0.05,
            blocks: 1,
            branch: 1,
            phi: 0.1,
            j_band: [1.3, 1.5],
            density: 4,
            theta_radius: 0.05,
            theta_shrink: 0.98,
            twist_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub flow: FlowSection,
    pub melnikov: MelnikovSection,
    pub schedule: ScheduleSection,
    pub windows: WindowsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelSection::default(),
            flow: FlowSection::default(),
            melnikov: MelnikovSection::default(),
            schedule: ScheduleSection::default(),
            windows: WindowsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// The configuration as saved next to the outputs: relative to its own directory.
    pub fn to_saved_toml(&self) -> String {
        Self {
            out: PathBuf::from("."),
            ..self.clone()
        }
        .to_toml_string()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.base_energy > 0.0) {
            return Err(invalid("model.base_energy must be positive"));
        }
        if m.metric == MetricName::Torus {
            TorusProfile::new(m.bulge).map_err(|e| invalid(format!("model.bulge: {e}")))?;
        }
        if !(m.potential.bump_rho >= 0.0) {
            return Err(invalid("model.potential.bump_rho must be non-negative"));
        }
        let f = &self.flow;
        if f.frequency.len() != f.theta0.len() {
            return Err(invalid(format!(
                "flow.theta0 has {} entries, flow.frequency {}",
                f.theta0.len(),
                f.frequency.len()
            )));
        }
        if f.kind == FlowName::Shear && f.frequency.len() != 2 {
            return Err(invalid("shear flows live on T^2"));
        }
        if !(f.recurrence_radius > 0.0 && f.horizon > 0.0) {
            return Err(invalid("flow.recurrence_radius and flow.horizon must be positive"));
        }
        let mk = &self.melnikov;
        if mk.grid < 8 || mk.export_phi == 0 || mk.export_theta == 0 || mk.actions.is_empty() {
            return Err(invalid("melnikov grids must be non-empty (grid ≥ 8)"));
        }
        if !(0.0..1.0).contains(&mk.jitter) {
            return Err(invalid("melnikov.jitter must lie in [0, 1)"));
        }
        let s = &self.schedule;
        if let Some(e) = s.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(invalid("schedule.epsilon must lie in (0, 1)"));
            }
        }
        if s.epochs == 0 || !(s.remainder_c >= 0.0) || !(s.kappa > 0.0) {
            return Err(invalid("schedule needs epochs ≥ 1, remainder_c ≥ 0 and kappa > 0"));
        }
        let w = &self.windows;
        if !(w.epsilon > 0.0 && w.epsilon < 1.0 && w.eps1 > 0.0) {
            return Err(invalid("windows.epsilon must lie in (0, 1) and windows.eps1 be positive"));
        }
        if !(w.branch == 1 || w.branch == 2) {
            return Err(invalid("windows.branch must be 1 or 2"));
        }
        if w.density < 2 {
            return Err(invalid("windows.density must be at least 2"));
        }
        Ok(())
    }

    /// Scale of the first epoch.
    pub fn epsilon0(&self) -> f64 {
        self.schedule
            .epsilon
            .unwrap_or_else(|| 1.0 / self.model.base_energy.sqrt())
    }

    /// The configured model without the optional bump, which needs the homoclinic data.
    pub fn base_model(&self) -> Result<SystemModel<f64>, ConfigError> {
        let m = &self.model;
        let d = self.flow.frequency.len();
        let metric = match m.metric {
            MetricName::Torus => Metric::Torus(TorusProfile::new(m.bulge).map_err(|e| invalid(e.to_string()))?),
            MetricName::PendulumRotator => Metric::PendulumRotator,
        };
        let w = Weight::standard(d);
        let potential = match m.potential.kind {
            PotentialName::Default => Potential::torus_default(m.potential.beta, m.potential.kappa, w),
            PotentialName::Symmetric => Potential::symmetric(w),
            PotentialName::Zero => Potential::zero(),
        };
        let f = &self.flow;
        let external = match f.kind {
            FlowName::Linear => ExternalFlowModel::linear(f.frequency.clone()),
            FlowName::Shear => ExternalFlowModel::shear(f.frequency.clone(), f.coupling),
        }
        .map_err(|e| invalid(format!("flow: {e}")))?;
        SystemModel::new(metric, potential, external, m.base_energy).map_err(|e| invalid(e.to_string()))
    }
}
