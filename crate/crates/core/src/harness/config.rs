//! TOML experiment description.
//!
//! ```toml
//! kind = "converge"
//! seed = 7
//!
//! [mesh]
//! dim = 1
//! n = 512
//!
//! [time]
//! t_end = 0.5
//! dt = 0.001953125
//!
//! [study]
//! epsilons = [0.5, 0.25, 0.125, 0.0625]
//! replicas = 16
//!
//! [coefficients]
//! a1 = { kind = "isotropic", dim = 1, profile = { mean = 2.0, terms = [{ amp = 1.0, k = [1] }] } }
//! a2 = { kind = "identity", dim = 1 }
//! alpha = { kind = "constant", c = 1.0 }
//! beta = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [initial]
//! u1 = { kind = "sine_product", amp = 1.0, modes = [1] }
//! u2 = { kind = "sine_product", amp = 0.5, modes = [2] }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientSet, FieldSpec};
use crate::ergodic::PhiSpec;
use crate::error::{Error, Result};
use crate::fastsde::NoiseSpec;
use crate::grid::Mesh;
use crate::slowpde::{step_count, EstimateCaps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Cell,
    Simulate,
    Average,
    Ergodic,
    Converge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub dim: usize,
    /// Cells per side of the physical mesh.
    pub n: usize,
    /// Cells per side of the periodic cell mesh.
    #[serde(default = "default_cell_n")]
    pub cell_n: usize,
}

fn default_cell_n() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub svg: bool,
}

fn default_replicas() -> usize {
    1
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            epsilons: vec![0.1],
            replicas: 1,
            svg: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub u1: FieldSpec,
    #[serde(default)]
    pub u2: FieldSpec,
    #[serde(default)]
    pub v1: FieldSpec,
    #[serde(default)]
    pub v2: FieldSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicSection {
    pub phi: PhiSpec,
    /// Frozen slow argument and starting point of the mixing probe.
    #[serde(default)]
    pub xi: [FieldSpec; 2],
    #[serde(default)]
    pub eta: [FieldSpec; 2],
    /// Fast-time probe grid.
    #[serde(default = "default_probe_times")]
    pub probe_times: Vec<f64>,
    #[serde(default = "default_mixing_replicas")]
    pub mixing_replicas: usize,
    /// Window ladder; the study epsilons are used when omitted.
    #[serde(default)]
    pub window_epsilons: Option<Vec<f64>>,
    #[serde(default = "default_delta_factors")]
    pub delta_factors: Vec<f64>,
    #[serde(default = "default_window_replicas")]
    pub window_replicas: usize,
    /// Largest fast step inside a window, as a fraction of epsilon.
    #[serde(default = "default_window_dt")]
    pub window_dt_over_eps: f64,
    /// Invariant draws for functionals without a closed-form mean.
    #[serde(default = "default_invariant_samples")]
    pub invariant_samples: usize,
    #[serde(default = "default_true")]
    pub splitting: bool,
}

fn default_probe_times() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
}
fn default_mixing_replicas() -> usize {
    10_000
}
fn default_delta_factors() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}
fn default_window_replicas() -> usize {
    32
}
fn default_window_dt() -> f64 {
    0.25
}
fn default_invariant_samples() -> usize {
    2000
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: StudyKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub mesh: MeshSection,
    pub time: TimeSection,
    #[serde(default)]
    pub study: StudySection,
    pub coefficients: CoefficientSet,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub caps: EstimateCaps,
    #[serde(default)]
    pub ergodic: Option<ErgodicSection>,
    /// Sample count of the coefficient validation pass.
    #[serde(default = "default_validation_samples")]
    pub validation_samples: usize,
}

fn default_validation_samples() -> usize {
    20_000
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn strictly_decreasing(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(cfg_err(format!("{name} is empty")));
    }
    if xs.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(cfg_err(format!("{name} must be positive and finite")));
    }
    if xs.windows(2).any(|w| w[1] >= w[0]) {
        return Err(cfg_err(format!("{name} must be strictly decreasing")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn physical_mesh(&self) -> Result<Mesh> {
        Mesh::dirichlet(self.mesh.dim, self.mesh.n)
    }

    pub fn cell_mesh(&self) -> Result<Mesh> {
        Mesh::periodic(self.mesh.dim, self.mesh.cell_n)
    }

    /// Structural checks; every failure is a [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => cfg_err(other.to_string()),
        };
        if !(1..=2).contains(&self.mesh.dim) {
            return Err(cfg_err(format!("mesh.dim must be 1 or 2, got {}", self.mesh.dim)));
        }
        self.physical_mesh().map_err(wrap)?;
        self.cell_mesh().map_err(wrap)?;
        if self.coefficients.dim() != self.mesh.dim {
            return Err(cfg_err("coefficient dimension differs from mesh.dim"));
        }
        self.coefficients.check().map_err(wrap)?;
        if !(self.time.t_end >= 0.0) || !(self.time.dt > 0.0) {
            return Err(cfg_err("time.t_end must be >= 0 and time.dt > 0"));
        }
        step_count(self.time.t_end, self.time.dt).map_err(wrap)?;
        strictly_decreasing("study.epsilons", &self.study.epsilons)?;
        if self.study.replicas < 1 {
            return Err(cfg_err("study.replicas must be >= 1"));
        }
        if self.noise.modes >= self.mesh.n {
            return Err(cfg_err(format!(
                "noise.modes = {} must be below mesh.n = {}",
                self.noise.modes, self.mesh.n
            )));
        }
        crate::fastsde::SpectralNoise::from_spec(&self.noise, self.mesh.dim).map_err(wrap)?;
        for (name, f) in [
            ("initial.u1", &self.initial.u1),
            ("initial.u2", &self.initial.u2),
            ("initial.v1", &self.initial.v1),
            ("initial.v2", &self.initial.v2),
        ] {
            if !f.satisfies_dirichlet(self.mesh.dim) {
                return Err(cfg_err(format!("{name} violates the homogeneous Dirichlet condition")));
            }
        }
        if let Some(e) = &self.ergodic {
            if e.probe_times.len() < 2 || e.probe_times.iter().any(|t| !(*t >= 0.0)) {
                return Err(cfg_err("ergodic.probe_times needs >= 2 nonnegative times"));
            }
            if e.mixing_replicas < 100 {
                return Err(cfg_err("ergodic.mixing_replicas must be >= 100"));
            }
            if let Some(w) = &e.window_epsilons {
                strictly_decreasing("ergodic.window_epsilons", w)?;
            }
            if e.delta_factors.is_empty() || e.delta_factors.iter().any(|d| !(*d > 0.0)) {
                return Err(cfg_err("ergodic.delta_factors must be positive"));
            }
            if e.window_replicas < 1 || !(e.window_dt_over_eps > 0.0) {
                return Err(cfg_err("ergodic window settings must be positive"));
            }
        }
        if self.validation_samples == 0 {
            return Err(cfg_err("validation_samples must be >= 1"));
        }
        Ok(())
    }
}
