//! Experiment configuration (TOML) and its validation.

use std::collections::BTreeMap;
use std::path::Path;

use ddsde_core::drift::CATALOG;
use ddsde_core::euler::{check_domain, TimeGrid};
use ddsde_core::{catalog, DriftSpec, GridSpec, InitialDistribution};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Density,
    Particles,
    Fpe,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DensitySource {
    Kde,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Componentwise expressions in `t`, `x1..`, `u` and the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expressions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    /// Declared sup bound, required with `expressions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_u: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    PointMass { at: Vec<f64> },
    Gaussian { mean: Vec<f64>, variance: f64 },
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64> },
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    /// One entry for a single run, several for an N sweep.
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    pub count: usize,
    pub density_source: DensitySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpeSection {
    /// Cells of the reference grid, on the same box as `grid`.
    pub cells: Vec<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    ddsde_core::fpe::DEFAULT_CFL
}

fn default_lambda() -> f64 {
    ddsde_core::diagnostics::DEFAULT_LAMBDA
}

/// A diagnostic together with the assertion it makes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Diagnostic {
    /// Terminal density against the closed-form heat flow (zero drift only).
    HeatExact { tolerance: f64 },
    /// Terminal L1 distance to the FPE reference across the N sweep.
    L1Convergence { tolerance: f64 },
    /// Gaussian domination certificate across the N sweep.
    Domination {
        #[serde(default = "default_lambda")]
        lambda: f64,
        /// Defaults to the horizon.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        times: Vec<f64>,
    },
    Hoelder { beta: f64, t_min: f64, t_max: f64, half_width: f64 },
    /// Weak-form residual of the finest density trajectory.
    WeakResidual { tolerance: f64 },
    /// Fourth-moment increment constants of the particle runs.
    Moments { pairs: Vec<[f64; 2]> },
    /// `||rho_t||_inf t^{d/(2q)} / ||rho_0||_q <= c_fit` on `[T/8, T]`.
    Smoothing { q: f64, c_fit: f64 },
    /// L1 between particle KDE and density engine at the horizon.
    EngineAgreement { tolerance: f64 },
}

impl Diagnostic {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::HeatExact { .. } => "heat_exact",
            Self::L1Convergence { .. } => "l1_convergence",
            Self::Domination { .. } => "domination",
            Self::Hoelder { .. } => "hoelder",
            Self::WeakResidual { .. } => "weak_residual",
            Self::Moments { .. } => "moments",
            Self::Smoothing { .. } => "smoothing",
            Self::EngineAgreement { .. } => "engine_agreement",
        }
    }
}

/// Thresholds used by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareThresholds {
    #[serde(default = "default_compare_tol")]
    pub l1: f64,
    #[serde(default = "default_compare_tol")]
    pub sup: f64,
    #[serde(default = "default_compare_tol")]
    pub weak_residual: f64,
}

fn default_compare_tol() -> f64 {
    1e-2
}

impl Default for CompareThresholds {
    fn default() -> Self {
        Self {
            l1: default_compare_tol(),
            sup: default_compare_tol(),
            weak_residual: default_compare_tol(),
        }
    }
}

/// Largest seed a TOML file can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub engines: Vec<Engine>,
    /// Times at which densities are written; defaults to the horizon.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<f64>,
    pub drift: DriftConfig,
    pub initial: InitialConfig,
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<ParticleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpe: Option<FpeSection>,
    #[serde(default)]
    pub compare: CompareThresholds,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

/// Core objects built from a validated config.
pub struct Resolved {
    pub drift: DriftSpec,
    pub initial: InitialDistribution,
    pub grid: GridSpec,
    pub fpe_grid: Option<GridSpec>,
    pub snapshots: Vec<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Invalid(vec![e.to_string().trim_end().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Panics if `seed` exceeds [`MAX_SEED`], which `validate` rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn wants(&self, engine: Engine) -> bool {
        self.engines.contains(&engine) || self.engines.contains(&Engine::All)
    }

    pub fn dim(&self) -> usize {
        self.grid.cells.len()
    }

    pub fn finest_steps(&self) -> usize {
        self.time.steps.iter().copied().max().unwrap_or(0)
    }

    pub fn build_drift(&self) -> ddsde_core::Result<DriftSpec> {
        let d = &self.drift;
        match (&d.name, &d.expressions) {
            (Some(name), _) => catalog(name, self.dim(), &d.params),
            (None, Some(exprs)) => {
                DriftSpec::from_expressions(exprs, self.dim(), &d.params, d.bound.unwrap_or(f64::NAN), d.lipschitz_u)
            }
            (None, None) => unreachable!("checked by validate"),
        }
    }

    /// Checks every field and builds the core objects, collecting one message
    /// per offending field.
    pub fn validate(&self) -> Result<Resolved, CliError> {
        let mut errs = Vec::new();
        let mut field = |name: &str, msg: String| errs.push(format!("{name}: {msg}"));

        if self.seed > MAX_SEED {
            field("seed", format!("must be at most {MAX_SEED} (TOML integers are signed 64-bit)"));
        }
        if self.engines.is_empty() {
            field("engines", "at least one engine is required".into());
        }
        let grid = GridSpec::new(self.grid.lower.clone(), self.grid.upper.clone(), self.grid.cells.clone())
            .map_err(|e| field("grid", e.to_string()))
            .ok();

        match (&self.drift.name, &self.drift.expressions) {
            (Some(_), Some(_)) => field("drift", "give either `name` or `expressions`, not both".into()),
            (None, None) => field("drift", format!("one of `name` or `expressions` is required; catalog: {}", CATALOG.join(", "))),
            (None, Some(_)) if self.drift.bound.is_none() => {
                field("drift.bound", "expression drifts must declare a sup bound".into())
            }
            _ => {}
        }
        let drift = if self.drift.name.is_some() != self.drift.expressions.is_some() {
            let key = if self.drift.name.is_some() { "drift.name" } else { "drift.expressions" };
            self.build_drift().map_err(|e| field(key, e.to_string())).ok()
        } else {
            None
        };

        let initial = grid.as_ref().and_then(|g| {
            let built = match &self.initial {
                InitialConfig::PointMass { at } => Ok(InitialDistribution::point_mass(at.clone())),
                InitialConfig::Gaussian { mean, variance } => InitialDistribution::gaussian(mean.clone(), *variance),
                InitialConfig::Mixture { weights, means, variances } => {
                    InitialDistribution::mixture(weights.clone(), means.clone(), variances.clone())
                }
                InitialConfig::UniformBox { lower, upper } => InitialDistribution::uniform_box(g, lower, upper),
            };
            match built {
                Ok(i) if i.dim() != g.dim() => {
                    field("initial", format!("law is {}-dimensional, grid is {}-dimensional", i.dim(), g.dim()));
                    None
                }
                Ok(i) => Some(i),
                Err(e) => {
                    field("initial", e.to_string());
                    None
                }
            }
        });

        let horizon = self.time.horizon;
        if self.time.steps.is_empty() {
            field("time.steps", "at least one step count is required".into());
        }
        for &n in &self.time.steps {
            if let Err(e) = TimeGrid::new(horizon, n) {
                field("time", e.to_string());
            }
        }
        let mut snapshots = if self.snapshots.is_empty() { vec![horizon] } else { self.snapshots.clone() };
        snapshots.sort_by(f64::total_cmp);
        snapshots.dedup();
        for &t in &snapshots {
            let on_every_lattice = self
                .time
                .steps
                .iter()
                .all(|&n| TimeGrid::new(horizon, n).ok().and_then(|tg| tg.step_index(t)).is_some_and(|k| k >= 1));
            if !on_every_lattice {
                field("snapshots", format!("{t} is not a positive step time of every N in time.steps"));
            }
        }

        if self.wants(Engine::Particles) && self.particles.is_none() {
            field("particles", "the particle engine needs a [particles] table".into());
        }
        if let Some(p) = &self.particles {
            if p.count < 2 {
                field("particles.count", format!("need at least 2 particles, got {}", p.count));
            }
        }
        let fpe_grid = match (&self.fpe, self.wants(Engine::Fpe)) {
            (None, true) => {
                field("fpe", "the FPE engine needs an [fpe] table".into());
                None
            }
            (Some(f), _) => {
                if !(f.cfl > 0.0 && f.cfl <= 1.0) {
                    field("fpe.cfl", format!("must lie in (0, 1], got {}", f.cfl));
                }
                GridSpec::new(self.grid.lower.clone(), self.grid.upper.clone(), f.cells.clone())
                    .map_err(|e| field("fpe.cells", e.to_string()))
                    .ok()
            }
            (None, false) => None,
        };

        for (i, diag) in self.diagnostics.iter().enumerate() {
            let key = format!("diagnostics[{i}] ({})", diag.kind());
            let needs = |engine: Engine| self.wants(engine);
            let problem = match diag {
                Diagnostic::HeatExact { .. } if self.drift.name.as_deref() != Some("zero") => {
                    Some("closed-form comparison needs drift.name = \"zero\"".to_string())
                }
                Diagnostic::L1Convergence { .. } if !(needs(Engine::Density) && needs(Engine::Fpe)) => {
                    Some("needs the density and fpe engines".into())
                }
                Diagnostic::L1Convergence { .. } if self.time.steps.len() < 4 => {
                    Some("needs at least 4 step counts in time.steps".into())
                }
                Diagnostic::Domination { lambda, .. } if !(*lambda >= 1.0) => Some(format!("lambda must be >= 1, got {lambda}")),
                Diagnostic::Hoelder { beta, .. } if !(*beta > 0.0 && *beta < 1.0) => {
                    Some(format!("beta must lie in (0, 1), got {beta}"))
                }
                Diagnostic::Moments { pairs } if pairs.is_empty() => Some("needs at least one (s, t) pair".into()),
                Diagnostic::Moments { .. } if !needs(Engine::Particles) => Some("needs the particles engine".into()),
                Diagnostic::EngineAgreement { .. } if !(needs(Engine::Particles) && needs(Engine::Density)) => {
                    Some("needs the particles and density engines".into())
                }
                Diagnostic::Smoothing { q, .. } if !(*q >= 1.0) => Some(format!("q must be >= 1, got {q}")),
                _ => None,
            };
            let density_only = matches!(
                diag,
                Diagnostic::HeatExact { .. }
                    | Diagnostic::Domination { .. }
                    | Diagnostic::Hoelder { .. }
                    | Diagnostic::WeakResidual { .. }
                    | Diagnostic::Smoothing { .. }
            );
            if let Some(p) = problem {
                field(&key, p);
            } else if density_only && !needs(Engine::Density) {
                field(&key, "needs the density engine".into());
            }
        }

        if let (Some(g), Some(b), Some(i)) = (&grid, &drift, &initial) {
            if let Err(e) = check_domain(g, b, i, horizon) {
                field("grid", e.to_string());
            }
        }

        if !errs.is_empty() {
            return Err(CliError::Invalid(errs));
        }
        Ok(Resolved {
            drift: drift.expect("no errors"),
            initial: initial.expect("no errors"),
            grid: grid.expect("no errors"),
            fpe_grid,
            snapshots,
        })
    }
}
