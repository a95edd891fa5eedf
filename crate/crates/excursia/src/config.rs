//! JSON run configuration.
//!
//! Precedence: command-line flags override the config file, which
//! overrides built-in defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use excursia_core::dynamics::{LinearModel, Lorenz96, LotkaVolterra};
use excursia_core::estimate::{DivergencePolicy, ExcursionSpec, InitialLaw, PipelineConfig, SolverPath};
use excursia_core::gaussproc::{GaussianDensity, UniformBox};
use excursia_core::ibd::WeightMode;
use excursia_core::optim::LbfgsConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub init: InitConfig,
    /// Observation functional: a full vector or `{"unit": i}`.
    pub c: CConfig,
    /// Excursion level.
    pub u: f64,
    /// Horizon `T`.
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub divergence: DivergenceConfig,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `null` means available parallelism.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Reference probability for the `rel_err` column of convergence traces.
    #[serde(default)]
    pub reference_p: Option<f64>,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_step() -> f64 {
    0.01
}

fn default_out() -> PathBuf {
    PathBuf::from("excursia-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    LotkaVolterra { alpha: f64, beta: f64, gamma: f64, delta: f64 },
    Lorenz96 { n: usize, forcing: f64 },
    /// `x' = A x + b`.
    Linear { a: Vec<Vec<f64>>, #[serde(default)] b: Option<Vec<f64>> },
}

/// A scalar broadcast to every coordinate, or one value per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VecSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// A scalar times the identity, a diagonal, or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Gaussian { mean: VecSpec, cov: CovSpec },
    /// `offset + scale ⊙ U(0,1)^d`.
    Uniform { offset: VecSpec, scale: VecSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CConfig {
    Vector(Vec<f64>),
    Unit { unit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceConfig {
    #[default]
    Exceedance,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
}

fn default_mc_samples() -> usize {
    1_000_000
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: default_mc_samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathConfig {
    Map,
    Mcmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightConfig {
    Equal,
    RiceWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsSection {
    pub memory: usize,
    pub c1: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsSection {
    fn default() -> Self {
        let d = LbfgsConfig::default();
        Self {
            memory: d.memory,
            c1: d.c1,
            grad_tol: d.grad_tol,
            max_iter: d.max_iter,
            max_backtracks: d.max_backtracks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub path: PathConfig,
    pub n_observations: usize,
    pub weight_mode: WeightConfig,
    pub rice_burn_in: usize,
    pub rice_samples: usize,
    pub max_lag: usize,
    pub lag_threshold: f64,
    pub fallback_lag: usize,
    pub window_scale: [f64; 2],
    pub window_points: usize,
    pub tau: f64,
    pub lbfgs: LbfgsSection,
    pub posterior_burn_in: usize,
    pub posterior_samples: usize,
    pub is_samples: usize,
    pub total_budget: Option<usize>,
    /// Seeded repetitions for an empirical 95% interval; 0 disables.
    pub repeats: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::default();
        Self {
            path: PathConfig::Map,
            n_observations: d.n_observations,
            weight_mode: WeightConfig::Equal,
            rice_burn_in: d.rice_burn_in,
            rice_samples: d.rice_samples,
            max_lag: d.max_lag,
            lag_threshold: d.lag_threshold,
            fallback_lag: d.fallback_lag,
            window_scale: [d.window_scale.0, d.window_scale.1],
            window_points: d.window_points,
            tau: d.tau,
            lbfgs: LbfgsSection::default(),
            posterior_burn_in: d.posterior_burn_in,
            posterior_samples: d.posterior_samples,
            is_samples: d.is_samples,
            total_budget: d.total_budget,
            repeats: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// Time nodes of the Rice-integrand grid.
    pub t_points: usize,
    /// Slope nodes of the Rice-integrand grid.
    pub y_points: usize,
    /// Largest lag of the autocorrelation table.
    pub max_lag: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            t_points: 101,
            y_points: 101,
            max_lag: 50,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub resolution: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies flag overrides. `samples` sets the MC sample count for `mc`
    /// and the importance-sample count otherwise.
    pub fn apply(&mut self, o: &Overrides, is_mc: bool) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(p) = &o.out {
            self.output_dir = p.clone();
        }
        if let Some(m) = o.samples {
            if is_mc {
                self.mc.samples = m;
            } else {
                self.pipeline.is_samples = m;
                self.pipeline.total_budget = None;
            }
        }
        if let Some(r) = o.resolution {
            self.diagnose.t_points = r;
            self.diagnose.y_points = r;
        }
    }

    pub fn dim(&self) -> usize {
        match &self.problem {
            ProblemConfig::LotkaVolterra { .. } => 2,
            ProblemConfig::Lorenz96 { n, .. } => *n,
            ProblemConfig::Linear { a, .. } => a.len(),
        }
    }

    pub fn model(&self) -> Result<Model, CliError> {
        let m = match &self.problem {
            ProblemConfig::LotkaVolterra { alpha, beta, gamma, delta } => {
                Model::LotkaVolterra(LotkaVolterra::new(*alpha, *beta, *gamma, *delta).map_err(cfg("problem"))?)
            }
            ProblemConfig::Lorenz96 { n, forcing } => Model::Lorenz96(Lorenz96::new(*n, *forcing).map_err(cfg("problem"))?),
            ProblemConfig::Linear { a, b } => {
                let d = a.len();
                let a = matrix(a, d, "problem.a")?;
                let b = match b {
                    Some(b) => vector(&VecSpec::Vector(b.clone()), d, "problem.b")?,
                    None => DVector::zeros(d),
                };
                Model::Linear(LinearModel::new(a, b).map_err(cfg("problem"))?)
            }
        };
        Ok(m)
    }

    pub fn initial_law(&self) -> Result<InitialLaw, CliError> {
        let d = self.dim();
        Ok(match &self.init {
            InitConfig::Gaussian { mean, cov } => {
                let mean = vector(mean, d, "init.mean")?;
                let cov = match cov {
                    CovSpec::Scalar(s) => DMatrix::identity(d, d) * *s,
                    CovSpec::Diagonal(v) => DMatrix::from_diagonal(&vector(&VecSpec::Vector(v.clone()), d, "init.cov")?),
                    CovSpec::Full(rows) => matrix(rows, d, "init.cov")?,
                };
                InitialLaw::Gaussian(GaussianDensity::new(mean, cov).map_err(cfg("init"))?)
            }
            InitConfig::Uniform { offset, scale } => InitialLaw::Uniform(
                UniformBox::new(vector(offset, d, "init.offset")?, vector(scale, d, "init.scale")?).map_err(cfg("init"))?,
            ),
        })
    }

    pub fn c_vector(&self) -> Result<DVector<f64>, CliError> {
        let d = self.dim();
        match &self.c {
            CConfig::Vector(v) => vector(&VecSpec::Vector(v.clone()), d, "c"),
            CConfig::Unit { unit } if *unit < d => Ok(DVector::from_fn(d, |i, _| if i == *unit { 1.0 } else { 0.0 })),
            CConfig::Unit { unit } => Err(CliError::Config(format!("c.unit = {unit} is out of range for dimension {d}"))),
        }
    }

    pub fn spec(&self) -> Result<ExcursionSpec<Model>, CliError> {
        let policy = match self.divergence {
            DivergenceConfig::Exceedance => DivergencePolicy::Exceedance,
            DivergenceConfig::Error => DivergencePolicy::Error,
        };
        Ok(ExcursionSpec::new(self.model()?, self.initial_law()?, self.c_vector()?, self.u, self.horizon, self.step)
            .map_err(cfg("spec"))?
            .with_divergence(policy))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let p = &self.pipeline;
        let out = PipelineConfig {
            path: match p.path {
                PathConfig::Map => SolverPath::Map,
                PathConfig::Mcmc => SolverPath::Mcmc,
            },
            n_observations: p.n_observations,
            weight_mode: match p.weight_mode {
                WeightConfig::Equal => WeightMode::Equal,
                WeightConfig::RiceWeighted => WeightMode::RiceWeighted,
            },
            rice_burn_in: p.rice_burn_in,
            rice_samples: p.rice_samples,
            max_lag: p.max_lag,
            lag_threshold: p.lag_threshold,
            fallback_lag: p.fallback_lag,
            window_scale: (p.window_scale[0], p.window_scale[1]),
            window_points: p.window_points,
            tau: p.tau,
            lbfgs: LbfgsConfig {
                memory: p.lbfgs.memory,
                c1: p.lbfgs.c1,
                grad_tol: p.lbfgs.grad_tol,
                max_iter: p.lbfgs.max_iter,
                max_backtracks: p.lbfgs.max_backtracks,
            },
            posterior_burn_in: p.posterior_burn_in,
            posterior_samples: p.posterior_samples,
            is_samples: p.is_samples,
            total_budget: p.total_budget,
            seed: self.seed,
        };
        out.validate().map_err(cfg("pipeline"))?;
        if p.repeats != 0 && p.repeats < 10 {
            return Err(CliError::Config("pipeline.repeats must be 0 or at least 10".into()));
        }
        Ok(out)
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.u.is_finite() && self.horizon > 0.0 && self.step > 0.0) {
            return Err(CliError::Config("u must be finite and horizon, step positive".into()));
        }
        if self.mc.samples == 0 {
            return Err(CliError::Config("mc.samples must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if let Some(r) = self.reference_p {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CliError::Config("reference_p must lie in (0, 1]".into()));
            }
        }
        if self.diagnose.t_points < 2 || self.diagnose.y_points < 2 || self.diagnose.max_lag == 0 {
            return Err(CliError::Config("diagnose grid needs at least 2 points per axis and max_lag ≥ 1".into()));
        }
        self.spec()?;
        self.pipeline_config()?;
        Ok(())
    }
}

fn cfg(field: &'static str) -> impl Fn(excursia_core::Error) -> CliError {
    move |e| CliError::Config(format!("{field}: {e}"))
}

fn vector(v: &VecSpec, d: usize, field: &str) -> Result<DVector<f64>, CliError> {
    match v {
        VecSpec::Scalar(s) => Ok(DVector::from_element(d, *s)),
        VecSpec::Vector(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
        VecSpec::Vector(v) => Err(CliError::Config(format!("{field}: expected {d} entries, got {}", v.len()))),
    }
}

fn matrix(rows: &[Vec<f64>], d: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config(format!("{field}: expected a {d}×{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}
