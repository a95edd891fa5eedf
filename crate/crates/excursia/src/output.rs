//! Result, mixture and table file formats.

use std::fs;
use std::path::Path;

use excursia_core::estimate::{CiSummary, Construction, EstimateResult};
use excursia_core::ibd::GaussianMixture;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{PathConfig, RunConfig, WeightConfig};
use crate::error::CliError;
use crate::SCHEMA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvals {
    pub stage: String,
    pub n_model_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    /// Seed of the sampling stage.
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repeats {
    pub n: usize,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub estimates: Vec<f64>,
}

impl From<&CiSummary> for Repeats {
    fn from(c: &CiSummary) -> Self {
        Self {
            n: c.estimates.len(),
            mean: c.mean,
            lo95: c.lo,
            hi95: c.hi,
            estimates: c.estimates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub t_obs: f64,
    pub y_slope: f64,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub n_model_evals: usize,
    pub converged: bool,
    pub chain_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionSummary {
    pub rice_lag: usize,
    pub rice_chain_len: usize,
    pub n_model_evals: usize,
    pub prior_mean: Vec<f64>,
    pub components: Vec<ComponentSummary>,
}

impl From<&Construction> for ConstructionSummary {
    fn from(c: &Construction) -> Self {
        let weights = c.mixture.weights();
        Self {
            rice_lag: c.rice_lag,
            rice_chain_len: c.rice_chain_len,
            n_model_evals: c.n_model_evals,
            prior_mean: c.prior.mean().as_slice().to_vec(),
            components: c
                .components
                .iter()
                .zip(weights)
                .map(|(r, w)| ComponentSummary {
                    t_obs: r.observation.t_obs,
                    y_slope: r.observation.y_slope,
                    weight: w,
                    mean: r.mean.as_slice().to_vec(),
                    n_model_evals: r.n_model_evals,
                    converged: r.converged,
                    chain_length: r.chain_length,
                })
                .collect(),
        }
    }
}

/// The result document written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub schema: String,
    pub command: String,
    pub status: String,
    pub p_hat: f64,
    pub rel_rmse: Option<f64>,
    /// Normal-approximation interval `p̂ (1 ± 1.96 rel_rmse)`, clipped at 0.
    pub ci95: Option<[f64; 2]>,
    pub n_samples: usize,
    pub n_model_evals: usize,
    pub n_hits: usize,
    pub n_diverged: usize,
    pub stage_evals: Vec<StageEvals>,
    pub seeds: Seeds,
    pub reference_p: Option<f64>,
    pub repeats: Option<Repeats>,
    pub construction: Option<ConstructionSummary>,
    pub config: RunConfig,
}

impl ResultDoc {
    pub fn new(command: &str, r: &EstimateResult, seeds: Seeds, config: &RunConfig) -> Self {
        let ci95 = r.rel_rmse.map(|rel| {
            let half = 1.96 * rel * r.p_hat;
            [(r.p_hat - half).max(0.0), r.p_hat + half]
        });
        Self {
            schema: SCHEMA.into(),
            command: command.into(),
            status: "ok".into(),
            p_hat: r.p_hat,
            rel_rmse: r.rel_rmse,
            ci95,
            n_samples: r.n_samples,
            n_model_evals: r.n_model_evals,
            n_hits: r.n_hits,
            n_diverged: r.n_diverged,
            stage_evals: r
                .stage_evals
                .iter()
                .map(|(s, n)| StageEvals {
                    stage: s.clone(),
                    n_model_evals: *n,
                })
                .collect(),
            seeds,
            reference_p: config.reference_p,
            repeats: None,
            construction: None,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub u: f64,
    pub y: f64,
    pub t: f64,
    pub gamma: [[f64; 2]; 2],
    pub weight_hint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbdComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub observation: ObservationRecord,
    pub converged: bool,
    pub chain_length: usize,
    pub n_model_evals: usize,
}

/// A reusable biasing mixture and how it was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbdDoc {
    pub schema: String,
    pub dim: usize,
    pub solver_path: PathConfig,
    pub weight_mode: WeightConfig,
    pub construction_evals: usize,
    pub rice_lag: usize,
    pub components: Vec<IbdComponent>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl IbdDoc {
    pub fn new(c: &Construction, config: &RunConfig) -> Self {
        let parts = c.mixture.components();
        Self {
            schema: SCHEMA.into(),
            dim: c.mixture.dim(),
            solver_path: config.pipeline.path,
            weight_mode: config.pipeline.weight_mode,
            construction_evals: c.n_model_evals,
            rice_lag: c.rice_lag,
            components: c
                .components
                .iter()
                .zip(parts)
                .map(|(r, m)| {
                    let o = &r.observation;
                    IbdComponent {
                        weight: m.weight,
                        mean: m.density.mean().as_slice().to_vec(),
                        cov: rows(m.density.cov()),
                        observation: ObservationRecord {
                            u: o.u,
                            y: o.y_slope,
                            t: o.t_obs,
                            gamma: [[o.gamma[(0, 0)], o.gamma[(0, 1)]], [o.gamma[(1, 0)], o.gamma[(1, 1)]]],
                            weight_hint: o.weight_hint,
                        },
                        converged: r.converged,
                        chain_length: r.chain_length,
                        n_model_evals: r.n_model_evals,
                    }
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let doc: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if doc.schema != SCHEMA {
            return Err(CliError::Config(format!("{}: unsupported schema {:?}", path.display(), doc.schema)));
        }
        Ok(doc)
    }

    pub fn mixture(&self) -> Result<GaussianMixture, CliError> {
        let d = self.dim;
        let parts = self
            .components
            .iter()
            .map(|c| {
                if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                    return Err(CliError::Config(format!("IBD component does not match dimension {d}")));
                }
                let mean = DVector::from_column_slice(&c.mean);
                let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i][j]);
                Ok((c.weight, mean, cov))
            })
            .collect::<Result<Vec<_>, _>>()?;
        GaussianMixture::new(parts).map_err(|e| CliError::Config(format!("IBD: {e}")))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable document");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, std::io::Error::other(e))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Running estimate per checkpoint. `rel_err` is the error against the
/// reference probability when one is configured, else the estimated
/// relative RMSE (empty while undefined).
pub fn write_convergence(path: &Path, r: &EstimateResult, reference: Option<f64>) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["n_model_evals", "p_hat", "rel_err"]).map_err(&e)?;
    for p in &r.trace {
        let rel = match reference {
            Some(r) => Some((p.p_hat - r).abs() / r),
            None => p.rel_rmse,
        };
        w.write_record([p.n_model_evals.to_string(), format!("{:e}", p.p_hat), fmt(rel)])
            .map_err(&e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

/// Matrix layout: first row holds the slope axis, first column the time axis.
pub fn write_grid(path: &Path, times: &[f64], slopes: &[f64], values: &[f64]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    let header = std::iter::once("t\\y".to_string()).chain(slopes.iter().map(|y| format!("{y:e}")));
    w.write_record(header).map_err(&e)?;
    for (i, t) in times.iter().enumerate() {
        let row = std::iter::once(format!("{t:e}"))
            .chain(values[i * slopes.len()..(i + 1) * slopes.len()].iter().map(|v| format!("{v:e}")));
        w.write_record(row).map_err(&e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub fn write_acf(path: &Path, acf: &[f64]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["lag", "acf"]).map_err(&e)?;
    for (k, v) in acf.iter().enumerate() {
        w.write_record([k.to_string(), format!("{v:e}")]).map_err(&e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub fn write_chain(path: &Path, states: impl Iterator<Item = (Vec<f64>, f64)>, names: &[&str]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    let header = std::iter::once("iter").chain(names.iter().copied()).chain(std::iter::once("log_density"));
    w.write_record(header).map_err(&e)?;
    for (i, (s, lp)) in states.enumerate() {
        let row = std::iter::once(i.to_string())
            .chain(s.iter().map(|v| format!("{v:e}")))
            .chain(std::iter::once(format!("{lp:e}")));
        w.write_record(row).map_err(&e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}
