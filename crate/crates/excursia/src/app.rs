//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use excursia_core::estimate::{self, Executor, RareEvent};
use excursia_core::gaussproc::{self, RiceTable};
use excursia_core::mcmc;
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::exec::RayonExecutor;
use crate::output::{self, ConstructionSummary, IbdDoc, Repeats, ResultDoc, Seeds};
use crate::SCHEMA;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Mc,
    Estimate,
    Diagnose,
    ReuseIbd,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mc => "mc",
            Self::Estimate => "estimate",
            Self::Diagnose => "diagnose",
            Self::ReuseIbd => "reuse-ibd",
        }
    }
}

/// File names inside the output directory.
pub const RESULT_FILE: &str = "result.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const IBD_FILE: &str = "ibd.json";
pub const ERROR_FILE: &str = "error.json";
pub const GRID_FILE: &str = "rice_grid.csv";
pub const ACF_FILE: &str = "rice_acf.csv";
pub const CHAIN_FILE: &str = "rice_chain.csv";

/// Loads, overrides and validates the configuration, then prepares the
/// output directory with a config echo.
pub fn prepare(config_path: &Path, overrides: &Overrides, cmd: Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply(overrides, cmd == Command::Mc);
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    output::write_json(&cfg.output_dir.join(CONFIG_FILE), &cfg)?;
    Ok(cfg)
}

pub fn run(cmd: Command, cfg: &RunConfig, reuse_ibd: Option<&Path>) -> Result<(), CliError> {
    let exec = RayonExecutor::new(cfg.threads)?;
    log::info!("{}: {} worker threads, seed {}", cmd.name(), exec.threads(), cfg.seed);
    match (cmd, reuse_ibd) {
        (Command::Mc, _) => cmd_mc(cfg, &exec),
        (Command::Estimate, None) => cmd_estimate(cfg, &exec),
        (Command::Estimate, Some(p)) | (Command::ReuseIbd, Some(p)) => cmd_reuse(cfg, p, &exec),
        (Command::ReuseIbd, None) => cmd_reuse(cfg, &cfg.output_dir.join(IBD_FILE), &exec),
        (Command::Diagnose, _) => cmd_diagnose(cfg, &exec),
    }
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn cmd_mc(cfg: &RunConfig, exec: &RayonExecutor) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let r = estimate::mc_estimate(&spec, cfg.mc.samples, cfg.seed, exec)?;
    log::info!("MC estimate {:e} from {} samples ({} hits)", r.p_hat, r.n_samples, r.n_hits);
    if r.n_diverged > 0 {
        log::warn!("{} trajectories diverged and were counted as excursions", r.n_diverged);
    }
    let seeds = Seeds {
        base: cfg.seed,
        sampling: cfg.seed,
    };
    output::write_convergence(&out(cfg, CONVERGENCE_FILE), &r, cfg.reference_p)?;
    output::write_json(&out(cfg, RESULT_FILE), &ResultDoc::new("mc", &r, seeds, cfg))
}

fn cmd_estimate(cfg: &RunConfig, exec: &RayonExecutor) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let pcfg = cfg.pipeline_config()?;
    let run = estimate::estimate_excursion_probability(&spec, &pcfg, exec)?;
    let r = &run.result;
    log::info!(
        "pipeline estimate {:e}: {} model evaluations ({} for construction)",
        r.p_hat,
        r.n_model_evals,
        run.construction.n_model_evals
    );
    let seeds = Seeds {
        base: cfg.seed,
        sampling: estimate::sampling_seed(cfg.seed),
    };
    let mut doc = ResultDoc::new("estimate", r, seeds, cfg);
    doc.construction = Some(ConstructionSummary::from(&run.construction));
    if cfg.pipeline.repeats > 0 {
        let ci = estimate::confidence_intervals(&spec, &pcfg, cfg.pipeline.repeats, cfg.seed, exec)?;
        log::info!("{} repetitions: 95% interval [{:e}, {:e}]", cfg.pipeline.repeats, ci.lo, ci.hi);
        doc.repeats = Some(Repeats::from(&ci));
    }
    output::write_json(&out(cfg, IBD_FILE), &IbdDoc::new(&run.construction, cfg))?;
    output::write_convergence(&out(cfg, CONVERGENCE_FILE), r, cfg.reference_p)?;
    output::write_json(&out(cfg, RESULT_FILE), &doc)
}

fn cmd_reuse(cfg: &RunConfig, ibd_path: &Path, exec: &RayonExecutor) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let ibd = IbdDoc::load(ibd_path)?;
    if ibd.dim != spec.nominal().dim() {
        return Err(CliError::Config(format!(
            "IBD dimension {} does not match the problem dimension {}",
            ibd.dim,
            spec.nominal().dim()
        )));
    }
    let mix = ibd.mixture()?;
    let m = cfg.pipeline.is_samples;
    let seed = estimate::sampling_seed(cfg.seed);
    let r = estimate::is_estimate(&spec, &mix, m, seed, exec)?;
    log::info!("IS estimate {:e} with a stored IBD from {}", r.p_hat, ibd_path.display());
    let seeds = Seeds {
        base: cfg.seed,
        sampling: seed,
    };
    output::write_convergence(&out(cfg, CONVERGENCE_FILE), &r, cfg.reference_p)?;
    output::write_json(&out(cfg, RESULT_FILE), &ResultDoc::new("reuse-ibd", &r, seeds, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseDoc {
    pub schema: String,
    pub command: String,
    pub status: String,
    pub t_points: usize,
    pub y_points: usize,
    pub y_max: f64,
    pub rice_chain_len: usize,
    pub rice_lag: usize,
    pub acceptance_per_stage: Vec<f64>,
    pub config: RunConfig,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn cmd_diagnose(cfg: &RunConfig, exec: &RayonExecutor) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let pcfg = cfg.pipeline_config()?;
    let rice = spec.rice_integrand()?;
    let table = RiceTable::new(&rice, cfg.step)?;
    let chain = estimate::rice_chain(&table, cfg.u, cfg.step, &pcfg)?;

    // the slope axis covers the sampled slopes with some margin
    let y_chain = chain.states().map(|s| s[1]).fold(0.0f64, f64::max);
    let y_window = table
        .nodes()
        .iter()
        .filter_map(|j| gaussproc::slope_window(j, cfg.u))
        .map(|w| w.1)
        .fold(0.0f64, f64::max);
    let y_max = if y_chain > 0.0 { 1.5 * y_chain } else { y_window };
    if !(y_max > 0.0) {
        return Err(CliError::Numerical(excursia_core::Error::FlatLikelihood));
    }
    let d = &cfg.diagnose;
    let times = linspace(0.0, cfg.horizon, d.t_points);
    let slopes = linspace(0.0, y_max, d.y_points);
    let rows: Vec<Vec<f64>> = Executor::map(exec, times.len(), |i| gaussproc::rice_grid(&rice, &times[i..=i], &slopes))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let values: Vec<f64> = rows.concat();

    let acf = mcmc::autocorrelation(&chain, d.max_lag.min(chain.len() - 1))?;
    let lag = mcmc::select_lag(&chain, pcfg.max_lag, pcfg.lag_threshold, pcfg.fallback_lag);

    output::write_grid(&out(cfg, GRID_FILE), &times, &slopes, &values)?;
    output::write_acf(&out(cfg, ACF_FILE), &acf)?;
    output::write_chain(
        &out(cfg, CHAIN_FILE),
        chain.states().zip(chain.log_densities()).map(|(s, lp)| (s.to_vec(), *lp)),
        &["t", "y"],
    )?;
    let doc = DiagnoseDoc {
        schema: SCHEMA.into(),
        command: "diagnose".into(),
        status: "ok".into(),
        t_points: d.t_points,
        y_points: d.y_points,
        y_max,
        rice_chain_len: chain.len(),
        rice_lag: lag,
        acceptance_per_stage: chain.acceptance_rate_per_stage().to_vec(),
        config: cfg.clone(),
    };
    output::write_json(&out(cfg, RESULT_FILE), &doc)
}

/// Runs a command end to end and returns the process exit code. Failures
/// are reported on stderr and, when the output directory is known, in
/// `error.json`.
pub fn main_with(cmd: Command, config_path: &Path, overrides: &Overrides, reuse_ibd: Option<&Path>) -> i32 {
    let result = prepare(config_path, overrides, cmd).and_then(|cfg| {
        let r = run(cmd, &cfg, reuse_ibd);
        if let Err(e) = &r {
            let _ = output::write_json(&cfg.output_dir.join(ERROR_FILE), &e.to_json());
        }
        r
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.to_json()).expect("serializable error"));
            e.exit_code()
        }
    }
}
