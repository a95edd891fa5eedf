//! Monte Carlo and importance-sampling estimators of the excursion
//! probability `P(sup_{t ≤ T} cᵀx(t) ≥ u)`, and the end-to-end pipeline that
//! builds the importance-biasing mixture.
//!
//! Samples are drawn in fixed-size blocks; block `b` uses random stream `b`
//! of the seed, so results do not depend on how blocks are scheduled.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;

use crate::dynamics::{self, Dynamics, TimeGrid};
use crate::error::{check_dim, Error, Result};
use crate::gaussproc::{self, GaussianDensity, RiceIntegrand, RiceTable, UniformBox};
use crate::ibd::{self, ComponentSpec, GaussianMixture, WeightMode};
use crate::inverse::{self, Observation, PosteriorProblem};
use crate::mcmc::{self, Chain, DramConfig, FnDensity};
use crate::optim::LbfgsConfig;
use crate::rng::{self, StreamRng};

/// Runs `n` independent jobs and returns their results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

impl<E: Executor + ?Sized> Executor for &E {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (**self).map(n, f)
    }
}

/// Law of the initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Gaussian(GaussianDensity),
    Uniform(UniformBox),
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            Self::Uniform(u) => u.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Gaussian(g) => g.sample(rng),
            Self::Uniform(u) => u.sample(rng),
        }
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Gaussian(g) => g.log_pdf(x),
            Self::Uniform(u) => u.log_pdf(x),
        }
    }

    /// The law itself if Gaussian, else its moment-matched Gaussian.
    pub fn gaussian(&self) -> Result<GaussianDensity> {
        match self {
            Self::Gaussian(g) => Ok(g.clone()),
            Self::Uniform(u) => gaussproc::moment_match(u),
        }
    }
}

/// What a diverged forward solve counts as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergencePolicy {
    /// A blow-up is an excursion; it is counted separately.
    #[default]
    Exceedance,
    /// A blow-up aborts the estimate.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub hit: bool,
    pub diverged: bool,
}

/// A rare event over a random initial state.
pub trait RareEvent: Sync {
    fn nominal(&self) -> &InitialLaw;
    /// Whether the event occurs from `x0`; each call is one model evaluation.
    fn indicator(&self, x0: &[f64]) -> Result<Outcome>;
}

/// Excursion of `cᵀx(t)` above `u` on `[0, T]` for an ODE model.
#[derive(Debug, Clone)]
pub struct ExcursionSpec<D> {
    model: D,
    init: InitialLaw,
    c: DVector<f64>,
    level: f64,
    grid: TimeGrid,
    divergence: DivergencePolicy,
}

impl<D: Dynamics> ExcursionSpec<D> {
    pub fn new(model: D, init: InitialLaw, c: DVector<f64>, level: f64, horizon: f64, step: f64) -> Result<Self> {
        check_dim(model.dim(), init.dim())?;
        check_dim(model.dim(), c.len())?;
        if level.is_nan() {
            return Err(Error::invalid("level must not be NaN"));
        }
        if c.iter().any(|v| !v.is_finite()) || c.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("observation functional c must be finite and nonzero"));
        }
        let grid = TimeGrid::new(horizon, step)?;
        if grid.n_steps() == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(Self {
            model,
            init,
            c,
            level,
            grid,
            divergence: DivergencePolicy::default(),
        })
    }

    pub fn with_divergence(mut self, policy: DivergencePolicy) -> Self {
        self.divergence = policy;
        self
    }

    pub fn model(&self) -> &D {
        &self.model
    }

    pub fn init(&self) -> &InitialLaw {
        &self.init
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn divergence(&self) -> DivergencePolicy {
        self.divergence
    }

    /// 1 iff `max_k cᵀx(t_k) ≥ u` over the grid nodes, `t = 0` included.
    /// The solve stops at the first node above the level.
    pub fn excursion_indicator(&self, x0: &[f64]) -> Result<Outcome> {
        check_dim(self.model.dim(), x0.len())?;
        let c = self.c.as_slice();
        let u = self.level;
        let mut hit = false;
        let res = dynamics::integrate_observed(&self.model, x0, &self.grid, |_, _, x| {
            let v: f64 = c.iter().zip(x).map(|(a, b)| a * b).sum();
            if v >= u {
                hit = true;
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        match res {
            Ok(()) => Ok(Outcome { hit, diverged: false }),
            Err(Error::IntegrationDiverged { .. }) if self.divergence == DivergencePolicy::Exceedance => Ok(Outcome {
                hit: true,
                diverged: true,
            }),
            Err(e) => Err(e),
        }
    }

    /// Rice integrand of the linearization at the (moment-matched) mean.
    pub fn rice_integrand(&self) -> Result<RiceIntegrand> {
        let prior = self.init.gaussian()?;
        let lin = gaussproc::linearize(&self.model, &prior)?;
        RiceIntegrand::new(lin, self.c.clone(), self.level, self.horizon())
    }
}

impl<D: Dynamics> RareEvent for ExcursionSpec<D> {
    fn nominal(&self) -> &InitialLaw {
        &self.init
    }

    fn indicator(&self, x0: &[f64]) -> Result<Outcome> {
        self.excursion_indicator(x0)
    }
}

/// Samples per random-stream block.
pub const BLOCK: usize = 1024;

/// Running estimate after the first `n_samples` draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub n_samples: usize,
    pub n_model_evals: usize,
    pub p_hat: f64,
    pub rel_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub p_hat: f64,
    pub n_samples: usize,
    /// ODE solves across all stages, estimation samples included.
    pub n_model_evals: usize,
    /// Estimated relative RMSE; `None` when `p_hat = 0`.
    pub rel_rmse: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub n_hits: usize,
    pub n_diverged: usize,
    pub trace: Vec<TracePoint>,
    /// Model evaluations per stage, summing to `n_model_evals`.
    pub stage_evals: Vec<(String, usize)>,
}

#[derive(Debug, Default)]
struct BlockOut {
    /// Global sample index and contribution of every nonzero term.
    terms: Vec<(usize, f64)>,
    n_hits: usize,
    n_diverged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Mc,
    Is,
}

fn run_blocks<E, F>(exec: &E, m: usize, seed: u64, draw: F) -> Result<BlockOut>
where
    E: Executor + ?Sized,
    F: Fn(&mut StreamRng) -> Result<(Outcome, f64)> + Sync + Send,
{
    let n_blocks = m.div_ceil(BLOCK);
    let blocks = exec.map(n_blocks, |b| -> Result<BlockOut> {
        let mut rng = rng::substream(seed, b as u64);
        let start = b * BLOCK;
        let end = (start + BLOCK).min(m);
        let mut out = BlockOut::default();
        for i in start..end {
            let (o, value) = draw(&mut rng)?;
            if o.diverged {
                out.n_diverged += 1;
            }
            if o.hit {
                out.n_hits += 1;
                if value != 0.0 {
                    out.terms.push((i, value));
                }
            }
        }
        Ok(out)
    });
    let mut all = BlockOut::default();
    for b in blocks {
        let b = b?;
        all.terms.extend(b.terms);
        all.n_hits += b.n_hits;
        all.n_diverged += b.n_diverged;
    }
    Ok(all)
}

fn rel_rmse(kind: Kind, sum: f64, sum_sq: f64, n: usize) -> Option<f64> {
    let nf = n as f64;
    let p = sum / nf;
    if !(p > 0.0) {
        return None;
    }
    let var = match kind {
        Kind::Mc => p - p * p,
        Kind::Is => (sum_sq / nf - p * p).max(0.0),
    };
    Some((var / nf).sqrt() / p)
}

/// Sample counts at which the running estimate is reported: about twenty
/// per decade, always ending at `m`.
pub fn trace_checkpoints(m: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut k = 0;
    loop {
        let n = libm::round(libm::pow(10.0, k as f64 / 20.0)) as usize;
        if n >= m {
            break;
        }
        if out.last() != Some(&n) {
            out.push(n);
        }
        k += 1;
    }
    out.push(m);
    out
}

fn assemble(kind: Kind, out: BlockOut, m: usize, eval_offset: usize) -> EstimateResult {
    let mut terms = out.terms;
    terms.sort_unstable_by_key(|t| t.0);
    let mut trace = Vec::new();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut it = terms.iter().peekable();
    for n in trace_checkpoints(m) {
        while let Some(&&(i, v)) = it.peek() {
            if i >= n {
                break;
            }
            sum += v;
            sum_sq += v * v;
            it.next();
        }
        trace.push(TracePoint {
            n_samples: n,
            n_model_evals: n + eval_offset,
            p_hat: sum / n as f64,
            rel_rmse: rel_rmse(kind, sum, sum_sq, n),
        });
    }
    let last = *trace.last().expect("at least one checkpoint");
    EstimateResult {
        p_hat: last.p_hat,
        n_samples: m,
        n_model_evals: m + eval_offset,
        rel_rmse: last.rel_rmse,
        ci95: None,
        n_hits: out.n_hits,
        n_diverged: out.n_diverged,
        trace,
        stage_evals: vec![(String::from("sampling"), m)],
    }
}

/// Plain Monte Carlo: fraction of `m` nominal draws that hit the event.
pub fn mc_estimate<S, E>(spec: &S, m: usize, seed: u64, exec: &E) -> Result<EstimateResult>
where
    S: RareEvent + ?Sized,
    E: Executor + ?Sized,
{
    if m == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let nominal = spec.nominal();
    let out = run_blocks(exec, m, seed, |rng| {
        let x = nominal.sample(rng);
        Ok((spec.indicator(x.as_slice())?, 1.0))
    })?;
    Ok(assemble(Kind::Mc, out, m, 0))
}

/// Importance sampling with biasing mixture `q`:
/// `(1/M) Σ 𝕀(x̂ᵢ) p(x̂ᵢ)/q(x̂ᵢ)`, `x̂ᵢ ~ q`.
pub fn is_estimate<S, E>(spec: &S, mix: &GaussianMixture, m: usize, seed: u64, exec: &E) -> Result<EstimateResult>
where
    S: RareEvent + ?Sized,
    E: Executor + ?Sized,
{
    if m == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let nominal = spec.nominal();
    check_dim(nominal.dim(), mix.dim())?;
    let out = run_blocks(exec, m, seed, |rng| {
        let x = mix.sample(rng);
        let o = spec.indicator(x.as_slice())?;
        let psi = if o.hit {
            (nominal.log_pdf(&x) - mix.log_pdf(&x)).exp()
        } else {
            0.0
        };
        Ok((o, psi))
    })?;
    Ok(assemble(Kind::Is, out, m, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverPath {
    /// MAP point and Laplace covariance per observation.
    Map,
    /// DRAM posterior chain per observation.
    Mcmc,
}

/// Settings of the estimation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub path: SolverPath,
    pub n_observations: usize,
    pub weight_mode: WeightMode,
    pub rice_burn_in: usize,
    /// Retained Rice-chain states before thinning.
    pub rice_samples: usize,
    pub max_lag: usize,
    pub lag_threshold: f64,
    pub fallback_lag: usize,
    /// Fit window as multiples of the state and slope standard deviations.
    pub window_scale: (f64, f64),
    pub window_points: usize,
    pub tau: f64,
    pub lbfgs: LbfgsConfig,
    pub posterior_burn_in: usize,
    pub posterior_samples: usize,
    /// Importance samples; ignored when `total_budget` is set.
    pub is_samples: usize,
    /// Total model evaluations; the importance samples get what remains
    /// after construction.
    pub total_budget: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            path: SolverPath::Map,
            n_observations: 1,
            weight_mode: WeightMode::Equal,
            rice_burn_in: 1000,
            rice_samples: 2000,
            max_lag: 50,
            lag_threshold: 0.05,
            fallback_lag: 11,
            window_scale: (0.05, 0.25),
            window_points: 11,
            tau: 1.0,
            lbfgs: LbfgsConfig::default(),
            posterior_burn_in: 500,
            posterior_samples: 500,
            is_samples: 800,
            total_budget: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observations == 0 {
            return Err(Error::invalid("pipeline needs at least one observation"));
        }
        if self.window_points < 5 {
            return Err(Error::invalid("likelihood window needs at least 5 points per axis"));
        }
        if !(self.window_scale.0 > 0.0 && self.window_scale.1 > 0.0) {
            return Err(Error::invalid("window scales must be positive"));
        }
        if self.max_lag == 0 || self.fallback_lag == 0 {
            return Err(Error::invalid("lags must be at least 1"));
        }
        if self.rice_samples <= self.max_lag {
            return Err(Error::invalid("Rice chain must be longer than the largest lag"));
        }
        if self.path == SolverPath::Mcmc && self.posterior_samples == 0 {
            return Err(Error::invalid("posterior chain needs at least one sample"));
        }
        if self.total_budget.is_none() && self.is_samples == 0 {
            return Err(Error::invalid("importance sampling needs at least one sample"));
        }
        Ok(())
    }
}

/// Seed tags for the pipeline's random stages.
const TAG_RICE: u64 = 1;
const TAG_IS: u64 = 2;
const TAG_POSTERIOR: u64 = 100;

/// Seed of the importance-sampling stage of a pipeline run with `seed`.
pub fn sampling_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, TAG_IS)
}

/// One observation and the posterior summary built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub observation: Observation,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_model_evals: usize,
    /// MAP path: optimizer convergence. MCMC path: always true.
    pub converged: bool,
    /// MCMC path: retained chain length. MAP path: zero.
    pub chain_length: usize,
}

/// Stages (i)–(vi): the biasing mixture and how it was built.
#[derive(Debug, Clone)]
pub struct Construction {
    pub prior: GaussianDensity,
    pub mixture: GaussianMixture,
    pub components: Vec<ComponentReport>,
    pub rice_lag: usize,
    pub rice_chain_len: usize,
    pub n_model_evals: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: EstimateResult,
    pub construction: Construction,
}

/// Starting point for the Rice chain: the largest integrand value over the
/// time nodes and a slope grid per node.
fn rice_start(table: &RiceTable, level: f64) -> Result<[f64; 2]> {
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for joint in table.nodes() {
        let Some((lo, hi)) = gaussproc::slope_window(joint, level) else {
            continue;
        };
        for j in 0..64 {
            let y = lo + (hi - lo) * (j as f64 + 0.5) / 64.0;
            let v = joint.log_rice(level, y)?;
            if v > best.0 {
                best = (v, [joint.t, y]);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::FlatLikelihood);
    }
    Ok(best.1)
}

/// Proposal covariance for the Rice chain from the local curvature of the
/// log target, or a diagonal guess when the curvature is not usable.
fn rice_proposal(table: &RiceTable, start: [f64; 2], step: f64) -> DMatrix<f64> {
    let f = |t: f64, y: f64| table.log_value(y, t).unwrap_or(f64::NEG_INFINITY);
    let [t0, y0] = start;
    let joint = table.joint(t0);
    let hy = 1e-3 * joint.slope_std().max(1e-3 * y0.abs()).max(1e-12);
    let ht = 2.0 * step;
    let fallback = DMatrix::from_diagonal(&DVector::from_vec(vec![
        (table.horizon() / 100.0).powi(2),
        (0.1 * (y0.abs() + joint.slope_std())).powi(2),
    ]));
    let t_lo = (t0 - ht).max(0.0);
    let t_hi = (t0 + ht).min(table.horizon());
    let tc = 0.5 * (t_lo + t_hi);
    let ht = 0.5 * (t_hi - t_lo);
    if !(ht > 0.0) || !(y0 - hy > 0.0) {
        return fallback;
    }
    let f0 = f(tc, y0);
    let htt = (f(tc + ht, y0) - 2.0 * f0 + f(tc - ht, y0)) / (ht * ht);
    let hyy = (f(tc, y0 + hy) - 2.0 * f0 + f(tc, y0 - hy)) / (hy * hy);
    let hty = (f(tc + ht, y0 + hy) - f(tc + ht, y0 - hy) - f(tc - ht, y0 + hy) + f(tc - ht, y0 - hy)) / (4.0 * ht * hy);
    let neg_h = Matrix2::new(-htt, -hty, -hty, -hyy);
    if !(neg_h[(0, 0)] > 0.0 && neg_h.determinant() > 0.0) || neg_h.iter().any(|v| !v.is_finite()) {
        return fallback;
    }
    let cov = neg_h.try_inverse().expect("positive determinant") * (2.4 * 2.4 / 2.0);
    let mut out = DMatrix::from_column_slice(2, 2, cov.as_slice());
    // a flat direction in t can give an enormous variance; keep it inside the horizon
    out[(0, 0)] = out[(0, 0)].min((table.horizon() / 4.0).powi(2));
    out[(0, 1)] = 0.0;
    out[(1, 0)] = 0.0;
    if linalg_ok(&out) {
        out
    } else {
        fallback
    }
}

fn linalg_ok(m: &DMatrix<f64>) -> bool {
    crate::linalg::cholesky(m, "proposal").is_ok()
}

/// DRAM chain over `(t, y)` whose target is the tabulated Rice integrand.
pub fn rice_chain(table: &RiceTable, level: f64, step: f64, cfg: &PipelineConfig) -> Result<Chain> {
    let target = FnDensity::new(2, |z: &[f64]| table.log_value(z[1], z[0]).unwrap_or(f64::NEG_INFINITY));
    let start = rice_start(table, level)?;
    let c0 = rice_proposal(table, start, step);
    let n_keep = cfg.rice_samples.max(cfg.n_observations * cfg.max_lag + 1);
    let dram = DramConfig::new(c0, n_keep, rng::derive_seed(cfg.seed, TAG_RICE)).with_burn_in(cfg.rice_burn_in);
    mcmc::dram_run(&target, &dram, &start)
}

/// Stage (iii): `n` thinned `(t, y)` draws from `y φ_t(u, y)`.
fn sample_observation_points(
    table: &RiceTable,
    level: f64,
    step: f64,
    cfg: &PipelineConfig,
) -> Result<(Vec<[f64; 2]>, usize, usize)> {
    let chain = rice_chain(table, level, step, cfg)?;
    let lag = mcmc::select_lag(&chain, cfg.max_lag, cfg.lag_threshold, cfg.fallback_lag);
    let thinned = chain.thin(lag)?;
    if thinned.len() < cfg.n_observations {
        return Err(Error::InsufficientSamples {
            needed: cfg.n_observations,
            got: thinned.len(),
        });
    }
    let pts = thinned.states().take(cfg.n_observations).map(|s| [s[0], s[1]]).collect();
    Ok((pts, lag, chain.len()))
}

/// Stages (i)–(vi): moment matching, linearization, Rice sampling,
/// likelihood covariances, per-observation inverse problems and the mixture.
pub fn construct_ibd<D, E>(spec: &ExcursionSpec<D>, cfg: &PipelineConfig, exec: &E) -> Result<Construction>
where
    D: Dynamics,
    E: Executor + ?Sized,
{
    cfg.validate()?;
    let prior = spec.init().gaussian().map_err(|e| e.in_stage("moment matching"))?;
    if let InitialLaw::Uniform(_) = spec.init() {
        log::info!("moment-matched initial law: mean {:?}", prior.mean().as_slice());
    }
    let rice = spec.rice_integrand().map_err(|e| e.in_stage("linearization"))?;
    let step = spec.grid().step();
    let table = RiceTable::new(&rice, step).map_err(|e| e.in_stage("linearization"))?;

    let (points, lag, chain_len) =
        sample_observation_points(&table, spec.level(), step, cfg).map_err(|e| e.in_stage("rice sampling"))?;
    log::debug!("Rice chain: {chain_len} states, thinning lag {lag}");

    let grid = spec.grid();
    let mut observations = Vec::with_capacity(points.len());
    for [t, y] in points {
        let t_obs = grid.time(grid.nearest_node(t));
        let joint = rice.propagate_joint(t_obs);
        let window = (cfg.window_scale.0 * joint.state_std(), cfg.window_scale.1 * joint.slope_std());
        let gamma = inverse::build_likelihood_cov(&rice, spec.level(), y, t_obs, window, cfg.window_points)
            .map_err(|e| e.in_stage("likelihood covariance"))?;
        let hint = rice.value(y, t_obs).map_err(|e| e.in_stage("likelihood covariance"))?;
        observations.push(Observation::new(spec.level(), y, t_obs, gamma, hint).map_err(|e| e.in_stage("likelihood covariance"))?);
    }

    let reports = exec.map(observations.len(), |i| -> Result<ComponentReport> {
        let obs = observations[i];
        let problem = PosteriorProblem::new(spec.model(), prior.clone(), obs, spec.c().clone(), grid, cfg.tau)?;
        match cfg.path {
            SolverPath::Map => {
                let r = inverse::map_solve(&problem, prior.mean().as_slice(), &cfg.lbfgs)?;
                if !r.converged {
                    log::warn!("MAP solve for observation {i} stopped before the gradient tolerance");
                }
                Ok(ComponentReport {
                    observation: obs,
                    mean: r.x_map,
                    cov: r.post_cov,
                    n_model_evals: r.n_model_evals,
                    converged: r.converged,
                    chain_length: 0,
                })
            }
            SolverPath::Mcmc => {
                let d = prior.dim();
                let c0 = prior.cov() * (2.4 * 2.4 / d as f64);
                let seed = rng::derive_seed(cfg.seed, TAG_POSTERIOR + i as u64);
                let dram = DramConfig::new(c0, cfg.posterior_samples, seed).with_burn_in(cfg.posterior_burn_in);
                let chain = inverse::posterior_sample(&problem, &dram)?;
                let (mean, cov) = ibd::moments_from_chain(&chain)?;
                Ok(ComponentReport {
                    observation: obs,
                    mean,
                    cov,
                    n_model_evals: problem.n_model_evals(),
                    converged: true,
                    chain_length: chain.len(),
                })
            }
        }
    });
    let components: Vec<ComponentReport> = reports
        .into_iter()
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("posterior"))?;

    let specs = components
        .iter()
        .map(|c| ComponentSpec {
            mean: c.mean.clone(),
            cov: c.cov.clone(),
            weight_hint: c.observation.weight_hint,
        })
        .collect();
    let mixture = ibd::build_ibd(specs, cfg.weight_mode).map_err(|e| e.in_stage("mixture"))?;
    let n_model_evals = components.iter().map(|c| c.n_model_evals).sum();
    Ok(Construction {
        prior,
        mixture,
        components,
        rice_lag: lag,
        rice_chain_len: chain_len,
        n_model_evals,
    })
}

/// The full pipeline: construct the biasing mixture, then importance-sample.
pub fn estimate_excursion_probability<D, E>(
    spec: &ExcursionSpec<D>,
    cfg: &PipelineConfig,
    exec: &E,
) -> Result<PipelineOutput>
where
    D: Dynamics,
    E: Executor + ?Sized,
{
    let construction = construct_ibd(spec, cfg, exec)?;
    let m = match cfg.total_budget {
        Some(b) => b.checked_sub(construction.n_model_evals).filter(|&m| m > 0).ok_or_else(|| {
            Error::invalid(format!(
                "budget of {b} model evaluations is used up by construction ({})",
                construction.n_model_evals
            ))
            .in_stage("importance sampling")
        })?,
        None => cfg.is_samples,
    };
    let result = reuse_ibd(spec, &construction, m, sampling_seed(cfg.seed), exec)?;
    Ok(PipelineOutput { result, construction })
}

/// Stage (vii) for a mixture built earlier: importance sampling with the
/// construction cost carried into the evaluation count.
pub fn reuse_ibd<S, E>(spec: &S, construction: &Construction, m: usize, seed: u64, exec: &E) -> Result<EstimateResult>
where
    S: RareEvent + ?Sized,
    E: Executor + ?Sized,
{
    let mut result = is_estimate(spec, &construction.mixture, m, seed, exec).map_err(|e| e.in_stage("importance sampling"))?;
    let offset = construction.n_model_evals;
    for p in &mut result.trace {
        p.n_model_evals += offset;
    }
    result.n_model_evals += offset;
    result.stage_evals = construction
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("posterior {i}"), c.n_model_evals))
        .chain(core::iter::once((String::from("importance sampling"), m)))
        .collect();
    Ok(result)
}

/// Mean and empirical 2.5% / 97.5% percentiles of repeated estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CiSummary {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub estimates: Vec<f64>,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Repeat `run(seed_r)` for `n_repeats` derived seeds and summarize.
pub fn confidence_intervals_with<E, F>(n_repeats: usize, seed: u64, exec: &E, run: F) -> Result<CiSummary>
where
    E: Executor + ?Sized,
    F: Fn(u64) -> Result<f64> + Sync + Send,
{
    if n_repeats < 10 {
        return Err(Error::invalid("confidence intervals need at least 10 repetitions"));
    }
    let estimates: Vec<f64> = exec
        .map(n_repeats, |r| run(rng::derive_seed(seed, r as u64)))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(CiSummary {
        mean: estimates.iter().sum::<f64>() / n_repeats as f64,
        lo: percentile(&sorted, 0.025),
        hi: percentile(&sorted, 0.975),
        estimates,
    })
}

/// Spread of the pipeline estimate over `n_repeats` seeded repetitions.
pub fn confidence_intervals<D, E>(
    spec: &ExcursionSpec<D>,
    cfg: &PipelineConfig,
    n_repeats: usize,
    seed: u64,
    exec: &E,
) -> Result<CiSummary>
where
    D: Dynamics,
    E: Executor + ?Sized,
{
    confidence_intervals_with(n_repeats, seed, exec, |s| {
        let cfg = PipelineConfig { seed: s, ..cfg.clone() };
        Ok(estimate_excursion_probability(spec, &cfg, &Serial)?.result.p_hat)
    })
}
