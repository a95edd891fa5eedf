//! Random-walk Metropolis-Hastings and delayed-rejection adaptive Metropolis
//! (DRAM) over unnormalized log-densities, plus chain diagnostics.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Chol};
use crate::rng;

/// Unnormalized log-density. Returns `-∞` outside the support, never NaN.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }
}

impl<T: LogDensity + ?Sized> LogDensity for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }
}

/// Wraps a closure as a [`LogDensity`].
#[derive(Clone, Copy)]
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let v = (self.f)(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// Retained states of a Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    dim: usize,
    states: Vec<f64>,
    log_densities: Vec<f64>,
    acceptance: Vec<f64>,
    n_evals: usize,
}

impl Chain {
    /// Assemble a chain from row-major states. Mainly for tests and IO.
    pub fn from_states(dim: usize, states: Vec<f64>, log_densities: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() != dim * log_densities.len() {
            return Err(Error::invalid("chain states do not match dimension"));
        }
        Ok(Self {
            dim,
            states,
            log_densities,
            acceptance: Vec::new(),
            n_evals: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_densities.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn log_densities(&self) -> &[f64] {
        &self.log_densities
    }

    /// Fraction of proposals accepted at each delayed-rejection stage,
    /// counted over the iterations that reached that stage.
    pub fn acceptance_rate_per_stage(&self) -> &[f64] {
        &self.acceptance
    }

    /// Target evaluations spent producing the chain, burn-in included.
    pub fn n_evals(&self) -> usize {
        self.n_evals
    }

    /// States as an `n × dim` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.states)
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for s in self.states() {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        m / self.len() as f64
    }

    /// Unbiased sample covariance; needs at least two states.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: self.len(),
            });
        }
        let mut acc = RunningMoments::new(self.dim);
        for s in self.states() {
            acc.push(s);
        }
        Ok(acc.covariance().expect("at least two states"))
    }

    /// Every `lag`-th state, starting with the first.
    pub fn thin(&self, lag: usize) -> Result<Chain> {
        if lag == 0 {
            return Err(Error::invalid("thinning lag must be at least 1"));
        }
        let mut states = Vec::with_capacity(self.states.len() / lag + self.dim);
        let mut lds = Vec::with_capacity(self.len() / lag + 1);
        for i in (0..self.len()).step_by(lag) {
            states.extend_from_slice(self.state(i));
            lds.push(self.log_densities[i]);
        }
        Ok(Chain {
            dim: self.dim,
            states,
            log_densities: lds,
            acceptance: self.acceptance.clone(),
            n_evals: self.n_evals,
        })
    }
}

/// Recursive sample mean and scatter matrix (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let d = self.mean.len();
        let mut delta = DVector::zeros(d);
        for i in 0..d {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for j in 0..d {
            let dj = x[j] - self.mean[j];
            for i in 0..d {
                self.scatter[(i, j)] += delta[i] * dj;
            }
        }
    }

    /// Unbiased covariance, `None` before two points.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.count >= 2).then(|| linalg::symmetrize(&self.scatter) / (self.count - 1) as f64)
    }

    /// Adaptive-Metropolis proposal covariance after `count` states:
    /// `C₀` while `count ≤ n₀`, else `s_d Cov + s_d ε I`.
    pub fn proposal_cov(&self, c0: &DMatrix<f64>, n0: usize, sd: f64, eps: f64) -> DMatrix<f64> {
        match self.covariance() {
            Some(cov) if self.count > n0 => {
                let d = cov.nrows();
                cov * sd + DMatrix::identity(d, d) * (sd * eps)
            }
            _ => c0.clone(),
        }
    }
}

/// Gaussian random-walk proposal `N(x, scale · L Lᵀ)`.
#[derive(Debug, Clone)]
struct StageProposal {
    chol: Chol,
    scale: f64,
    log_norm: f64,
}

impl StageProposal {
    fn new(chol: Chol, scale: f64) -> Self {
        let d = chol.l_dirty().nrows() as f64;
        let log_norm = -0.5 * (linalg::log_det(&chol) + d * scale.ln());
        Self { chol, scale, log_norm }
    }

    fn from_cov(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self::new(linalg::cholesky(cov, "proposal covariance")?, 1.0))
    }

    /// `log N(to; from, scale·C)` up to the `(2π)^{-d/2}` constant.
    fn log_pdf(&self, to: &[f64], from: &[f64]) -> f64 {
        let r = DVector::from_iterator(to.len(), to.iter().zip(from).map(|(a, b)| a - b));
        self.log_norm - 0.5 * linalg::inv_quad_form(&self.chol, &r) / self.scale
    }

    fn draw<R: Rng + ?Sized>(&self, from: &[f64], rng: &mut R) -> Vec<f64> {
        let d = from.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = self.chol.l_dirty().lower_triangle() * z * self.scale.sqrt();
        from.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
    }
}

fn first_stage_alpha(lp_from: f64, lp_to: f64) -> f64 {
    if lp_to == f64::NEG_INFINITY {
        0.0
    } else {
        (lp_to - lp_from).exp().min(1.0)
    }
}

/// Log of `π(p₀) Π qᵢ(p₀ → pᵢ) Π_{i<k} (1 − αᵢ(p₀, …, pᵢ))`.
fn dr_log_weight(pts: &[&[f64]], lps: &[f64], stages: &[StageProposal]) -> f64 {
    let k = pts.len() - 1;
    let mut w = lps[0];
    for i in 1..=k {
        w += stages[i - 1].log_pdf(pts[i], pts[0]);
    }
    for i in 1..k {
        let a = dr_alpha(&pts[..=i], &lps[..=i], stages);
        w += (1.0 - a).ln();
    }
    w
}

/// Delayed-rejection acceptance probability of the last point in `pts`
/// given the current point `pts[0]` and the rejected intermediate proposals.
fn dr_alpha(pts: &[&[f64]], lps: &[f64], stages: &[StageProposal]) -> f64 {
    let k = pts.len() - 1;
    if k == 1 {
        return first_stage_alpha(lps[0], lps[1]);
    }
    if lps[k] == f64::NEG_INFINITY {
        return 0.0;
    }
    let den = dr_log_weight(pts, lps, stages);
    let rev_pts: Vec<&[f64]> = pts.iter().rev().copied().collect();
    let rev_lps: Vec<f64> = lps.iter().rev().copied().collect();
    let num = dr_log_weight(&rev_pts, &rev_lps, stages);
    if num == f64::NEG_INFINITY {
        return 0.0;
    }
    if den == f64::NEG_INFINITY {
        return 1.0;
    }
    (num - den).exp().min(1.0)
}

/// Two-stage delayed-rejection acceptance `α₂(ξ, λ₁, λ₂)` with first-stage
/// proposal `N(ξ, q1_cov)` and second-stage proposal `N(ξ, q2_cov)`.
pub fn dr_acceptance_stage2<T: LogDensity + ?Sized>(
    target: &T,
    q1_cov: &DMatrix<f64>,
    q2_cov: &DMatrix<f64>,
    xi: &[f64],
    lambda1: &[f64],
    lambda2: &[f64],
) -> Result<f64> {
    let d = target.dim();
    for v in [xi, lambda1, lambda2] {
        check_dim(d, v.len())?;
    }
    let stages = [StageProposal::from_cov(q1_cov)?, StageProposal::from_cov(q2_cov)?];
    let lps = [
        target.log_density(xi),
        target.log_density(lambda1),
        target.log_density(lambda2),
    ];
    Ok(dr_alpha(&[xi, lambda1, lambda2], &lps, &stages))
}

/// Full Metropolis-Hastings ratio `min(1, π(z)Q(z,x) / (π(x)Q(x,z)))` for the
/// Gaussian random-walk proposal `Q(x, ·) = N(x, proposal_cov)`.
pub fn mh_acceptance<T: LogDensity + ?Sized>(
    target: &T,
    proposal_cov: &DMatrix<f64>,
    x: &[f64],
    z: &[f64],
) -> Result<f64> {
    let q = StageProposal::from_cov(proposal_cov)?;
    let (lx, lz) = (target.log_density(x), target.log_density(z));
    if lz == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let log_ratio = lz + q.log_pdf(x, z) - lx - q.log_pdf(z, x);
    Ok(log_ratio.exp().min(1.0))
}

/// DRAM settings. `stage_scales[i]` is `γ_{i+2}`; the first stage uses the
/// adapted covariance unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct DramConfig {
    pub n_stages: usize,
    pub stage_scales: Vec<f64>,
    pub adapt_start: usize,
    /// `None` selects `2.4² / dim`.
    pub adapt_scale: Option<f64>,
    pub adapt_jitter: f64,
    pub initial_cov: DMatrix<f64>,
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl DramConfig {
    pub fn new(initial_cov: DMatrix<f64>, n_samples: usize, seed: u64) -> Self {
        Self {
            n_stages: 2,
            stage_scales: vec![1.0 / 25.0],
            adapt_start: 200,
            adapt_scale: None,
            adapt_jitter: 1e-8,
            initial_cov,
            burn_in: 0,
            n_samples,
            seed,
        }
    }

    /// Plain random-walk Metropolis: one stage, no adaptation.
    pub fn metropolis(proposal_cov: DMatrix<f64>, n_samples: usize, seed: u64) -> Self {
        Self {
            n_stages: 1,
            stage_scales: Vec::new(),
            adapt_start: usize::MAX,
            ..Self::new(proposal_cov, n_samples, seed)
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::invalid("DRAM needs at least one stage"));
        }
        if self.stage_scales.len() != self.n_stages - 1 {
            return Err(Error::invalid("DRAM needs one scale per delayed-rejection stage"));
        }
        if self.stage_scales.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::invalid("stage scales must be positive"));
        }
        if self.stage_scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("stage scales must be strictly decreasing"));
        }
        if self.adapt_start == 0 {
            return Err(Error::invalid("adaptation start must be at least 1"));
        }
        if let Some(sd) = self.adapt_scale {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::invalid("adaptation scale must be positive"));
            }
        }
        if !(self.adapt_jitter > 0.0) {
            return Err(Error::invalid("adaptation jitter must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("DRAM needs at least one sample"));
        }
        check_dim(dim, self.initial_cov.nrows())?;
        linalg::cholesky(&self.initial_cov, "initial proposal covariance")?;
        Ok(())
    }
}

/// Random-walk Metropolis-Hastings with proposal `N(x, proposal_cov)`.
/// Returns the `n` states visited after `x_init`.
pub fn mh_run<T: LogDensity + ?Sized>(
    target: &T,
    proposal_cov: &DMatrix<f64>,
    x_init: &[f64],
    n: usize,
    seed: u64,
) -> Result<Chain> {
    check_dim(target.dim(), x_init.len())?;
    check_dim(target.dim(), proposal_cov.nrows())?;
    if n == 0 {
        return Err(Error::invalid("chain length must be at least 1"));
    }
    let q = StageProposal::from_cov(proposal_cov)?;
    let mut lp = target.log_density(x_init);
    if !lp.is_finite() {
        return Err(Error::InvalidStart);
    }
    let mut rng = rng::seeded(seed);
    let d = target.dim();
    let mut x = x_init.to_vec();
    let mut states = Vec::with_capacity(n * d);
    let mut lds = Vec::with_capacity(n);
    let mut accepted = 0usize;
    for _ in 0..n {
        let z = q.draw(&x, &mut rng);
        let lz = target.log_density(&z);
        let s: f64 = rng.random();
        if s < first_stage_alpha(lp, lz) {
            x = z;
            lp = lz;
            accepted += 1;
        }
        states.extend_from_slice(&x);
        lds.push(lp);
    }
    Ok(Chain {
        dim: d,
        states,
        log_densities: lds,
        acceptance: vec![accepted as f64 / n as f64],
        n_evals: n + 1,
    })
}

/// Delayed-rejection adaptive Metropolis. Burn-in states feed the adaptation
/// but are not returned.
pub fn dram_run<T: LogDensity + ?Sized>(target: &T, config: &DramConfig, x_init: &[f64]) -> Result<Chain> {
    let d = target.dim();
    check_dim(d, x_init.len())?;
    config.validate(d)?;
    let mut lp = target.log_density(x_init);
    if !lp.is_finite() {
        return Err(Error::InvalidStart);
    }
    let sd = config.adapt_scale.unwrap_or(2.4 * 2.4 / d as f64);
    let m = config.n_stages;
    let scales: Vec<f64> = core::iter::once(1.0).chain(config.stage_scales.iter().copied()).collect();
    let build = |cov: &DMatrix<f64>| -> Result<Vec<StageProposal>> {
        let chol = linalg::cholesky(cov, "adapted proposal covariance")?;
        Ok(scales.iter().map(|&g| StageProposal::new(chol.clone(), g)).collect())
    };
    let mut stages = build(&config.initial_cov)?;

    let mut rng = rng::seeded(config.seed);
    let mut moments = RunningMoments::new(d);
    let mut x = x_init.to_vec();
    moments.push(&x);
    let total = config.burn_in + config.n_samples;
    let mut states = Vec::with_capacity(config.n_samples * d);
    let mut lds = Vec::with_capacity(config.n_samples);
    let mut tried = vec![0usize; m];
    let mut accepted = vec![0usize; m];
    let mut n_evals = 1usize;

    for it in 0..total {
        let keep = it >= config.burn_in;
        let mut pts: Vec<Vec<f64>> = vec![x.clone()];
        let mut lps = vec![lp];
        for j in 0..m {
            let z = stages[j].draw(&x, &mut rng);
            let lz = target.log_density(&z);
            n_evals += 1;
            let s: f64 = rng.random();
            pts.push(z);
            lps.push(lz);
            let alpha = if j == 0 {
                first_stage_alpha(lp, lz)
            } else {
                let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
                dr_alpha(&refs, &lps, &stages)
            };
            if keep {
                tried[j] += 1;
            }
            if s < alpha {
                x = pts.pop().expect("proposal just pushed");
                lp = lz;
                if keep {
                    accepted[j] += 1;
                }
                break;
            }
        }
        moments.push(&x);
        if moments.count() > config.adapt_start {
            let cov = moments.proposal_cov(&config.initial_cov, config.adapt_start, sd, config.adapt_jitter);
            // keep the previous proposal if rounding broke positive definiteness
            if let Ok(s) = build(&cov) {
                stages = s;
            }
        }
        if keep {
            states.extend_from_slice(&x);
            lds.push(lp);
        }
    }
    let acceptance = tried
        .iter()
        .zip(&accepted)
        .map(|(&t, &a)| if t == 0 { 0.0 } else { a as f64 / t as f64 })
        .collect();
    Ok(Chain {
        dim: d,
        states,
        log_densities: lds,
        acceptance,
        n_evals,
    })
}

/// Biased autocorrelation estimate for lags `0..=max_lag`, the maximum over
/// coordinates at each lag. Constant coordinates are skipped.
pub fn autocorrelation(chain: &Chain, max_lag: usize) -> Result<Vec<f64>> {
    let n = chain.len();
    if n <= max_lag {
        return Err(Error::InsufficientSamples {
            needed: max_lag + 1,
            got: n,
        });
    }
    let mean = chain.mean();
    let mut out = vec![f64::NEG_INFINITY; max_lag + 1];
    let mut any = false;
    let mut series = vec![0.0; n];
    for j in 0..chain.dim() {
        for (i, s) in chain.states().enumerate() {
            series[i] = s[j] - mean[j];
        }
        let c0: f64 = series.iter().map(|v| v * v).sum();
        if !(c0 > 0.0) {
            continue;
        }
        any = true;
        for (k, o) in out.iter_mut().enumerate() {
            let ck: f64 = series[..n - k].iter().zip(&series[k..]).map(|(a, b)| a * b).sum();
            *o = o.max(ck / c0);
        }
    }
    if !any {
        return Err(Error::ZeroVariance);
    }
    out[0] = 1.0;
    Ok(out)
}

/// First lag whose autocorrelation drops below `threshold`, or `fallback`
/// when none does within `max_lag` or the estimate fails.
pub fn select_lag(chain: &Chain, max_lag: usize, threshold: f64, fallback: usize) -> usize {
    let max_lag = max_lag.min(chain.len().saturating_sub(1));
    match autocorrelation(chain, max_lag) {
        Ok(acf) => acf
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, &r)| r < threshold)
            .map_or(fallback, |(k, _)| k),
        Err(_) => fallback,
    }
}
