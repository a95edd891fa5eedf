//! Gaussian-mixture importance-biasing distribution built from per-observation
//! posterior summaries.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::gaussproc::GaussianDensity;
use crate::linalg;
use crate::mcmc::Chain;
use crate::rng;

/// Eigenvalue floor applied to component covariances.
pub const COV_FLOOR: f64 = 1e-10;

/// Sample mean and unbiased covariance of a chain's states.
pub fn moments_from_chain(chain: &Chain) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = chain.dim();
    if chain.len() < d + 1 {
        return Err(Error::InsufficientSamples {
            needed: d + 1,
            got: chain.len(),
        });
    }
    let cov = chain.covariance()?;
    if cov.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((chain.mean(), cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `wᵢ = 1/N`.
    Equal,
    /// `wᵢ ∝ yᵢ φ_{tᵢ}(u, yᵢ)`.
    RiceWeighted,
}

/// Mean, covariance and weight hint of one posterior summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub weight_hint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub density: GaussianDensity,
}

/// `Σ wᵢ N(x̄ᵢ, X̄ᵢ)` with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    /// Mixture from explicit weights; weights are renormalized and
    /// covariances regularized to be SPD.
    pub fn new(parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let d = first.1.len();
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if parts.iter().any(|p| !(p.0 >= 0.0) || !p.0.is_finite()) || !(total > 0.0) {
            return Err(Error::invalid("mixture weights must be non-negative with positive sum"));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (w, mean, cov) in parts {
            check_dim(d, mean.len())?;
            check_dim(d, cov.nrows())?;
            let cov = linalg::regularize_spd(&cov, COV_FLOOR);
            components.push(MixtureComponent {
                weight: w / total,
                density: GaussianDensity::new(mean, cov)?,
            });
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            components,
            log_weights,
            cumulative,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].density.dim()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Draw one point. A single-component mixture skips the component draw,
    /// so it consumes randomness exactly like its Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = if self.components.len() == 1 {
            0
        } else {
            let s: f64 = rng.random();
            self.cumulative
                .iter()
                .position(|&c| s < c)
                .unwrap_or(self.components.len() - 1)
        };
        self.components[k].density.sample(rng)
    }

    /// `n` seeded draws as an `n × d` matrix.
    pub fn sample_n(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::seeded(seed);
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            out.set_row(i, &self.sample(&mut rng).transpose());
        }
        out
    }

    /// `log Σ wᵢ N(x; x̄ᵢ, X̄ᵢ)` with log-sum-exp.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.density.log_pdf(x))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// Mixture mean `Σ wᵢ x̄ᵢ`.
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, c| acc + c.density.mean() * c.weight)
    }

    /// Mixture covariance `Σ wᵢ (X̄ᵢ + x̄ᵢx̄ᵢᵀ) − m mᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim();
        let second = self.components.iter().fold(DMatrix::zeros(d, d), |acc, c| {
            let mu = c.density.mean();
            acc + (c.density.cov() + mu * mu.transpose()) * c.weight
        });
        second - &m * m.transpose()
    }
}

/// Importance-biasing mixture from posterior summaries.
///
/// In rice-weighted mode, all-zero hints fall back to equal weights.
pub fn build_ibd(components: Vec<ComponentSpec>, mode: WeightMode) -> Result<GaussianMixture> {
    if components.is_empty() {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    let n = components.len() as f64;
    let hint_total: f64 = components.iter().map(|c| c.weight_hint).sum();
    if components.iter().any(|c| !(c.weight_hint >= 0.0)) {
        return Err(Error::invalid("weight hints must be non-negative"));
    }
    let rice = match mode {
        WeightMode::RiceWeighted if hint_total > 0.0 && hint_total.is_finite() => true,
        WeightMode::RiceWeighted => {
            log::warn!("all Rice weight hints are zero; using equal mixture weights");
            false
        }
        WeightMode::Equal => false,
    };
    let parts = components
        .into_iter()
        .map(|c| {
            let w = if rice { c.weight_hint / hint_total } else { 1.0 / n };
            (w, c.mean, c.cov)
        })
        .collect();
    GaussianMixture::new(parts)
}
