use excursia_core::dynamics::{LinearModel, Lorenz96, TimeGrid};
use excursia_core::estimate::{self, InitialLaw, RareEvent, Serial};
use excursia_core::gaussproc::{self, GaussianDensity, Quadrature, RiceIntegrand};
use excursia_core::ibd::GaussianMixture;
use excursia_core::inverse::{Observation, PosteriorProblem};
use excursia_core::linalg;
use excursia_core::rng;
use nalgebra::{dmatrix, dvector, DMatrix, DVector, Matrix2};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

/// `x'' + 2ζx' + x = 0` as a first-order system.
fn oscillator(zeta: f64) -> DMatrix<f64> {
    dmatrix![0.0, 1.0; -1.0, -2.0 * zeta]
}

/// Upcrossings of level `u` by `x₁(t)` on `(0, T]` from exact solutions
/// sampled every `h`.
fn count_upcrossings(a: &DMatrix<f64>, x0: DVector<f64>, u: f64, t_end: f64, h: f64) -> usize {
    let step = linalg::expm(&(a * h));
    let n = (t_end / h).round() as usize;
    let mut x = x0;
    let mut n_up = 0;
    for _ in 0..n {
        let next = &step * &x;
        if x[0] < u && next[0] >= u {
            n_up += 1;
        }
        x = next;
    }
    n_up
}

#[test]
fn expected_upcrossings_match_a_counting_oracle() {
    let (zeta, u, t_end) = (0.1, 1.0, 5.0);
    let a = oscillator(zeta);
    let model = LinearModel::homogeneous(a.clone()).unwrap();
    let init = GaussianDensity::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
    let lin = gaussproc::linearize(&model, &init).unwrap();
    let rice = RiceIntegrand::new(lin, dvector![1.0, 0.0], u, t_end).unwrap();
    let expected = rice.expected_upcrossings(&Quadrature::default()).unwrap();

    let m = 40_000;
    let mut r = rng::seeded(17);
    let counts: Vec<f64> = (0..m)
        .map(|_| {
            let x0 = dvector![StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
            count_upcrossings(&a, x0, u, t_end, 2e-3) as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / m as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let se = (var / m as f64).sqrt();
    assert!((expected - mean).abs() < 3.0 * se, "Rice {expected} vs counted {mean} ± {se}");
}

#[test]
fn gauss_newton_hessian_is_symmetric_and_psd_on_lorenz96() {
    let model = Lorenz96::new(8, 3.0).unwrap();
    let prior = GaussianDensity::isotropic(DVector::from_element(8, 2.0), 0.5).unwrap();
    let obs = Observation::new(6.0, 1.0, 0.7, Matrix2::new(0.04, 0.0, 0.0, 0.09), 1.0).unwrap();
    let grid = TimeGrid::new(2.0, 0.01).unwrap();
    let c = DVector::from_fn(8, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let p = PosteriorProblem::new(&model, prior, obs, c, &grid, 1.0).unwrap();
    let x: Vec<f64> = (0..8).map(|i| 2.0 + 0.3 * (i as f64).sin()).collect();
    let h = DMatrix::from_columns(
        &(0..8)
            .map(|j| p.gn_hessian_vec(&x, DVector::from_fn(8, |i, _| (i == j) as u8 as f64).as_slice()).unwrap())
            .collect::<Vec<_>>(),
    );
    let asym = (&h - h.transpose()).abs().max() / h.abs().max();
    assert!(asym < 1e-8, "asymmetry {asym}");
    assert!(linalg::min_eigenvalue(&linalg::symmetrize(&h)) > -1e-10);
}

struct Tail {
    law: InitialLaw,
    a: f64,
}

impl RareEvent for Tail {
    fn nominal(&self) -> &InitialLaw {
        &self.law
    }

    fn indicator(&self, x0: &[f64]) -> excursia_core::Result<estimate::Outcome> {
        Ok(estimate::Outcome {
            hit: x0[0] >= self.a,
            diverged: false,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nominal_biasing_is_plain_monte_carlo(seed in any::<u64>(), m in 1usize..3000, a in -1.0f64..2.0, var in 0.2f64..3.0) {
        let law = GaussianDensity::isotropic(dvector![0.5], var).unwrap();
        let mix = GaussianMixture::new(vec![(1.0, dvector![0.5], dmatrix![var])]).unwrap();
        let tail = Tail { law: InitialLaw::Gaussian(law), a };
        let is = estimate::is_estimate(&tail, &mix, m, seed, &Serial).unwrap();
        let mc = estimate::mc_estimate(&tail, m, seed, &Serial).unwrap();
        prop_assert_eq!(is.p_hat, mc.p_hat);
        prop_assert_eq!(is.n_hits, mc.n_hits);
    }

    #[test]
    fn estimates_are_probabilities_with_a_consistent_trace(seed in any::<u64>(), m in 1usize..5000, a in -3.0f64..3.0) {
        let law = InitialLaw::Gaussian(GaussianDensity::isotropic(dvector![0.0], 1.0).unwrap());
        let r = estimate::mc_estimate(&Tail { law, a }, m, seed, &Serial).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p_hat));
        prop_assert_eq!(r.trace.last().unwrap().p_hat, r.p_hat);
        prop_assert!(r.trace.windows(2).all(|w| w[0].n_samples < w[1].n_samples));
        prop_assert_eq!(r.p_hat == 0.0, r.rel_rmse.is_none());
    }

    #[test]
    fn mixture_weights_are_normalized(ws in proptest::collection::vec(0.01f64..10.0, 1..6)) {
        let parts = ws.iter().enumerate().map(|(i, &w)| (w, dvector![i as f64, 0.0], DMatrix::identity(2, 2))).collect();
        let mix = GaussianMixture::new(parts).unwrap();
        let total: f64 = mix.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interval_brackets_the_median(xs in proptest::collection::vec(-1e3f64..1e3, 10..60)) {
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let lo = estimate::percentile(&s, 0.025);
        let mid = estimate::percentile(&s, 0.5);
        let hi = estimate::percentile(&s, 0.975);
        prop_assert!(s[0] <= lo && lo <= mid && mid <= hi && hi <= s[s.len() - 1]);
    }
}
