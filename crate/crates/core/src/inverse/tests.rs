use super::*;
use crate::dynamics::{LinearModel, LotkaVolterra};
use crate::gaussproc::linearize;
use nalgebra::{dmatrix, dvector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn lv() -> LotkaVolterra {
    LotkaVolterra::new(1.0, 0.2, 1.0, 0.2).unwrap()
}

fn lv_problem(model: &LotkaVolterra, gamma: Matrix2<f64>) -> PosteriorProblem<'_, LotkaVolterra> {
    let prior = GaussianDensity::isotropic(dvector![10.0, 10.0], 0.8).unwrap();
    let obs = Observation::new(17.0, 3.0, 2.0, gamma, 1.0).unwrap();
    let grid = TimeGrid::new(10.0, 0.01).unwrap();
    PosteriorProblem::new(model, prior, obs, dvector![0.0, 1.0], &grid, 1.0).unwrap()
}

/// Exact one-step RK4 propagator of `x' = A x`.
fn rk4_propagator(a: &DMatrix<f64>, h: f64, n: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let ha = a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let step = DMatrix::identity(d, d) + &ha + ha2 / 2.0 + ha3 / 6.0 + ha4 / 24.0;
    (0..n).fold(DMatrix::identity(d, d), |acc, _| &step * acc)
}

struct LinearCase {
    model: LinearModel,
    prior: GaussianDensity,
    c: DVector<f64>,
    gamma: Matrix2<f64>,
    grid: TimeGrid,
    target: Vector2<f64>,
}

impl LinearCase {
    fn new() -> Self {
        let a = dmatrix![-0.2, 1.0, 0.0; -1.0, -0.1, 0.3; 0.0, -0.3, -0.4];
        Self {
            model: LinearModel::homogeneous(a).unwrap(),
            prior: GaussianDensity::new(dvector![1.0, 0.0, -0.5], dmatrix![1.0, 0.2, 0.0; 0.2, 0.5, 0.1; 0.0, 0.1, 0.7])
                .unwrap(),
            c: dvector![1.0, 0.5, 0.0],
            gamma: Matrix2::new(0.1, 0.02, 0.02, 0.3),
            grid: TimeGrid::new(3.0, 0.01).unwrap(),
            target: Vector2::new(2.5, 1.0),
        }
    }

    fn problem(&self, gamma: Matrix2<f64>) -> PosteriorProblem<'_, LinearModel> {
        let obs = Observation::new(self.target[0], self.target[1], 1.5, gamma, 1.0).unwrap();
        PosteriorProblem::new(&self.model, self.prior.clone(), obs, self.c.clone(), &self.grid, 1.0).unwrap()
    }

    /// `G(x) = H x` with `H = [cᵀE; cᵀAE]`, E the discrete propagator to t=1.5.
    fn h(&self) -> DMatrix<f64> {
        let a = self.model.matrix();
        let e = rk4_propagator(a, 0.01, 150);
        let r1 = self.c.transpose() * &e;
        let r2 = self.c.transpose() * a * &e;
        DMatrix::from_rows(&[r1, r2])
    }

    fn conjugate(&self) -> (DVector<f64>, DMatrix<f64>) {
        let h = self.h();
        let gi = DMatrix::from_column_slice(2, 2, self.gamma.try_inverse().unwrap().as_slice());
        let si = self.prior.cov().clone().try_inverse().unwrap();
        let prec = h.transpose() * &gi * &h + &si;
        let cov = prec.clone().try_inverse().unwrap();
        let y = DVector::from_column_slice(self.target.as_slice());
        let mean = &cov * (h.transpose() * gi * y + si * self.prior.mean());
        (mean, cov)
    }
}

fn random_points(n: usize, seed: u64, centre: &[f64], spread: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| centre.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[test]
fn forward_map_at_time_zero() {
    let m = lv();
    let grid = TimeGrid::new(10.0, 0.01).unwrap();
    let c = dvector![0.3, 1.0];
    let x0 = [4.0, 7.0];
    let g = forward_map(&m, &c, &x0, 0.0, &grid).unwrap();
    let f = dynamics::eval_rhs(&m, 0.0, &x0);
    assert_eq!(g[0], 0.3 * 4.0 + 7.0);
    assert_eq!(g[1], 0.3 * f[0] + f[1]);
}

#[test]
fn forward_map_of_linear_model() {
    let a = dmatrix![0.0, 1.0; -2.0, -0.3];
    let m = LinearModel::homogeneous(a.clone()).unwrap();
    let grid = TimeGrid::new(2.0, 0.01).unwrap();
    let c = dvector![1.0, -0.5];
    let x0 = dvector![0.7, 1.1];
    let e = linalg::expm(&(&a * 1.3));
    let want = Vector2::new(c.dot(&(&e * &x0)), c.dot(&(&a * &e * &x0)));
    let got = forward_map(&m, &c, x0.as_slice(), 1.3, &grid).unwrap();
    assert!((got - want).amax() < 1e-8);
}

#[test]
fn forward_map_at_equilibrium() {
    let m = lv();
    let grid = TimeGrid::new(10.0, 0.01).unwrap();
    let eq = m.equilibrium();
    for t in [0.5, 3.0, 10.0] {
        let g = forward_map(&m, &dvector![0.0, 1.0], &eq, t, &grid).unwrap();
        assert!((g[0] - eq[1]).abs() < 1e-12 && g[1].abs() < 1e-12);
    }
}

#[test]
fn observation_validation() {
    let g = Matrix2::identity();
    assert!(Observation::new(1.0, 1.0, -0.1, g, 0.0).is_err());
    assert!(Observation::new(1.0, 1.0, 0.1, g, -1.0).is_err());
    assert!(Observation::new(1.0, 1.0, 0.1, Matrix2::new(1.0, 2.0, 2.0, 1.0), 0.0).is_err());
    assert!(Observation::new(1.0, 1.0, 0.1, g, 0.0).is_ok());
}

/// Process with slope mean 50 and unit slope variance, so `y φ` is close to
/// the Gaussian `φ` itself.
fn steep_rice() -> RiceIntegrand {
    let model = LinearModel::homogeneous(dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap();
    let init = GaussianDensity::new(dvector![0.0, 50.0], DMatrix::identity(2, 2)).unwrap();
    RiceIntegrand::new(linearize(&model, &init).unwrap(), dvector![1.0, 0.0], 50.0, 2.0).unwrap()
}

#[test]
fn likelihood_cov_recovers_gaussian_covariance() {
    let rice = steep_rice();
    // at t = 1: mean (50, 50), Υ = [[2, 1], [1, 1]]
    let got = build_likelihood_cov(&rice, 50.0, 50.0, 1.0, (8.0 * 2f64.sqrt(), 8.0), 81).unwrap();
    let want = Matrix2::new(2.0, 1.0, 1.0, 1.0);
    assert!((got - want).norm() / want.norm() < 0.05, "{got}");
}

#[test]
fn likelihood_cov_self_converges() {
    let rice = steep_rice();
    let w = default_window(&rice, 1.0);
    let a = build_likelihood_cov(&rice, 51.0, 49.0, 1.0, w, 11).unwrap();
    let b = build_likelihood_cov(&rice, 51.0, 49.0, 1.0, w, 21).unwrap();
    assert!((a - b).norm() / b.norm() < 0.02);
    assert!(build_likelihood_cov(&rice, 51.0, 49.0, 1.0, w, 4).is_err());
}

#[test]
fn unreachable_observation_is_flat() {
    let rice = steep_rice();
    let r = build_likelihood_cov(&rice, 1e4, 50.0, 1.0, (0.1, 0.1), 11);
    assert!(matches!(r, Err(Error::FlatLikelihood)));
}

#[test]
fn log_posterior_peaks_at_consistent_prior_mean() {
    let m = lv();
    let grid = TimeGrid::new(10.0, 0.01).unwrap();
    let mean = [10.0, 10.0];
    let g = forward_map(&m, &dvector![0.0, 1.0], &mean, 2.0, &grid).unwrap();
    let prior = GaussianDensity::isotropic(dvector![10.0, 10.0], 0.8).unwrap();
    let obs = Observation::new(g[0], g[1], 2.0, Matrix2::identity(), 1.0).unwrap();
    let p = PosteriorProblem::new(&m, prior, obs, dvector![0.0, 1.0], &grid, 1.0).unwrap();
    assert_eq!(p.log_posterior(&mean), 0.0);
}

#[test]
fn flat_likelihood_leaves_the_prior() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::identity() * 1e20);
    let (a, b) = ([9.0, 11.0], [10.5, 9.5]);
    let diff = p.log_posterior(&a) - p.log_posterior(&b);
    let prior_diff = p.log_prior_term(&a) - p.log_prior_term(&b);
    assert!((diff - prior_diff).abs() < 1e-10);
}

#[test]
fn log_posterior_decomposes() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::new(0.5, 0.1, 0.1, 2.0));
    let x = [9.3, 10.8];
    let total = p.log_posterior(&x);
    let parts = p.log_prior_term(&x) + p.log_like_term(&x).unwrap();
    assert!((total - parts).abs() <= 1e-14 * total.abs().max(1.0));
}

#[test]
fn divergence_is_out_of_support() {
    let m = LotkaVolterra::new(1.0, -1.0, 1.0, 1.0).unwrap();
    let p = lv_problem(&m, Matrix2::identity());
    assert_eq!(p.log_posterior(&[10.0, 10.0]), f64::NEG_INFINITY);
}

fn fd_gradient<D: Dynamics + ?Sized>(p: &PosteriorProblem<'_, D>, x: &[f64], h: f64) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (p.log_posterior(&a) - p.log_posterior(&b)) / (2.0 * h)
        }),
    )
}

#[test]
fn lotka_volterra_gradient_matches_finite_differences() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::new(0.5, 0.1, 0.1, 2.0));
    for x in random_points(10, 3, &[10.0, 10.0], 0.9) {
        let g = p.grad_log_posterior(&x).unwrap();
        let fd = fd_gradient(&p, &x, 1e-6);
        let rel = (&g - &fd).norm() / g.norm();
        assert!(rel < 1e-5, "relative error {rel} at {x:?}");
    }
}

#[test]
fn linear_gradient_matches_closed_form() {
    let case = LinearCase::new();
    let p = case.problem(case.gamma);
    let h = case.h();
    let gi = DMatrix::from_column_slice(2, 2, case.gamma.try_inverse().unwrap().as_slice());
    let y = DVector::from_column_slice(case.target.as_slice());
    let si = case.prior.cov().clone().try_inverse().unwrap();
    for x in random_points(5, 4, &[1.0, 0.0, -0.5], 1.0) {
        let xv = DVector::from_column_slice(&x);
        let want = -(h.transpose() * &gi * (&h * &xv - &y) + &si * (&xv - case.prior.mean()));
        let got = p.grad_log_posterior(&x).unwrap();
        assert!((&got - &want).amax() < 1e-10 * want.amax().max(1.0));
    }
}

#[test]
fn gauss_newton_product() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::new(0.5, 0.1, 0.1, 2.0));
    let x = [9.6, 10.4];
    assert_eq!(p.gn_hessian_vec(&x, &[0.0, 0.0]).unwrap(), DVector::zeros(2));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let v: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let hv = p.gn_hessian_vec(&x, &v).unwrap();
        let hw = p.gn_hessian_vec(&x, &w).unwrap();
        let (vv, wv) = (DVector::from_column_slice(&v), DVector::from_column_slice(&w));
        let a = hv.dot(&wv);
        let b = vv.dot(&hw);
        assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        let floor = p.tau() * vv.dot(&p.prior().precision_times(&vv));
        assert!(hv.dot(&vv) >= floor - 1e-10);
    }
}

#[test]
fn gauss_newton_matches_dense_jacobian() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::new(0.5, 0.1, 0.1, 2.0));
    let x = [9.6, 10.4];
    let jac = p.jacobian(&x).unwrap();
    let gi = DMatrix::from_column_slice(2, 2, p.observation().gamma.try_inverse().unwrap().as_slice());
    let dense = jac.transpose() * gi * &jac + p.prior().chol().inverse();
    let v = dvector![0.3, -1.2];
    let got = p.gn_hessian_vec(&x, v.as_slice()).unwrap();
    assert!((&got - &dense * &v).amax() < 1e-9 * got.amax());
}

#[test]
fn model_evaluations_are_counted() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::identity());
    let x = [10.0, 10.0];
    p.log_posterior(&x);
    assert_eq!(p.n_model_evals(), 1);
    p.grad_log_posterior(&x).unwrap();
    assert_eq!(p.n_model_evals(), 3);
    p.gn_hessian_vec(&x, &[1.0, 0.0]).unwrap();
    assert_eq!(p.n_model_evals(), 6);
    p.jacobian(&x).unwrap();
    assert_eq!(p.n_model_evals(), 8);
}

#[test]
fn linear_map_is_the_conjugate_posterior() {
    let case = LinearCase::new();
    let p = case.problem(case.gamma);
    let (mean, cov) = case.conjugate();
    let cfg = LbfgsConfig {
        grad_tol: 1e-10,
        ..Default::default()
    };
    let r = map_solve(&p, case.prior.mean().as_slice(), &cfg).unwrap();
    assert!(r.converged);
    assert!(r.iterations <= 50);
    assert!((&r.x_map - &mean).amax() < 1e-8);
    assert!((&r.post_cov - &cov).amax() < 1e-8);
    assert!(r.n_model_evals >= r.iterations);
}

#[test]
fn map_from_the_minimizer_takes_no_steps() {
    let case = LinearCase::new();
    let p = case.problem(case.gamma);
    let (mean, _) = case.conjugate();
    let r = map_solve(&p, mean.as_slice(), &LbfgsConfig::default()).unwrap();
    assert!(r.converged);
    assert_eq!(r.iterations, 0);
}

#[test]
fn lotka_volterra_map_descends_monotonically() {
    let m = lv();
    let p = lv_problem(&m, Matrix2::new(0.05, 0.0, 0.0, 0.5));
    let r = map_solve(&p, &[10.0, 10.0], &LbfgsConfig::default()).unwrap();
    assert!(r.objective_history.windows(2).all(|w| w[1] < w[0]));
    assert!(r.converged);
    let g = p.grad_log_posterior(r.x_map.as_slice()).unwrap();
    let j = -p.log_posterior(r.x_map.as_slice());
    assert!(g.norm() < 1e-6 * (1.0 + j.abs()));
    assert!(linalg::cholesky(&r.post_cov, "post").is_ok());
}

fn chain_moments(chain: &Chain) -> (DVector<f64>, DMatrix<f64>) {
    (chain.mean(), chain.covariance().unwrap())
}

#[test]
fn posterior_chain_matches_conjugate_posterior() {
    let case = LinearCase::new();
    let p = case.problem(case.gamma);
    let (mean, cov) = case.conjugate();
    let cfg = DramConfig::new(cov.clone(), 40_000, 17).with_burn_in(2000);
    let chain = posterior_sample(&p, &cfg).unwrap();
    let (m, _) = chain_moments(&chain);
    // effective sample size well above 2000 for this adapted chain
    let ess = 2000.0;
    for i in 0..3 {
        let se = (cov[(i, i)] / ess).sqrt();
        assert!((m[i] - mean[i]).abs() < 4.0 * se, "coordinate {i}");
    }
    assert_eq!(chain, posterior_sample(&p, &cfg).unwrap());
}

#[test]
fn flat_likelihood_chain_reproduces_prior() {
    let case = LinearCase::new();
    let p = case.problem(Matrix2::identity() * 1e12);
    let cfg = DramConfig::new(case.prior.cov().clone(), 40_000, 2).with_burn_in(1000);
    let chain = posterior_sample(&p, &cfg).unwrap();
    let (m, c) = chain_moments(&chain);
    let ess = 2000.0;
    for i in 0..3 {
        let v = case.prior.cov()[(i, i)];
        assert!((m[i] - case.prior.mean()[i]).abs() < 4.0 * (v / ess).sqrt());
        assert!((c[(i, i)] - v).abs() < 4.0 * v * (2.0 / ess).sqrt());
    }
}
