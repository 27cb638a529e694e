mod common;

use lsvcmm::covariance::CovarianceFamily;
use lsvcmm::estimator::{estimating_function, fit_unpenalized};
use lsvcmm::{CoefficientMatrix, KernelConfig, TimeGrid, VarianceParams};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(d: f64, h: f64) -> f64 {
    let u = d / h;
    if u.abs() > 3.0 {
        return 0.0;
    }
    (-0.5 * u * u).exp() / ((2.0 * std::f64::consts::PI).sqrt() * h)
}

fn working_cov(times: &[f64], v: &VarianceParams) -> DMatrix<f64> {
    let n = times.len();
    DMatrix::from_fn(n, n, |a, b| {
        let diag = if a == b { 1.0 } else { 0.0 };
        let k = match v.family {
            CovarianceFamily::Independent => 0.0,
            CovarianceFamily::CompoundSymmetry => v.ratio,
            CovarianceFamily::Ar1 => v.ratio * v.rho.powf((times[a] - times[b]).abs()),
        };
        v.sigma2 * (diag + k)
    })
}

/// U_s = -sum_i sum_n k(t_s - t_in) x_in [ (P_i r_i)_n + P_i,nn x_in'(b(t_in) - b_s) ]
/// with r_i built from the coefficients at each observation's own time.
fn naive_u(data: &lsvcmm::LongitudinalDataset, b: &DMatrix<f64>, grid: &[f64], v: &VarianceParams, h: f64) -> DMatrix<f64> {
    let p = b.nrows();
    let at = |t: f64| grid.iter().position(|&g| (g - t).abs() < 1e-12).unwrap();
    let mut u = DMatrix::zeros(p, grid.len());
    for (s, &ts) in grid.iter().enumerate() {
        for subj in data.subjects() {
            let t = subj.times();
            let x = subj.design();
            let prec = working_cov(t, v).try_inverse().unwrap();
            let m = t.len();
            let mut r = vec![0.0; m];
            for a in 0..m {
                let mut fit = 0.0;
                for j in 0..p {
                    fit += x[(a, j)] * b[(j, at(t[a]))];
                }
                r[a] = subj.responses()[a] - fit;
            }
            for n in 0..m {
                let w = gauss(ts - t[n], h);
                let mut pr = 0.0;
                for a in 0..m {
                    pr += prec[(n, a)] * r[a];
                }
                let mut shift = 0.0;
                for j in 0..p {
                    shift += x[(n, j)] * (b[(j, at(t[n]))] - b[(j, s)]);
                }
                for j in 0..p {
                    u[(j, s)] -= w * x[(n, j)] * (pr + prec[(n, n)] * shift);
                }
            }
        }
    }
    u
}

fn families() -> Vec<VarianceParams> {
    vec![
        VarianceParams::independent(1.7).unwrap(),
        VarianceParams::compound_symmetry(1.3, 0.7).unwrap(),
        VarianceParams::ar1(0.8, 1.1, 0.4).unwrap(),
    ]
}

#[test]
fn matches_triple_loop_oracle() {
    let times = [0.0, 0.2, 0.5, 0.6, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..6 {
        let data = common::random_instance(5, &times, 2 + (seed as usize % 2), seed);
        let p = data.n_covariates();
        let grid = TimeGrid::new(times.to_vec()).unwrap();
        let b = DMatrix::from_fn(p, times.len(), |_, _| StandardNormal.sample(&mut rng));
        let coef = CoefficientMatrix::new(b.clone(), grid, vec![true; p]).unwrap();
        for h in [0.05, 0.3, 2.0] {
            let kernel = KernelConfig::gaussian(h).unwrap();
            for v in families() {
                let got = estimating_function(&data, &coef, &v, &kernel).unwrap();
                let want = naive_u(&data, &b, &times, &v, h);
                let err = (&got - &want).amax();
                assert!(err < 1e-10, "seed {seed} h {h} {:?}: {err:e}", v.family);
            }
        }
    }
}

#[test]
fn unpenalized_optimum_is_a_root() {
    let times: Vec<f64> = (0..6).map(|k| k as f64 / 5.0).collect();
    let data = common::random_instance(40, &times, 2, 5);
    let grid = TimeGrid::new(times).unwrap();
    for family in [CovarianceFamily::Independent, CovarianceFamily::CompoundSymmetry, CovarianceFamily::Ar1] {
        let kernel = KernelConfig::gaussian(0.15).unwrap();
        let fit = fit_unpenalized(&data, &grid, &kernel, family, 2).unwrap();
        let u = estimating_function(&data, &fit.coefficients, &fit.params, &kernel).unwrap();
        assert!(u.amax() < 1e-5, "{family:?}: {:e}", u.amax());
    }
}
