mod common;

use lsvcmm::covariance::CovarianceFamily;
use lsvcmm::estimator::fit_unpenalized;
use lsvcmm::{KernelConfig, LongitudinalDataset, TimeGrid};

const TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn data() -> LongitudinalDataset {
    common::complete_two_group(14, &TIMES, 3, 1.0, |t| (3.0 * t).sin())
}

/// Mean response of group `g` at time index `k`, or over all times.
fn group_mean(d: &LongitudinalDataset, g: f64, k: Option<usize>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for s in d.subjects() {
        if s.design()[(0, 1)] != g {
            continue;
        }
        for (idx, y) in s.responses().iter().enumerate() {
            if k.is_none_or(|k| k == idx) {
                sum += y;
                n += 1.0;
            }
        }
    }
    sum / n
}

#[test]
fn small_bandwidth_gives_pointwise_group_means() {
    let d = data();
    let grid = TimeGrid::new(TIMES.to_vec()).unwrap();
    let kernel = KernelConfig::gaussian(1e-3).unwrap();
    // With a complete balanced design pointwise GLS under compound symmetry
    // coincides with OLS.
    for family in [CovarianceFamily::Independent, CovarianceFamily::CompoundSymmetry] {
        let fit = fit_unpenalized(&d, &grid, &kernel, family, 2).unwrap();
        let b = fit.coefficients.values();
        for k in 0..TIMES.len() {
            let m0 = group_mean(&d, 0.0, Some(k));
            let m1 = group_mean(&d, 1.0, Some(k));
            assert!((b[(0, k)] - m0).abs() < 1e-6, "{family:?} k={k}");
            assert!((b[(1, k)] - (m1 - m0)).abs() < 1e-6, "{family:?} k={k}");
        }
    }
}

#[test]
fn huge_bandwidth_gives_pooled_ols() {
    let d = data();
    let grid = TimeGrid::new(TIMES.to_vec()).unwrap();
    let kernel = KernelConfig::gaussian(1e8).unwrap();
    let fit = fit_unpenalized(&d, &grid, &kernel, CovarianceFamily::Independent, 2).unwrap();
    let b = fit.coefficients.values();
    let m0 = group_mean(&d, 0.0, None);
    let m1 = group_mean(&d, 1.0, None);
    for k in 0..TIMES.len() {
        assert!((b[(0, k)] - m0).abs() < 1e-6);
        assert!((b[(1, k)] - (m1 - m0)).abs() < 1e-6);
    }
}
