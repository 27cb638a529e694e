mod common;

use lsvcmm::covariance::CovarianceFamily;
use lsvcmm::estimator::{fit_penalized, FitConfig};
use lsvcmm::inference::{bootstrap, bootstrap_bands};
use lsvcmm::selection::{fit_path, PathConfig};
use lsvcmm::simulation::{generate, Scenario, ScenarioParams};
use lsvcmm::TimeGrid;

#[test]
fn near_noiseless_data_collapses_the_bands() {
    let times = [0.0, 0.25, 0.5, 0.75, 1.0];
    let d = common::complete_two_group(30, &times, 8, 1e-7, |t| 1.0 + t);
    let grid = TimeGrid::new(times.to_vec()).unwrap();
    let cfg = PathConfig::new(CovarianceFamily::CompoundSymmetry, vec![false, true]);
    let res = fit_path(&d, &grid, &[0.05], &cfg).unwrap();
    // Unpenalized refits: with almost no noise the adaptive path never leaves
    // the all-zero model, which would hide the bootstrap spread.
    let fit_cfg = FitConfig { penalty: res.configs[0].penalty.with_lambda(0.0).unwrap(), ..res.configs[0].clone() };
    let fit = fit_penalized(&d, &grid, &fit_cfg, None).unwrap();
    let est = fit.coefficients.values();
    assert!((est[(1, 2)] - 1.5).abs() < 1e-5);
    let bands = bootstrap_bands(&d, &grid, &fit_cfg, est, 100, 0.95, 1).unwrap();
    for j in 0..2 {
        for s in 0..times.len() {
            assert!((bands.upper[(j, s)] - est[(j, s)]).abs() < 1e-4);
            assert!((bands.lower[(j, s)] - est[(j, s)]).abs() < 1e-4);
            assert_eq!(bands.excludes_zero(j, s), !(bands.lower[(j, s)] <= 0.0 && 0.0 <= bands.upper[(j, s)]));
        }
    }
    assert!(bands.p_values[1] < 0.05);
}

#[test]
fn draws_are_reproducible_across_thread_counts() {
    let data = generate(&ScenarioParams::new(Scenario::RegularMissing), 21).unwrap();
    let cfg = PathConfig::new(CovarianceFamily::CompoundSymmetry, vec![false, true]);
    let res = fit_path(&data.dataset, &data.grid, &[0.2], &cfg).unwrap();
    let model = res.selected_model(data.dataset.covariate_names()).unwrap();
    let est = model.fit.coefficients.values();
    let run = |threads: usize, seed: u64| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| bootstrap(&data.dataset, &data.grid, &model.config, est, 100, seed).unwrap())
    };
    let a = run(1, 9);
    let b = run(3, 9);
    assert_eq!(a, b);
    let c = run(2, 10);
    assert_ne!(a.draws, c.draws);
    let bands = a.bands(0.95).unwrap();
    for j in 0..2 {
        let any = (0..data.grid.len()).any(|s| bands.excludes_zero(j, s));
        assert_eq!(bands.p_values[j] < 0.05, any, "row {j}");
    }
}
