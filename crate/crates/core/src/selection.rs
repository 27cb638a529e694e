//! Regularization path over `(h, lambda)` and EBIC tuning.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceFamily, VarianceParams};
use crate::error::{invalid, Error, Result};
use crate::estimator::{FitConfig, FitResult, Problem, DEFAULT_COVARIANCE_CYCLES, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::kernel::KernelConfig;
use crate::model::{LongitudinalDataset, TimeGrid};
use crate::penalty::{adaptive_weights, PenaltyConfig, DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_WEIGHT_CAP};

pub const DEFAULT_N_LAMBDA: usize = 30;
pub const DEFAULT_LAMBDA_MIN_RATIO: f64 = 1e-3;
pub const DEFAULT_EBIC_GAMMA: f64 = 1.0;
pub const DEFAULT_N_H: usize = 10;

/// Everything the path needs besides the data and the bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub family: CovarianceFamily,
    pub alpha: f64,
    /// Exponent of the adaptive weights.
    pub gamma: f64,
    pub weight_cap: f64,
    /// `true` marks a penalized covariate.
    pub mask: Vec<bool>,
    pub ebic_gamma: f64,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub covariance_cycles: usize,
    /// Warm-start each lambda from the previous solution.
    pub warm_start: bool,
}

impl PathConfig {
    pub fn new(family: CovarianceFamily, mask: Vec<bool>) -> Self {
        Self {
            family,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            weight_cap: DEFAULT_WEIGHT_CAP,
            mask,
            ebic_gamma: DEFAULT_EBIC_GAMMA,
            n_lambda: DEFAULT_N_LAMBDA,
            lambda_min_ratio: DEFAULT_LAMBDA_MIN_RATIO,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            covariance_cycles: DEFAULT_COVARIANCE_CYCLES,
            warm_start: true,
        }
    }

    pub fn validate(&self, n_covariates: usize) -> Result<()> {
        if self.mask.len() != n_covariates {
            return invalid(format!(
                "penalty mask has {} entries but the design has {} covariates",
                self.mask.len(),
                n_covariates
            ));
        }
        if self.n_lambda == 0 {
            return invalid("n_lambda must be >= 1");
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio <= 1.0) {
            return invalid(format!("lambda_min_ratio must lie in (0, 1], got {}", self.lambda_min_ratio));
        }
        if !(self.ebic_gamma.is_finite() && self.ebic_gamma >= 0.0) {
            return invalid("ebic_gamma must be >= 0");
        }
        if !(self.weight_cap.is_finite() && self.weight_cap > 0.0) {
            return invalid("weight_cap must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub h: f64,
    pub lambda: f64,
    pub df: usize,
    pub ebic: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    /// Ordered by `h` as given, then by decreasing `lambda`.
    pub entries: Vec<PathEntry>,
    pub selected: usize,
    /// Configuration of each bandwidth's path at `lambda = 0`; weights and
    /// starting covariance are shared by every lambda at that bandwidth.
    pub configs: Vec<FitConfig>,
    pub lambda_max: Vec<f64>,
}

impl PathResult {
    pub fn selected_entry(&self) -> &PathEntry {
        &self.entries[self.selected]
    }

    /// The fit configuration that reproduces the selected entry.
    pub fn selected_config(&self) -> Result<FitConfig> {
        let entry = self.selected_entry();
        let base = self
            .configs
            .iter()
            .find(|c| c.kernel.scale == entry.h)
            .expect("every entry has a config");
        let mut cfg = base.clone();
        cfg.penalty = cfg.penalty.with_lambda(entry.lambda)?;
        Ok(cfg)
    }

    pub fn selected_model(&self, covariate_names: &[String]) -> Result<SelectedModel> {
        let entry = self.selected_entry();
        Ok(SelectedModel {
            covariate_names: covariate_names.to_vec(),
            h: entry.h,
            lambda: entry.lambda,
            df: entry.df,
            ebic: entry.ebic,
            config: self.selected_config()?,
            fit: entry.fit.clone(),
        })
    }
}

/// The selected fit together with what is needed to refit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub covariate_names: Vec<String>,
    pub h: f64,
    pub lambda: f64,
    pub df: usize,
    pub ebic: f64,
    pub config: FitConfig,
    pub fit: FitResult,
}

/// Nonzero entries of penalized rows plus every entry of unpenalized rows.
pub fn degrees_of_freedom(fit: &FitResult) -> usize {
    let c = &fit.coefficients;
    let s = c.n_cols();
    c.penalty_mask()
        .iter()
        .enumerate()
        .map(|(j, &penalized)| {
            if penalized {
                c.values().row(j).iter().filter(|v| **v != 0.0).count()
            } else {
                s
            }
        })
        .sum()
}

/// `-2 l + df log(n_obs) + 2 gamma df log(p S)`.
pub fn ebic(fit: &FitResult, dataset: &LongitudinalDataset, gamma_ebic: f64) -> f64 {
    let df = degrees_of_freedom(fit) as f64;
    let n_obs = dataset.n_observations() as f64;
    let model_space = (fit.coefficients.n_rows() * fit.coefficients.n_cols()) as f64;
    -2.0 * fit.loglik + df * n_obs.ln() + 2.0 * gamma_ebic * df * model_space.ln()
}

/// Log-spaced bandwidths from half the median grid gap to the grid range.
pub fn default_h_grid(grid: &TimeGrid, n: usize) -> Result<Vec<f64>> {
    let lo = 0.5 * grid.median_gap();
    let hi = grid.range();
    if !(lo > 0.0 && hi > 0.0) || n == 0 {
        return invalid("cannot build a bandwidth grid from a single time point");
    }
    Ok(log_spaced(hi, lo, n).into_iter().rev().collect())
}

/// `n` values from `start` to `end` equally spaced on the log scale.
fn log_spaced(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let (a, b) = (start.ln(), end.ln());
    (0..n)
        .map(|k| match k {
            0 => start,
            _ if k == n - 1 => end,
            _ => (a + (b - a) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Smallest `lambda` at which a row whose estimating function is `u` stays
/// at zero under the proximal step.
fn row_threshold(u: &[f64], alpha: f64, group_weight: f64, entry_weights: &[f64]) -> Result<f64> {
    if u.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let sqrt_s = (u.len() as f64).sqrt();
    let group = (1.0 - alpha) * sqrt_s * group_weight;
    // Upper bounds from either term alone.
    let mut hi = f64::INFINITY;
    if group > 0.0 {
        hi = u.iter().map(|v| v * v).sum::<f64>().sqrt() / group;
    }
    if alpha > 0.0 {
        let lasso = u.iter().zip(entry_weights).fold(0.0f64, |acc, (&v, &w)| {
            if v == 0.0 {
                acc
            } else if w > 0.0 {
                acc.max(v.abs() / (alpha * w))
            } else {
                f64::INFINITY
            }
        });
        hi = hi.min(lasso);
    }
    if !hi.is_finite() {
        return Err(Error::ZeroWeights);
    }
    if group == 0.0 {
        return Ok(hi);
    }
    let excess = |lambda: f64| {
        let shrunk: f64 = u
            .iter()
            .zip(entry_weights)
            .map(|(&v, &w)| (v.abs() - lambda * alpha * w).max(0.0).powi(2))
            .sum();
        shrunk.sqrt() - lambda * group
    };
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Largest per-row threshold at penalized-rows-zero, over the covariance
/// schedule the penalized fit would follow from there.
fn lambda_max_in(problem: &Problem<'_>, cfg: &FitConfig) -> Result<f64> {
    cfg.validate()?;
    let penalty = &cfg.penalty;
    let mask = penalty.mask();
    let p = problem.dataset.n_covariates();
    let s = problem.grid.len();
    if mask.len() != p || penalty.n_grid() != s {
        return invalid("penalty dimensions do not match the dataset and grid");
    }
    if !mask.iter().any(|m| *m) {
        return Ok(0.0);
    }
    let free: Vec<bool> = mask.iter().map(|m| !m).collect();
    let zeros = DMatrix::zeros(p, s);
    let mut params = cfg.params;
    let mut best: f64 = 0.0;
    for cycle in 0..cfg.covariance_cycles {
        if cycle > 0 {
            let b0 = problem.systems(&params)?.solve_rows(&free, &zeros);
            params = problem.update_params(&b0, &params)?;
        }
        let systems = problem.systems(&params)?;
        let u = systems.gradient(&systems.solve_rows(&free, &zeros));
        for j in (0..p).filter(|&j| mask[j]) {
            let row: Vec<f64> = u.row(j).iter().copied().collect();
            let t = row_threshold(&row, penalty.alpha, penalty.group_weights()[j], &penalty.entry_row(j))?;
            best = best.max(t);
        }
    }
    Ok(best)
}

/// The smallest `lambda` at which every penalized row of the fit is zero.
/// `cfg.params` is the starting covariance and `cfg.penalty.lambda` is
/// ignored.
pub fn lambda_max(dataset: &LongitudinalDataset, grid: &TimeGrid, cfg: &FitConfig) -> Result<f64> {
    let problem = Problem::new(dataset, grid, &cfg.kernel)?;
    Ok(checked_lambda_max(&problem, cfg)?.0)
}

fn penalized_rows_zero(fit: &FitResult) -> bool {
    let c = &fit.coefficients;
    c.penalty_mask()
        .iter()
        .enumerate()
        .all(|(j, &m)| !m || c.values().row(j).iter().all(|v| *v == 0.0))
}

/// `lambda_max` plus the fit at that value, nudged upward until the fit
/// confirms all penalized rows are zero.
fn checked_lambda_max(problem: &Problem<'_>, cfg: &FitConfig) -> Result<(f64, FitResult)> {
    let mut lambda = lambda_max_in(problem, cfg)?;
    for _ in 0..50 {
        let fit = problem.fit_penalized(&FitConfig { penalty: cfg.penalty.with_lambda(lambda)?, ..cfg.clone() }, None)?;
        if penalized_rows_zero(&fit) {
            return Ok((lambda, fit));
        }
        lambda = if lambda > 0.0 { lambda * 1.01 } else { f64::MIN_POSITIVE };
    }
    Err(Error::DegenerateCovariance(
        "could not find a lambda that zeroes every penalized row".into(),
    ))
}

/// Path at one bandwidth: unpenalized fit, adaptive weights, `lambda_max`,
/// then descent over the lambda grid.
fn path_at(dataset: &LongitudinalDataset, grid: &TimeGrid, h: f64, cfg: &PathConfig) -> Result<(FitConfig, f64, Vec<PathEntry>)> {
    let kernel = KernelConfig::gaussian(h)?;
    let problem = Problem::new(dataset, grid, &kernel)?;
    let p = dataset.n_covariates();
    let unpen = problem.fit_free_rows(
        &vec![true; p],
        &VarianceParams::initial(cfg.family),
        cfg.covariance_cycles,
        cfg.mask.clone(),
    )?;
    let weights = adaptive_weights(&unpen.coefficients, cfg.gamma, cfg.weight_cap);
    let penalty = PenaltyConfig::from_weights(0.0, cfg.alpha, cfg.gamma, cfg.mask.clone(), weights)?;
    let fit_cfg = FitConfig {
        kernel,
        penalty,
        params: unpen.params,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        covariance_cycles: cfg.covariance_cycles,
    };
    let (lmax, first) = checked_lambda_max(&problem, &fit_cfg)?;
    let lambdas = if lmax > 0.0 {
        log_spaced(lmax, lmax * cfg.lambda_min_ratio, cfg.n_lambda)
    } else {
        vec![0.0]
    };

    let mut entries = Vec::with_capacity(lambdas.len());
    let mut prev: Option<DMatrix<f64>> = None;
    for (k, &lambda) in lambdas.iter().enumerate() {
        let fit = if k == 0 {
            first.clone()
        } else {
            let c = FitConfig { penalty: fit_cfg.penalty.with_lambda(lambda)?, ..fit_cfg.clone() };
            let init = if cfg.warm_start { prev.as_ref() } else { None };
            problem.fit_penalized(&c, init)?
        };
        prev = Some(fit.coefficients.values().clone());
        entries.push(PathEntry {
            h,
            lambda,
            df: degrees_of_freedom(&fit),
            ebic: ebic(&fit, dataset, cfg.ebic_gamma),
            fit,
        });
    }
    Ok((fit_cfg, lmax, entries))
}

/// Fits the whole `(h, lambda)` path and selects the EBIC minimizer. Ties
/// go to the larger `lambda`, then the larger `h`.
pub fn fit_path(dataset: &LongitudinalDataset, grid: &TimeGrid, h_grid: &[f64], cfg: &PathConfig) -> Result<PathResult> {
    cfg.validate(dataset.n_covariates())?;
    if h_grid.is_empty() {
        return invalid("bandwidth grid is empty");
    }
    let per_h: Vec<_> = h_grid
        .par_iter()
        .map(|&h| path_at(dataset, grid, h, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut configs = Vec::new();
    let mut lambda_max = Vec::new();
    for (c, lmax, e) in per_h {
        configs.push(c);
        lambda_max.push(lmax);
        entries.extend(e);
    }
    let selected = select(&entries);
    Ok(PathResult {
        entries,
        selected,
        configs,
        lambda_max,
    })
}

fn select(entries: &[PathEntry]) -> usize {
    let mut best = 0;
    for (k, e) in entries.iter().enumerate().skip(1) {
        let b = &entries[best];
        let better = e.ebic < b.ebic
            || (e.ebic == b.ebic && (e.lambda > b.lambda || (e.lambda == b.lambda && e.h > b.h)));
        if better {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubjectRecord;

    #[test]
    fn scalar_threshold_closed_form() {
        let t = row_threshold(&[-3.0], 1.0, 0.0, &[2.0]).unwrap();
        assert_eq!(t, 1.5);
        // alpha = 0: group term only, ||u|| / (sqrt(S) w).
        let t = row_threshold(&[3.0, 4.0], 0.0, 1.0, &[1.0, 1.0]).unwrap();
        assert!((t - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(row_threshold(&[1.0], 1.0, 0.0, &[0.0]).is_err());
        assert_eq!(row_threshold(&[0.0, 0.0], 0.5, 0.0, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn threshold_is_group_kill_boundary() {
        let u = [0.7, -2.0, 0.1, 1.3];
        let w = [1.0, 0.5, 2.0, 1.5];
        let t = row_threshold(&u, 0.4, 1.2, &w).unwrap();
        let kill = |lambda: f64| {
            let z: Vec<f64> = u.iter().map(|v| -v).collect();
            crate::penalty::prox_sgl(&z, 1.0, lambda, 0.4, 1.2, &w).iter().all(|v| *v == 0.0)
        };
        assert!(kill(t));
        assert!(!kill(t * (1.0 - 1e-9)));
    }

    #[test]
    fn tie_break_prefers_sparser() {
        let fit = |_: ()| {
            let grid = TimeGrid::new(vec![0.0]).unwrap();
            FitResult {
                coefficients: crate::model::CoefficientMatrix::zeros(1, grid, vec![true]).unwrap(),
                params: VarianceParams::initial(CovarianceFamily::Independent),
                objective_trace: vec![],
                phase_starts: vec![],
                iterations: 0,
                converged: true,
                loglik: 0.0,
            }
        };
        let e = |h: f64, lambda: f64, ebic: f64| PathEntry { h, lambda, df: 0, ebic, fit: fit(()) };
        let entries = vec![e(0.1, 2.0, 1.0), e(0.1, 1.0, 0.5), e(0.2, 2.0, 0.5), e(0.2, 1.0, 0.5)];
        assert_eq!(select(&entries), 2);
    }

    #[test]
    fn log_spacing_hits_endpoints() {
        let v = log_spaced(10.0, 0.01, 4);
        assert_eq!(v[0], 10.0);
        assert_eq!(v[3], 0.01);
        assert!((v[1] - 1.0).abs() < 1e-12 && (v[2] - 0.1).abs() < 1e-12);
        let grid = TimeGrid::equispaced(0.0, 1.0, 11).unwrap();
        let h = default_h_grid(&grid, 10).unwrap();
        assert!((h[0] - 0.05).abs() < 1e-12 && (h[9] - 1.0).abs() < 1e-12);
        assert!(h.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_response_gives_zero_lambda_max() {
        let subjects = (0..4)
            .map(|i| {
                let x = DMatrix::from_fn(3, 2, |_, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
                SubjectRecord::new(format!("s{i}"), vec![0.0, 0.5, 1.0], vec![0.0; 3], x).unwrap()
            })
            .collect();
        let data = LongitudinalDataset::new(subjects, vec!["a".into(), "b".into()]).unwrap();
        let grid = TimeGrid::from_dataset(&data);
        let penalty = PenaltyConfig::uniform(0.0, 0.5, vec![false, true], 3).unwrap();
        let mut cfg = FitConfig::new(
            KernelConfig::gaussian(0.3).unwrap(),
            penalty,
            VarianceParams::initial(CovarianceFamily::Independent),
        );
        cfg.covariance_cycles = 1;
        assert_eq!(lambda_max(&data, &grid, &cfg).unwrap(), 0.0);
    }
}
