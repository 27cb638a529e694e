//! Cluster bootstrap, sup-t simultaneous bands and band-implied p-values.
//!
//! Subjects are resampled with replacement and the selected model is refit
//! with `(h, lambda, alpha)` and the adaptive weights held fixed; only the
//! coefficients and the working covariance are re-estimated.
//!
//! For row `j` with bootstrap standard errors `se_js`, replicate `b` has sup
//! statistic `M_b = max_s |b*_js - b_js| / se_js` over entries with
//! `se_js > 0`. The band multiplier is an order statistic of the `M_b` and
//! the p-value counts the `M_b` at least as large as the observed
//! `T = max_s |b_js| / se_js`; both use the same order statistic so that
//! `p < 1 - level` exactly when the band excludes zero somewhere.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::estimator::{FitConfig, Problem};
use crate::model::{LongitudinalDataset, TimeGrid};

pub const DEFAULT_N_BOOT: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const MIN_N_BOOT: usize = 100;
/// New resamples tried after a failed refit before the replicate is dropped.
pub const MAX_RETRIES: usize = 10;
/// Largest tolerated share of dropped replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandMethod {
    SupT,
    Bonferroni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub method: BandMethod,
    pub level: f64,
    pub estimate: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub se: DMatrix<f64>,
    /// Per row.
    pub multipliers: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Successful replicates.
    pub n_boot: usize,
    pub failures: usize,
}

impl BandResult {
    /// Whether `0` lies outside `[lower, upper]` for entry `(j, s)`.
    pub fn excludes_zero(&self, j: usize, s: usize) -> bool {
        self.lower[(j, s)] > 0.0 || self.upper[(j, s)] < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub estimate: DMatrix<f64>,
    /// Successful refits in replicate order.
    pub draws: Vec<DMatrix<f64>>,
    /// Replicates dropped after exhausting their retries.
    pub failures: usize,
    /// Failed refits that were replaced by a new resample.
    pub retries: usize,
    pub not_converged: usize,
}

fn row_of(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.row(j).iter().copied().collect()
}

/// Sample standard deviation; exactly zero when all values agree.
fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 || values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// `max_s |b_s| / se_s` over `se_s > 0`; infinite if some `se_s = 0` entry
/// is nonzero.
fn observed_sup(estimate: &[f64], se: &[f64]) -> f64 {
    estimate.iter().zip(se).fold(0.0f64, |acc, (&b, &s)| {
        if s > 0.0 {
            acc.max(b.abs() / s)
        } else if b != 0.0 {
            f64::INFINITY
        } else {
            acc
        }
    })
}

fn replicate_sups(draws: &[Vec<f64>], estimate: &[f64], se: &[f64]) -> Vec<f64> {
    draws
        .iter()
        .map(|d| {
            d.iter()
                .zip(estimate)
                .zip(se)
                .filter(|(_, &s)| s > 0.0)
                .fold(0.0f64, |acc, ((&x, &b), &s)| acc.max((x - b).abs() / s))
        })
        .collect()
}

fn row_se(draws: &[Vec<f64>], s_len: usize) -> Vec<f64> {
    (0..s_len)
        .map(|s| std_dev(&draws.iter().map(|d| d[s]).collect::<Vec<_>>()))
        .collect()
}

/// The order statistic of the sup draws used as band multiplier: with `n`
/// draws and `a = 1 - level`, the `(n + 2 - ceil(a (n + 1)))`-th smallest,
/// infinite when that index exceeds `n`.
pub fn sup_multiplier(sups: &[f64], level: f64) -> f64 {
    let n = sups.len();
    let mut sorted = sups.to_vec();
    sorted.sort_by(f64::total_cmp);
    let a = 1.0 - level;
    let k = (a * (n + 1) as f64 - 1e-9).ceil().max(0.0) as usize;
    let rank = n + 2 - k.max(1);
    if rank > n || n == 0 {
        f64::INFINITY
    } else {
        sorted[rank.max(1) - 1]
    }
}

/// Sup-t p-value of one row: `(1 + #{M_b >= T}) / (n + 1)`, and 1 for an
/// all-zero row.
pub fn band_pvalue(draws: &[Vec<f64>], estimate: &[f64]) -> f64 {
    if estimate.iter().all(|b| *b == 0.0) {
        return 1.0;
    }
    let se = row_se(draws, estimate.len());
    pvalue_with(draws, estimate, &se)
}

fn pvalue_with(draws: &[Vec<f64>], estimate: &[f64], se: &[f64]) -> f64 {
    if estimate.iter().all(|b| *b == 0.0) {
        return 1.0;
    }
    let t = observed_sup(estimate, se);
    let sups = replicate_sups(draws, estimate, se);
    let exceed = sups.iter().filter(|&&m| m >= t).count();
    (1 + exceed) as f64 / (sups.len() + 1) as f64
}

/// Two-sided normal quantile for `m` simultaneous comparisons.
pub fn bonferroni_multiplier(level: f64, m: usize) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(1.0 - (1.0 - level) / (2.0 * m.max(1) as f64))
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        invalid(format!("level must lie in (0, 1), got {level}"))
    }
}

impl BootstrapDraws {
    pub fn n_rows(&self) -> usize {
        self.estimate.nrows()
    }

    fn row_draws(&self, j: usize) -> Vec<Vec<f64>> {
        self.draws.iter().map(|d| row_of(d, j)).collect()
    }

    pub fn standard_errors(&self) -> DMatrix<f64> {
        let (p, s) = self.estimate.shape();
        let mut se = DMatrix::zeros(p, s);
        for j in 0..p {
            for (k, v) in row_se(&self.row_draws(j), s).into_iter().enumerate() {
                se[(j, k)] = v;
            }
        }
        se
    }

    fn assemble(&self, method: BandMethod, level: f64, multipliers: Vec<f64>, p_values: Vec<f64>, se: DMatrix<f64>) -> BandResult {
        let (p, s) = self.estimate.shape();
        let mut lower = self.estimate.clone();
        let mut upper = self.estimate.clone();
        for j in 0..p {
            for k in 0..s {
                if se[(j, k)] > 0.0 {
                    let half = multipliers[j] * se[(j, k)];
                    lower[(j, k)] -= half;
                    upper[(j, k)] += half;
                }
            }
        }
        BandResult {
            method,
            level,
            estimate: self.estimate.clone(),
            lower,
            upper,
            se,
            multipliers,
            p_values,
            n_boot: self.draws.len(),
            failures: self.failures,
        }
    }

    /// Sup-t simultaneous bands, one multiplier per row.
    pub fn bands(&self, level: f64) -> Result<BandResult> {
        check_level(level)?;
        let se = self.standard_errors();
        let mut multipliers = Vec::new();
        let mut p_values = Vec::new();
        for j in 0..self.n_rows() {
            let draws = self.row_draws(j);
            let est = row_of(&self.estimate, j);
            let se_row = row_of(&se, j);
            multipliers.push(sup_multiplier(&replicate_sups(&draws, &est, &se_row), level));
            p_values.push(pvalue_with(&draws, &est, &se_row));
        }
        Ok(self.assemble(BandMethod::SupT, level, multipliers, p_values, se))
    }

    /// Bonferroni bands over the entries of each row with positive standard
    /// error, with Bonferroni-adjusted normal p-values.
    pub fn bonferroni_bands(&self, level: f64) -> Result<BandResult> {
        check_level(level)?;
        let se = self.standard_errors();
        let normal = Normal::standard();
        let mut multipliers = Vec::new();
        let mut p_values = Vec::new();
        for j in 0..self.n_rows() {
            let est = row_of(&self.estimate, j);
            let se_row = row_of(&se, j);
            let m = se_row.iter().filter(|&&v| v > 0.0).count();
            multipliers.push(bonferroni_multiplier(level, m));
            let p = if est.iter().all(|b| *b == 0.0) {
                1.0
            } else {
                let t = observed_sup(&est, &se_row);
                (m.max(1) as f64 * 2.0 * (1.0 - normal.cdf(t))).min(1.0)
            };
            p_values.push(p);
        }
        Ok(self.assemble(BandMethod::Bonferroni, level, multipliers, p_values, se))
    }
}

/// Draws the cluster bootstrap. Replicate `b` uses ChaCha8 seeded with
/// `seed` on stream `b`, so results do not depend on scheduling.
pub fn bootstrap(
    dataset: &LongitudinalDataset,
    grid: &TimeGrid,
    cfg: &FitConfig,
    estimate: &DMatrix<f64>,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapDraws> {
    if n_boot < MIN_N_BOOT {
        return invalid(format!("n_boot must be at least {MIN_N_BOOT}, got {n_boot}"));
    }
    cfg.validate()?;
    if estimate.shape() != (dataset.n_covariates(), grid.len()) {
        return invalid("estimate does not match the dataset and grid");
    }
    let n = dataset.n_subjects();
    let outcomes: Vec<(Option<(DMatrix<f64>, bool)>, usize)> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut failed = 0;
            for _ in 0..=MAX_RETRIES {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let refit = dataset
                    .resample(&idx)
                    .and_then(|d| Problem::new(&d, grid, &cfg.kernel)?.fit_penalized(cfg, Some(estimate)));
                match refit {
                    Ok(fit) => return (Some((fit.coefficients.values().clone(), fit.converged)), failed),
                    Err(_) => failed += 1,
                }
            }
            (None, failed)
        })
        .collect();

    let mut draws = Vec::with_capacity(n_boot);
    let (mut failures, mut retries, mut not_converged) = (0, 0, 0);
    for (draw, failed) in outcomes {
        match draw {
            Some((values, converged)) => {
                retries += failed;
                not_converged += usize::from(!converged);
                draws.push(values);
            }
            None => {
                failures += 1;
                retries += MAX_RETRIES;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * n_boot as f64 {
        return Err(Error::BootstrapFailure { failures, attempts: n_boot });
    }
    Ok(BootstrapDraws {
        estimate: estimate.clone(),
        draws,
        failures,
        retries,
        not_converged,
    })
}

pub fn bootstrap_bands(
    dataset: &LongitudinalDataset,
    grid: &TimeGrid,
    cfg: &FitConfig,
    estimate: &DMatrix<f64>,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BandResult> {
    check_level(level)?;
    bootstrap(dataset, grid, cfg, estimate, n_boot, seed)?.bands(level)
}
