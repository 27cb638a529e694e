//! Adaptive sparse group Lasso on the rows of the coefficient matrix.
//!
//! For row `b_j` of length `S` the penalty is
//! `lambda * [(1 - alpha) sqrt(S) w_j ||b_j||_2 + alpha sum_s w_js |b_js|]`.
//! The entrywise term produces local zeros, the group term removes a whole
//! covariate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::CoefficientMatrix;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_WEIGHT_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PenaltyRepr", into = "PenaltyRepr")]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    group_weights: Vec<f64>,
    entry_weights: DMatrix<f64>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct PenaltyRepr {
    lambda: f64,
    alpha: f64,
    gamma: f64,
    mask: Vec<bool>,
    group_weights: Vec<f64>,
    entry_weights: Vec<Vec<f64>>,
}

impl TryFrom<PenaltyRepr> for PenaltyConfig {
    type Error = crate::Error;
    fn try_from(r: PenaltyRepr) -> Result<Self> {
        let p = r.entry_weights.len();
        let s = r.entry_weights.first().map_or(0, Vec::len);
        if r.entry_weights.iter().any(|row| row.len() != s) {
            return invalid("ragged entry weights");
        }
        let entry = DMatrix::from_fn(p, s, |j, k| r.entry_weights[j][k]);
        PenaltyConfig::new(r.lambda, r.alpha, r.gamma, r.mask, r.group_weights, entry)
    }
}

impl From<PenaltyConfig> for PenaltyRepr {
    fn from(c: PenaltyConfig) -> Self {
        PenaltyRepr {
            lambda: c.lambda,
            alpha: c.alpha,
            gamma: c.gamma,
            entry_weights: c.entry_weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
            group_weights: c.group_weights,
            mask: c.mask,
        }
    }
}

impl PenaltyConfig {
    pub fn new(
        lambda: f64,
        alpha: f64,
        gamma: f64,
        mask: Vec<bool>,
        group_weights: Vec<f64>,
        entry_weights: DMatrix<f64>,
    ) -> Result<Self> {
        let cfg = Self {
            lambda,
            alpha,
            gamma,
            group_weights,
            entry_weights,
            mask,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unit weights on penalized rows, zero on the rest.
    pub fn uniform(lambda: f64, alpha: f64, mask: Vec<bool>, n_grid: usize) -> Result<Self> {
        let p = mask.len();
        let group = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let entry = DMatrix::from_fn(p, n_grid, |j, _| if mask[j] { 1.0 } else { 0.0 });
        Self::new(lambda, alpha, DEFAULT_GAMMA, mask, group, entry)
    }

    pub fn from_weights(lambda: f64, alpha: f64, gamma: f64, mask: Vec<bool>, weights: AdaptiveWeights) -> Result<Self> {
        Self::new(lambda, alpha, gamma, mask, weights.group, weights.entry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return invalid(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return invalid(format!("gamma must be > 0, got {}", self.gamma));
        }
        let p = self.mask.len();
        if self.group_weights.len() != p || self.entry_weights.nrows() != p {
            return invalid("penalty weights do not match the number of covariates");
        }
        if self.group_weights.iter().chain(self.entry_weights.iter()).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("penalty weights must be finite and nonnegative");
        }
        for j in 0..p {
            if !self.mask[j] && (self.group_weights[j] != 0.0 || self.entry_weights.row(j).iter().any(|w| *w != 0.0)) {
                return invalid(format!("unpenalized row {j} carries nonzero weights"));
            }
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let cfg = Self { lambda, ..self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn group_weights(&self) -> &[f64] {
        &self.group_weights
    }

    pub fn entry_weights(&self) -> &DMatrix<f64> {
        &self.entry_weights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_grid(&self) -> usize {
        self.entry_weights.ncols()
    }

    pub(crate) fn entry_row(&self, j: usize) -> Vec<f64> {
        self.entry_weights.row(j).iter().copied().collect()
    }

    /// Applies the proximal operator row by row.
    pub(crate) fn prox_matrix(&self, z: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
        let mut out = z.clone();
        for j in 0..z.nrows() {
            if !self.mask[j] {
                continue;
            }
            let row: Vec<f64> = z.row(j).iter().copied().collect();
            let new = prox_sgl(&row, step, self.lambda, self.alpha, self.group_weights[j], &self.entry_row(j));
            for (k, v) in new.into_iter().enumerate() {
                out[(j, k)] = v;
            }
        }
        out
    }

    pub(crate) fn value_of(&self, b: &DMatrix<f64>) -> f64 {
        let sqrt_s = (b.ncols() as f64).sqrt();
        let mut total = 0.0;
        for j in 0..b.nrows() {
            let row = b.row(j);
            let group = (1.0 - self.alpha) * sqrt_s * self.group_weights[j] * row.norm();
            let lasso: f64 = row.iter().zip(self.entry_weights.row(j).iter()).map(|(v, w)| w * v.abs()).sum();
            total += group + self.alpha * lasso;
        }
        self.lambda * total
    }
}

pub fn penalty_value(coefficients: &CoefficientMatrix, cfg: &PenaltyConfig) -> f64 {
    cfg.value_of(coefficients.values())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    pub group: Vec<f64>,
    pub entry: DMatrix<f64>,
}

/// `w_j = ||b_j||^-gamma`, `w_js = |b_js|^-gamma`, capped at `cap`; masked
/// (unpenalized) rows get zero.
pub fn adaptive_weights(b_mle: &CoefficientMatrix, gamma: f64, cap: f64) -> AdaptiveWeights {
    let values = b_mle.values();
    let mask = b_mle.penalty_mask();
    let inv_pow = |x: f64| {
        let w = x.powf(-gamma);
        if w.is_finite() { w.min(cap) } else { cap }
    };
    let group = (0..values.nrows())
        .map(|j| if mask[j] { inv_pow(values.row(j).norm()) } else { 0.0 })
        .collect();
    let entry = DMatrix::from_fn(values.nrows(), values.ncols(), |j, s| {
        if mask[j] { inv_pow(values[(j, s)].abs()) } else { 0.0 }
    });
    AdaptiveWeights { group, entry }
}

/// Proximal operator of the sparse group Lasso on one row: soft-threshold
/// each entry at `step * lambda * alpha * w_s`, then shrink the result as a
/// group by `step * lambda * (1 - alpha) * sqrt(S) * w_j`.
pub fn prox_sgl(row: &[f64], step: f64, lambda: f64, alpha: f64, group_weight: f64, entry_weights: &[f64]) -> Vec<f64> {
    debug_assert_eq!(row.len(), entry_weights.len());
    let scale = step * lambda;
    let mut v: Vec<f64> = row
        .iter()
        .zip(entry_weights)
        .map(|(&z, &w)| {
            let t = scale * alpha * w;
            z.signum() * (z.abs() - t).max(0.0)
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let group_t = scale * (1.0 - alpha) * (row.len() as f64).sqrt() * group_weight;
    if norm <= group_t {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if group_t > 0.0 {
        let shrink = 1.0 - group_t / norm;
        v.iter_mut().for_each(|x| *x *= shrink);
    }
    v
}
