//! Longitudinal data containers, the coefficient grid, and mean evaluation.
//!
//! Each subject carries its own ordered observation times, so regular designs
//! with missing visits and fully irregular sampling share one representation.
//! Time-constant covariates are stored replicated across the subject's rows.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    id: String,
    times: Vec<f64>,
    responses: DVector<f64>,
    design: DMatrix<f64>,
}

impl SubjectRecord {
    /// `design` is `N_i x p`, one row per observation.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        responses: Vec<f64>,
        design: DMatrix<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let n = times.len();
        if n == 0 {
            return invalid(format!("subject '{id}' has no observations"));
        }
        if responses.len() != n || design.nrows() != n {
            return invalid(format!(
                "subject '{id}': {n} times, {} responses, {} design rows",
                responses.len(),
                design.nrows()
            ));
        }
        if times.iter().chain(responses.iter()).chain(design.iter()).any(|v| !v.is_finite()) {
            return invalid(format!("subject '{id}' has non-finite values"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid(format!("subject '{id}': times must be strictly increasing"));
        }
        Ok(Self {
            id,
            times,
            responses: DVector::from_vec(responses),
            design,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    fn with_id(&self, id: String) -> Self {
        Self { id, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return invalid("dataset has no subjects");
        }
        let p = covariate_names.len();
        if p == 0 {
            return invalid("dataset has no covariates");
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if s.design.ncols() != p {
                return invalid(format!(
                    "subject '{}' has {} covariates, expected {p}",
                    s.id,
                    s.design.ncols()
                ));
            }
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate subject id '{}'", s.id));
            }
        }
        Ok(Self {
            subjects,
            covariate_names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Sorted unique observation times across all subjects.
    pub fn observed_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Builds a dataset from subject indices, with replacement. Repeated
    /// subjects get a `#k` suffix so ids stay unique.
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                self.subjects
                    .get(i)
                    .map(|s| s.with_id(format!("{}#{k}", s.id)))
                    .ok_or_else(|| Error::InvalidInput(format!("subject index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subjects, self.covariate_names.clone())
    }

    /// Same data with every response multiplied by `factor`.
    pub fn scale_responses(&self, factor: f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                responses: &s.responses * factor,
                ..s.clone()
            })
            .collect();
        Self {
            subjects,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Grid column of every observation, per subject.
    pub fn grid_index(&self, grid: &TimeGrid) -> Result<Vec<Vec<usize>>> {
        self.subjects
            .iter()
            .map(|s| {
                s.times
                    .iter()
                    .map(|&t| {
                        grid.locate(t).ok_or_else(|| Error::OffGrid {
                            subject: s.id.clone(),
                            time: t,
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return invalid("time grid is empty");
        }
        if points.iter().any(|t| !t.is_finite()) {
            return invalid("time grid has non-finite points");
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("time grid must be strictly increasing");
        }
        Ok(Self { points })
    }

    /// Default grid: every distinct observed time.
    pub fn from_dataset(dataset: &LongitudinalDataset) -> Self {
        Self {
            points: dataset.observed_times(),
        }
    }

    /// `n` equispaced points from `start` to `end` inclusive.
    pub fn equispaced(start: f64, end: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![start]);
        }
        let step = (end - start) / (n - 1) as f64;
        Self::new((0..n).map(|s| start + step * s as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Index of the grid point matching `t`, accepting the nearest point when
    /// it lies within `1e-8 * range`.
    pub fn locate(&self, t: f64) -> Option<usize> {
        let tol = 1e-8 * self.range();
        let pos = self.points.partition_point(|&p| p < t);
        let mut best: Option<(usize, f64)> = None;
        for idx in [pos.wrapping_sub(1), pos] {
            if let Some(&p) = self.points.get(idx) {
                let d = (p - t).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((idx, d));
                }
            }
        }
        best.filter(|&(_, d)| d <= tol).map(|(i, _)| i)
    }

    /// Median gap between adjacent points (0 for a singleton grid).
    pub fn median_gap(&self) -> f64 {
        let mut gaps: Vec<f64> = self.points.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return 0.0;
        }
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len();
        if m % 2 == 1 {
            gaps[m / 2]
        } else {
            0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
        }
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.points
    }
}

/// The `p x S` matrix of varying-coefficient values on a grid; row `j` is
/// `beta_j` evaluated at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    values: DMatrix<f64>,
    grid: TimeGrid,
    penalty_mask: Vec<bool>,
}

impl CoefficientMatrix {
    pub fn new(values: DMatrix<f64>, grid: TimeGrid, penalty_mask: Vec<bool>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return invalid(format!(
                "coefficient matrix has {} columns but grid has {} points",
                values.ncols(),
                grid.len()
            ));
        }
        if values.nrows() != penalty_mask.len() {
            return invalid(format!(
                "coefficient matrix has {} rows but mask has {} entries",
                values.nrows(),
                penalty_mask.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("coefficient matrix has non-finite entries");
        }
        Ok(Self {
            values,
            grid,
            penalty_mask,
        })
    }

    pub fn zeros(p: usize, grid: TimeGrid, penalty_mask: Vec<bool>) -> Result<Self> {
        Self::new(DMatrix::zeros(p, grid.len()), grid, penalty_mask)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn penalty_mask(&self) -> &[bool] {
        &self.penalty_mask
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.values.row(j).iter().copied().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CoefficientMatrixRepr {
    grid: TimeGrid,
    penalty_mask: Vec<bool>,
    rows: Vec<Vec<f64>>,
}

impl Serialize for CoefficientMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        CoefficientMatrixRepr {
            grid: self.grid.clone(),
            penalty_mask: self.penalty_mask.clone(),
            rows: (0..self.n_rows()).map(|j| self.row(j)).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CoefficientMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = CoefficientMatrixRepr::deserialize(deserializer)?;
        let p = repr.rows.len();
        let s = repr.grid.len();
        if repr.rows.iter().any(|r| r.len() != s) {
            return Err(serde::de::Error::custom("coefficient row length differs from grid"));
        }
        let values = DMatrix::from_fn(p, s, |j, k| repr.rows[j][k]);
        CoefficientMatrix::new(values, repr.grid, repr.penalty_mask)
            .map_err(serde::de::Error::custom)
    }
}

/// Marginal mean `m_i` and residual `r_i = y_i - m_i` of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResiduals {
    pub mean: DVector<f64>,
    pub residual: DVector<f64>,
}

/// Evaluates `m_in = beta(t_in)' x_in` with `beta(t_in)` read from the grid
/// column matching `t_in`.
pub fn mean_and_residuals(
    dataset: &LongitudinalDataset,
    coefficients: &CoefficientMatrix,
) -> Result<Vec<SubjectResiduals>> {
    if coefficients.n_rows() != dataset.n_covariates() {
        return invalid("coefficient rows do not match dataset covariates");
    }
    let index = dataset.grid_index(coefficients.grid())?;
    Ok(residuals_with_index(dataset, coefficients.values(), &index))
}

pub(crate) fn residuals_with_index(
    dataset: &LongitudinalDataset,
    values: &DMatrix<f64>,
    index: &[Vec<usize>],
) -> Vec<SubjectResiduals> {
    dataset
        .subjects()
        .iter()
        .zip(index)
        .map(|(subject, cols)| {
            let x = subject.design();
            let mean = DVector::from_fn(subject.n_obs(), |n, _| {
                x.row(n).iter().zip(values.column(cols[n]).iter()).map(|(a, b)| a * b).sum()
            });
            let residual = subject.responses() - &mean;
            SubjectResiduals { mean, residual }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, times: &[f64], y: &[f64], x: &[f64]) -> SubjectRecord {
        let n = times.len();
        let p = x.len() / n;
        SubjectRecord::new(id, times.to_vec(), y.to_vec(), DMatrix::from_row_slice(n, p, x))
            .unwrap()
    }

    #[test]
    fn subject_validation() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(SubjectRecord::new("a", vec![1.0, 0.0], vec![1.0, 2.0], x.clone()).is_err());
        assert!(SubjectRecord::new("a", vec![0.0, 1.0], vec![1.0], x.clone()).is_err());
        assert!(SubjectRecord::new("a", vec![0.0, f64::NAN], vec![1.0, 2.0], x.clone()).is_err());
        assert!(SubjectRecord::new("a", vec![], vec![], DMatrix::zeros(0, 1)).is_err());
        assert!(SubjectRecord::new("a", vec![0.0, 1.0], vec![1.0, 2.0], x).is_ok());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let a = subject("a", &[0.0], &[1.0], &[1.0]);
        let err = LongitudinalDataset::new(vec![a.clone(), a], vec!["x".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn grid_locate_with_tolerance() {
        let g = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(g.locate(0.5), Some(1));
        assert_eq!(g.locate(0.5 + 1e-10), Some(1));
        assert_eq!(g.locate(0.5 + 1e-6), None);
        assert_eq!(g.locate(-1e-12), Some(0));
        assert_eq!(g.locate(2.0), None);
    }

    #[test]
    fn zero_coefficients_give_raw_residuals() {
        let ds = LongitudinalDataset::new(
            vec![
                subject("a", &[0.0, 1.0], &[1.0, 2.0], &[1.0, 0.0, 1.0, 0.0]),
                subject("b", &[1.0], &[3.0], &[1.0, 1.0]),
            ],
            vec!["intercept".into(), "g".into()],
        )
        .unwrap();
        let grid = TimeGrid::from_dataset(&ds);
        let b = CoefficientMatrix::zeros(2, grid, vec![false, true]).unwrap();
        let res = mean_and_residuals(&ds, &b).unwrap();
        assert_eq!(res[0].residual.as_slice(), &[1.0, 2.0]);
        assert_eq!(res[1].mean.as_slice(), &[0.0]);
    }

    #[test]
    fn constant_row_shifts_residuals() {
        let ds = LongitudinalDataset::new(
            vec![subject("a", &[0.0, 0.5, 1.0], &[1.0, 2.0, 4.0], &[1.0, 1.0, 1.0])],
            vec!["intercept".into()],
        )
        .unwrap();
        let grid = TimeGrid::from_dataset(&ds);
        let b = CoefficientMatrix::new(DMatrix::from_element(1, 3, 1.5), grid, vec![false])
            .unwrap();
        let res = mean_and_residuals(&ds, &b).unwrap();
        assert_eq!(res[0].residual.as_slice(), &[-0.5, 0.5, 2.5]);
    }

    #[test]
    fn off_grid_time_names_subject() {
        let ds = LongitudinalDataset::new(
            vec![subject("late", &[0.0, 0.7], &[1.0, 2.0], &[1.0, 1.0])],
            vec!["intercept".into()],
        )
        .unwrap();
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let b = CoefficientMatrix::zeros(1, grid, vec![false]).unwrap();
        match mean_and_residuals(&ds, &b) {
            Err(Error::OffGrid { subject, time }) => {
                assert_eq!(subject, "late");
                assert_eq!(time, 0.7);
            }
            other => panic!("expected OffGrid, got {other:?}"),
        }
    }

    #[test]
    fn coefficient_matrix_json_round_trip() {
        let grid = TimeGrid::new(vec![0.0, 0.25, 1.0]).unwrap();
        let b = CoefficientMatrix::new(
            DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -1.0, 0.0, 1e-17]),
            grid,
            vec![false, true],
        )
        .unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: CoefficientMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn resample_suffixes_ids() {
        let ds = LongitudinalDataset::new(
            vec![subject("a", &[0.0], &[1.0], &[1.0]), subject("b", &[0.0], &[2.0], &[1.0])],
            vec!["x".into()],
        )
        .unwrap();
        let r = ds.resample(&[1, 1, 0]).unwrap();
        assert_eq!(r.n_subjects(), 3);
        assert_eq!(r.subjects()[0].id(), "b#0");
        assert_eq!(r.subjects()[1].responses()[0], 2.0);
    }
}
