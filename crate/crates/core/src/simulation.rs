//! Synthetic two-group longitudinal data and the method comparison harness.
//!
//! Every subject gets a random intercept `theta_i ~ N(0, sigma2 * ratio)` and
//! responses `y = beta_0(t) + beta_1(t) x_i + theta_i + sigma * eps` where
//! `x_i` is a 0/1 group indicator assigned to exactly half the subjects.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceFamily;
use crate::error::{invalid, Result};
use crate::model::{LongitudinalDataset, SubjectRecord, TimeGrid};
use crate::selection::{fit_path, PathConfig};

pub const COVARIATE_NAMES: [&str; 2] = ["intercept", "group"];
/// Fraction of time points and of subjects picked for deletion in the
/// regular design; the picked points are missing for the picked subjects.
pub const MISSING_FRACTION: f64 = 0.71;
pub const DEFAULT_SIM_BANDWIDTH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// 10-point grid; a random block of subjects misses a random block of
    /// time points.
    RegularMissing,
    /// 100-point grid; every subject sees its own random subset.
    Irregular,
}

impl std::str::FromStr for Scenario {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular-missing" => Ok(Scenario::RegularMissing),
            "irregular" => Ok(Scenario::Irregular),
            _ => invalid(format!("unknown scenario '{s}' (expected regular-missing or irregular)")),
        }
    }
}

impl Scenario {
    pub fn n_grid(self) -> usize {
        match self {
            Scenario::RegularMissing => 10,
            Scenario::Irregular => 100,
        }
    }

    /// Observed points per incomplete subject (regular design) or per
    /// subject (irregular design).
    pub fn default_observed_points(self) -> usize {
        match self {
            Scenario::RegularMissing => self.n_grid() - (MISSING_FRACTION * self.n_grid() as f64).round() as usize,
            Scenario::Irregular => 10,
        }
    }

    pub fn grid(self) -> TimeGrid {
        TimeGrid::equispaced(0.0, 1.0, self.n_grid()).expect("fixed grid is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub sigma2: f64,
    pub ratio: f64,
    pub observed_points: usize,
    /// Irregular design: use `1[t < 0.45]` instead of `1[t >= 0.45]`.
    pub flip_indicator: bool,
    /// Generate with `beta_1 = 0`.
    pub null_signal: bool,
}

impl ScenarioParams {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n_subjects: 100,
            sigma2: 1.0,
            ratio: 1.0,
            observed_points: scenario.default_observed_points(),
            flip_indicator: false,
            null_signal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return invalid("at least two subjects are needed");
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return invalid(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.ratio.is_finite() && self.ratio >= 0.0) {
            return invalid(format!("ratio must be >= 0, got {}", self.ratio));
        }
        let s = self.scenario.n_grid();
        if self.observed_points == 0 || self.observed_points > s {
            return invalid(format!("observed_points must lie in 1..={s}, got {}", self.observed_points));
        }
        Ok(())
    }

    /// `beta_1(t)` of the generating model.
    pub fn group_effect(&self, t: f64) -> f64 {
        if self.null_signal {
            return 0.0;
        }
        match self.scenario {
            Scenario::RegularMissing => (2.0 * std::f64::consts::PI * (t - 0.25)).sin().max(0.0),
            Scenario::Irregular => {
                let active = (t >= 0.45) != self.flip_indicator;
                if active {
                    sigmoid(20.0 * (0.6 - t))
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: LongitudinalDataset,
    pub grid: TimeGrid,
    /// Rows `beta_0`, `beta_1` on the grid.
    pub truth: DMatrix<f64>,
}

fn observed_indices(params: &ScenarioParams, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = params.scenario.n_grid();
    let n = params.n_subjects;
    match params.scenario {
        Scenario::RegularMissing => {
            let dropped_points = index::sample(rng, s, s - params.observed_points).into_vec();
            let n_incomplete = (MISSING_FRACTION * n as f64).round() as usize;
            let incomplete = index::sample(rng, n, n_incomplete).into_vec();
            let mut is_incomplete = vec![false; n];
            for i in incomplete {
                is_incomplete[i] = true;
            }
            (0..n)
                .map(|i| (0..s).filter(|k| !(is_incomplete[i] && dropped_points.contains(k))).collect())
                .collect()
        }
        Scenario::Irregular => (0..n)
            .map(|_| {
                let mut v = index::sample(rng, s, params.observed_points).into_vec();
                v.sort_unstable();
                v
            })
            .collect(),
    }
}

/// Draws one dataset. Covariates are an intercept column and the group
/// indicator.
pub fn generate(params: &ScenarioParams, seed: u64) -> Result<SimulatedData> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = params.scenario.grid();
    let n = params.n_subjects;

    let mut groups: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
    groups.shuffle(&mut rng);
    let observed = observed_indices(params, &mut rng);
    let sigma = params.sigma2.sqrt();
    let theta_dist = Normal::new(0.0, (params.sigma2 * params.ratio).sqrt()).expect("finite sd");
    let beta1: Vec<f64> = grid.points().iter().map(|&t| params.group_effect(t)).collect();

    let width = format!("{}", n - 1).len();
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let theta = theta_dist.sample(&mut rng);
        let idx = &observed[i];
        let times: Vec<f64> = idx.iter().map(|&k| grid.points()[k]).collect();
        let responses: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                beta1[k] * groups[i] + theta + sigma * eps
            })
            .collect();
        let design = DMatrix::from_fn(idx.len(), 2, |_, j| if j == 0 { 1.0 } else { groups[i] });
        subjects.push(SubjectRecord::new(format!("s{i:0width$}"), times, responses, design)?);
    }
    let names = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let dataset = LongitudinalDataset::new(subjects, names)?;
    let truth = DMatrix::from_fn(2, grid.len(), |j, k| if j == 0 { 0.0 } else { beta1[k] });
    Ok(SimulatedData { dataset, grid, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub accuracy: f64,
    /// Share of truly nonzero points estimated nonzero; 0 if there are none.
    pub tpr: f64,
    pub fdr: f64,
}

pub fn evaluate(estimate: &[f64], truth: &[f64]) -> Result<Metrics> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return invalid("estimate and truth must be nonempty and of equal length");
    }
    let s = truth.len() as f64;
    let mae = estimate.iter().zip(truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / s;
    let (mut tp, mut fp, mut agree, mut positives) = (0usize, 0usize, 0usize, 0usize);
    for (&e, &t) in estimate.iter().zip(truth) {
        let (en, tn) = (e != 0.0, t != 0.0);
        agree += usize::from(en == tn);
        positives += usize::from(tn);
        tp += usize::from(en && tn);
        fp += usize::from(en && !tn);
    }
    Ok(Metrics {
        mae,
        accuracy: agree as f64 / s,
        tpr: tp as f64 / positives.max(1) as f64,
        fdr: fp as f64 / (tp + fp).max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Compound symmetry working covariance, `h = 0.2`.
    Lsvcmm,
    /// Independence working covariance, `h = 0.2`.
    Lsvcm,
    /// No smoothing: one joint fit with a pointwise kernel.
    Alasso,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lsvcmm, Method::Lsvcm, Method::Alasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lsvcmm => "lsvcmm",
            Method::Lsvcm => "lsvcm",
            Method::Alasso => "alasso",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lsvcmm" => Ok(Method::Lsvcmm),
            "lsvcm" => Ok(Method::Lsvcm),
            "alasso" => Ok(Method::Alasso),
            _ => invalid(format!("unknown method '{s}'")),
        }
    }
}

/// Fits `method` by EBIC over lambda and returns the group-effect row on the
/// full scenario grid.
pub fn fit_method(method: Method, data: &SimulatedData) -> Result<Vec<f64>> {
    let mask = vec![false, true];
    let (family, grid, h) = match method {
        Method::Lsvcmm => (CovarianceFamily::CompoundSymmetry, data.grid.clone(), DEFAULT_SIM_BANDWIDTH),
        Method::Lsvcm => (CovarianceFamily::Independent, data.grid.clone(), DEFAULT_SIM_BANDWIDTH),
        Method::Alasso => {
            // Grid points nobody observed cannot be estimated pointwise and
            // are reported as zero.
            let grid = TimeGrid::from_dataset(&data.dataset);
            (CovarianceFamily::Independent, grid, 0.1 * data.grid.median_gap())
        }
    };
    let path = fit_path(&data.dataset, &grid, &[h], &PathConfig::new(family, mask))?;
    let row = path.selected_entry().fit.coefficients.row(1);
    Ok(data
        .grid
        .points()
        .iter()
        .map(|&t| grid.locate(t).map_or(0.0, |k| row[k]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Sigma2,
    ObservedPoints,
    Ratio,
    NSubjects,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Sigma2 => "sigma2",
            Axis::ObservedPoints => "observed_points",
            Axis::Ratio => "ratio",
            Axis::NSubjects => "n_subjects",
        }
    }

    pub fn default_values(self, scenario: Scenario) -> Vec<f64> {
        match self {
            Axis::Sigma2 => vec![0.25, 0.5, 1.0, 2.0, 4.0],
            Axis::Ratio => vec![0.0, 0.5, 1.0, 2.0, 4.0],
            Axis::NSubjects => vec![25.0, 50.0, 100.0, 200.0],
            Axis::ObservedPoints => match scenario {
                Scenario::RegularMissing => (3..=10).map(f64::from).collect(),
                Scenario::Irregular => (1..=10).map(|k| f64::from(5 * k)).collect(),
            },
        }
    }

    fn apply(self, base: &ScenarioParams, value: f64) -> Result<ScenarioParams> {
        let mut p = base.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                invalid(format!("{} must be a whole number, got {value}", self.name()))
            }
        };
        match self {
            Axis::Sigma2 => p.sigma2 = value,
            Axis::Ratio => p.ratio = value,
            Axis::NSubjects => p.n_subjects = count()?,
            Axis::ObservedPoints => p.observed_points = count()?,
        }
        p.validate()?;
        Ok(p)
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma2" => Ok(Axis::Sigma2),
            "observed-points" | "observed_points" | "missingness" => Ok(Axis::ObservedPoints),
            "ratio" => Ok(Axis::Ratio),
            "n-subjects" | "n_subjects" | "n" => Ok(Axis::NSubjects),
            _ => invalid(format!("unknown experiment axis '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub base: ScenarioParams,
    pub axis: Axis,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub n_reps: usize,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, axis: Axis, n_reps: usize, seed: u64) -> Self {
        Self {
            base: ScenarioParams::new(scenario),
            axis,
            values: axis.default_values(scenario),
            methods: Method::ALL.to_vec(),
            n_reps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub method: Method,
    pub axis: Axis,
    pub value: f64,
    pub replicate: usize,
    pub seed: u64,
    /// `None` when the fit failed; see `error`.
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Data seed for setting `k`, replicate `r`: the first output of ChaCha8
/// seeded with `root` on stream `k * 2^32 + r`. Every method sees the same
/// dataset.
pub fn replicate_seed(root: u64, setting: usize, replicate: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((setting as u64) << 32) | replicate as u64);
    rng.next_u64()
}

/// Runs every method on every (setting, replicate) dataset. Fit failures are
/// recorded in the row instead of aborting the run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ExperimentRow>> {
    if spec.values.is_empty() || spec.methods.is_empty() || spec.n_reps == 0 {
        return invalid("experiment needs at least one value, method and replicate");
    }
    let settings = spec
        .values
        .iter()
        .map(|&v| spec.axis.apply(&spec.base, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|k| (0..spec.n_reps).map(move |r| (k, r)))
        .collect();
    let rows: Vec<Vec<ExperimentRow>> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let seed = replicate_seed(spec.seed, k, r);
            let data = generate(&settings[k], seed);
            spec.methods
                .iter()
                .map(|&method| {
                    let outcome = data.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                        let est = fit_method(method, d).map_err(|e| e.to_string())?;
                        evaluate(&est, &d.truth.row(1).iter().copied().collect::<Vec<_>>()).map_err(|e| e.to_string())
                    });
                    ExperimentRow {
                        method,
                        axis: spec.axis,
                        value: spec.values[k],
                        replicate: r,
                        seed,
                        metrics: outcome.as_ref().ok().copied(),
                        error: outcome.err(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn middle_four_nonzero() {
        let p = ScenarioParams::new(Scenario::RegularMissing);
        let grid = Scenario::RegularMissing.grid();
        let nz: Vec<usize> = (0..10).filter(|&k| p.group_effect(grid.points()[k]) != 0.0).map(|k| k + 1).collect();
        assert_eq!(nz, vec![4, 5, 6, 7]);
        assert_eq!(p.group_effect(0.25), 0.0);
        assert!((p.group_effect(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn irregular_effect_follows_prose() {
        let p = ScenarioParams::new(Scenario::Irregular);
        let grid = Scenario::Irregular.grid();
        for k in 0..45 {
            assert_eq!(p.group_effect(grid.points()[k]), 0.0, "{k}");
        }
        assert!(p.group_effect(grid.points()[45]) > 0.0);
        assert_eq!(p.group_effect(0.6), 0.5);
        let flipped = ScenarioParams { flip_indicator: true, ..p };
        assert_eq!(flipped.group_effect(0.6), 0.0);
        assert!(flipped.group_effect(0.1) > 0.99);
    }

    #[test]
    fn regular_design_shape() {
        let p = ScenarioParams::new(Scenario::RegularMissing);
        let d = generate(&p, 3).unwrap();
        let counts: Vec<usize> = d.dataset.subjects().iter().map(|s| s.n_obs()).collect();
        assert_eq!(counts.iter().filter(|&&c| c == 3).count(), 71);
        assert_eq!(counts.iter().filter(|&&c| c == 10).count(), 29);
        let group: f64 = d.dataset.subjects().iter().map(|s| s.design()[(0, 1)]).sum();
        assert_eq!(group, 50.0);
        // Three time points are seen by everyone.
        let mut per_point = [0usize; 10];
        for s in d.dataset.subjects() {
            for &t in s.times() {
                per_point[d.grid.locate(t).unwrap()] += 1;
            }
        }
        assert_eq!(per_point.iter().filter(|&&c| c == 100).count(), 3);
        assert_eq!(per_point.iter().filter(|&&c| c == 29).count(), 7);
    }

    #[test]
    fn metrics_by_counting() {
        let truth = [0.0, 0.0, 0.0, 0.5, 0.9, 0.9, 0.5, 0.0, 0.0, 0.0];
        let m = evaluate(&truth, &truth).unwrap();
        assert_eq!((m.mae, m.accuracy, m.fdr, m.tpr), (0.0, 1.0, 0.0, 1.0));
        let m = evaluate(&[0.0; 10], &truth).unwrap();
        assert!((m.accuracy - 0.6).abs() < 1e-15);
        assert_eq!((m.tpr, m.fdr), (0.0, 0.0));
        let est = [0.1, 0.0, 0.0, 0.0, 1.0, 0.7, 0.5, 0.0, -0.2, 0.0];
        let m = evaluate(&est, &truth).unwrap();
        // TP 3, FP 2, FN 1, TN 4.
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.tpr - 0.75).abs() < 1e-15);
        assert!((m.fdr - 0.4).abs() < 1e-15);
        assert!((m.mae - (0.1 + 0.5 + 0.1 + 0.2 + 0.2) / 10.0).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ_by_setting_and_replicate() {
        let a = replicate_seed(1, 0, 0);
        assert_ne!(a, replicate_seed(1, 0, 1));
        assert_ne!(a, replicate_seed(1, 1, 0));
        assert_ne!(a, replicate_seed(2, 0, 0));
        assert_eq!(a, replicate_seed(1, 0, 0));
    }
}
