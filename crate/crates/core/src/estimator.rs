//! Penalized kernel-smoothed estimating equations.
//!
//! With `P_i = V_i^-1` and `r_i = y_i - m_i` the residual at the current
//! coefficients (each observation evaluated at its own grid point), the
//! estimating function at grid point `t_s` is
//!
//! ```text
//! U_s = -sum_i sum_n k_h(t_s - t_in) x_in [ (P_i r_i)_n + P_i,nn x_in'(b(t_in) - b_s) ]
//! ```
//!
//! i.e. the kernel-weighted observation itself is fitted locally constant by
//! `b_s` while the other observations of the subject enter at their current
//! fit. As `h -> 0` this is the pointwise GLS score, as `h -> inf` it is
//! solved by the pooled constant fit, and with independent errors it reduces
//! to ordinary locally constant smoothing.
//!
//! `U` is affine in `B`. The part acting on `b_s` through the observation's
//! own precision weight is block diagonal and symmetric; the rest couples
//! grid points. Mean phases (fixed covariance) alternate with covariance
//! updates (fixed residuals), always finishing with a mean phase so that the
//! returned coefficients are stationary for the returned covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{quasi_loglik, update_covariance, CovarianceFamily, Precision, VarianceParams};
use crate::error::{invalid, Error, Result};
use crate::kernel::KernelConfig;
use crate::model::{residuals_with_index, CoefficientMatrix, LongitudinalDataset, TimeGrid};
use crate::penalty::PenaltyConfig;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 5000;
pub const DEFAULT_COVARIANCE_CYCLES: usize = 2;
const MIN_RELATIVE_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub kernel: KernelConfig,
    pub penalty: PenaltyConfig,
    /// Starting covariance; its family is the family that gets fitted.
    pub params: VarianceParams,
    pub max_iter: usize,
    pub tol: f64,
    /// Number of mean phases; the covariance is refreshed between them.
    pub covariance_cycles: usize,
}

impl FitConfig {
    pub fn new(kernel: KernelConfig, penalty: PenaltyConfig, params: VarianceParams) -> Self {
        Self {
            kernel,
            penalty,
            params,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            covariance_cycles: DEFAULT_COVARIANCE_CYCLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.penalty.validate()?;
        self.params.validate()?;
        if self.max_iter == 0 {
            return invalid("max_iter must be >= 1");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return invalid("tol must be positive");
        }
        if self.covariance_cycles == 0 {
            return invalid("covariance_cycles must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: CoefficientMatrix,
    pub params: VarianceParams,
    /// Smooth surrogate plus penalty after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Index into `objective_trace` where each inner solve starts; the
    /// trace is nonincreasing within a segment.
    pub phase_starts: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Gaussian quasi-likelihood at the returned coefficients and covariance.
    pub loglik: f64,
}

/// Nonzero kernel weights per grid point as `(subject, observation, weight)`,
/// ordered by subject then observation.
#[derive(Debug, Clone)]
pub(crate) struct SmoothingWeights {
    by_grid: Vec<Vec<(usize, usize, f64)>>,
}

impl SmoothingWeights {
    pub(crate) fn new(dataset: &LongitudinalDataset, grid: &TimeGrid, kernel: &KernelConfig) -> Result<Self> {
        kernel.validate()?;
        let mut by_grid = Vec::with_capacity(grid.len());
        for &t in grid.points() {
            let mut entries = Vec::new();
            for (i, subject) in dataset.subjects().iter().enumerate() {
                for (n, &tn) in subject.times().iter().enumerate() {
                    let w = kernel.eval(t - tn);
                    if w > 0.0 {
                        entries.push((i, n, w));
                    }
                }
            }
            if entries.is_empty() {
                return Err(Error::ZeroKernelMass { time: t });
            }
            by_grid.push(entries);
        }
        Ok(Self { by_grid })
    }
}

/// Linear pieces of `U` at a fixed covariance: `U_s = H_s b_s - g_s + [C vec(B)]_s`.
///
/// `H_s` and `g_s` collect the kernel-weighted observations themselves; `C`
/// couples grid points through the off-diagonal precision entries and is
/// absent for an independence working covariance.
#[derive(Debug, Clone)]
pub(crate) struct LocalSystems {
    hess: Vec<DMatrix<f64>>,
    score: Vec<DVector<f64>>,
    /// `pS x pS`, indexed by `s * p + j`.
    coupling: Option<DMatrix<f64>>,
}

impl LocalSystems {
    pub(crate) fn new(
        dataset: &LongitudinalDataset,
        weights: &SmoothingWeights,
        index: &[Vec<usize>],
        params: &VarianceParams,
    ) -> Result<Self> {
        let p = dataset.n_covariates();
        let s_len = weights.by_grid.len();
        let subjects = dataset.subjects();
        let mut prec = Vec::with_capacity(subjects.len());
        let mut py = Vec::with_capacity(subjects.len());
        for (i, subject) in subjects.iter().enumerate() {
            let pm = Precision::new(subject.times(), params, i)?;
            let n = subject.n_obs();
            py.push(pm.apply(subject.responses()));
            prec.push(pm.apply_mat(&DMatrix::identity(n, n)));
        }
        let coupled = params.family != CovarianceFamily::Independent;
        let mut coupling = coupled.then(|| DMatrix::zeros(p * s_len, p * s_len));
        let mut hess = Vec::with_capacity(s_len);
        let mut score = Vec::with_capacity(s_len);
        for (s, entries) in weights.by_grid.iter().enumerate() {
            let mut h = DMatrix::zeros(p, p);
            let mut g = DVector::zeros(p);
            for &(i, n, w) in entries {
                let x = subjects[i].design();
                let pi = &prec[i];
                let wd = w * pi[(n, n)];
                for j in 0..p {
                    let xj = x[(n, j)];
                    if xj == 0.0 {
                        continue;
                    }
                    for l in 0..p {
                        h[(j, l)] += wd * xj * x[(n, l)];
                    }
                    g[j] += w * xj * py[i][n];
                }
                if let Some(c) = coupling.as_mut() {
                    for m in (0..x.nrows()).filter(|&m| m != n) {
                        let wp = w * pi[(n, m)];
                        if wp == 0.0 {
                            continue;
                        }
                        let col0 = index[i][m] * p;
                        for j in 0..p {
                            let a = wp * x[(n, j)];
                            if a == 0.0 {
                                continue;
                            }
                            for l in 0..p {
                                c[(s * p + j, col0 + l)] += a * x[(m, l)];
                            }
                        }
                    }
                }
            }
            hess.push(h);
            score.push(g);
        }
        Ok(Self { hess, score, coupling })
    }

    fn coupled(&self) -> bool {
        self.coupling.is_some()
    }

    /// `C vec(B)` as a `p x S` matrix.
    fn cross(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.coupling {
            Some(c) => {
                let v = c * DVector::from_column_slice(b.as_slice());
                DMatrix::from_column_slice(b.nrows(), b.ncols(), v.as_slice())
            }
            None => DMatrix::zeros(b.nrows(), b.ncols()),
        }
    }

    /// `[H_s b_s - g_s]_s + offset`.
    fn local_gradient(&self, b: &DMatrix<f64>, offset: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = offset.clone();
        for (s, (h, g)) in self.hess.iter().zip(&self.score).enumerate() {
            let col = h * b.column(s) - g;
            let mut target = u.column_mut(s);
            target += col;
        }
        u
    }

    /// The full estimating function.
    pub(crate) fn gradient(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.local_gradient(b, &self.cross(b))
    }

    /// Quadratic whose gradient is `local_gradient(., offset)`.
    fn surrogate(&self, b: &DMatrix<f64>, offset: &DMatrix<f64>) -> f64 {
        self.hess
            .iter()
            .zip(&self.score)
            .enumerate()
            .map(|(s, (h, g))| {
                let col = b.column(s);
                0.5 * col.dot(&(h * col)) - g.dot(&col) + offset.column(s).dot(&col)
            })
            .sum()
    }

    /// Largest eigenvalue over the `H_s`, by power iteration.
    fn curvature(&self) -> f64 {
        let mut best: f64 = 0.0;
        for h in &self.hess {
            let p = h.nrows();
            let mut v = DVector::from_fn(p, |j, _| 1.0 + 0.1 * j as f64);
            let mut est = 0.0;
            for _ in 0..200 {
                let w = h * &v;
                let norm = w.norm();
                if norm == 0.0 {
                    est = 0.0;
                    break;
                }
                let next = norm / v.norm();
                v = w / norm;
                if (next - est).abs() <= 1e-10 * next {
                    est = next;
                    break;
                }
                est = next;
            }
            best = best.max(est);
        }
        best
    }

    /// Solves `U = 0` for the rows flagged in `free`, holding the other rows
    /// of `fixed` where they are.
    pub(crate) fn solve_rows(&self, free: &[bool], fixed: &DMatrix<f64>) -> DMatrix<f64> {
        let p = free.len();
        let idx: Vec<usize> = (0..p).filter(|&j| free[j]).collect();
        let mut out = fixed.clone();
        if idx.is_empty() {
            return out;
        }
        let k = idx.len();
        if let Some(c) = &self.coupling {
            let s_len = self.hess.len();
            let unknown: Vec<usize> = (0..s_len).flat_map(|s| idx.iter().map(move |&j| s * p + j)).collect();
            let mut full = c.clone();
            for (s, h) in self.hess.iter().enumerate() {
                let mut block = full.view_mut((s * p, s * p), (p, p));
                block += h;
            }
            let g = DVector::from_iterator(p * s_len, self.score.iter().flat_map(|g| g.iter().copied()));
            let mut fixed_vec = DVector::from_column_slice(fixed.as_slice());
            for &u in &unknown {
                fixed_vec[u] = 0.0;
            }
            let rhs_full = g - &full * fixed_vec;
            let rhs = DVector::from_fn(unknown.len(), |a, _| rhs_full[unknown[a]]);
            let sub = DMatrix::from_fn(unknown.len(), unknown.len(), |a, b| full[(unknown[a], unknown[b])]);
            let sol = solve_small(&sub, &rhs);
            for (a, &u) in unknown.iter().enumerate() {
                out[(u % p, u / p)] = sol[a];
            }
            return out;
        }
        for (s, (h, g)) in self.hess.iter().zip(&self.score).enumerate() {
            let mut rhs = DVector::from_fn(k, |a, _| g[idx[a]]);
            for (j, fj) in free.iter().enumerate() {
                if !fj {
                    for a in 0..k {
                        rhs[a] -= h[(idx[a], j)] * fixed[(j, s)];
                    }
                }
            }
            let sub = DMatrix::from_fn(k, k, |a, c| h[(idx[a], idx[c])]);
            let sol = solve_small(&sub, &rhs);
            for a in 0..k {
                out[(idx[a], s)] = sol[a];
            }
        }
        out
    }
}

/// Dense solve with a tiny ridge fallback when the local system is singular
/// (e.g. a covariate never observed near a grid point).
fn solve_small(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(x) = a.clone().lu().solve(b) {
        if x.iter().all(|v| v.is_finite()) && (a * &x - b).amax() <= 1e-8 * (1.0 + b.amax()) {
            return x;
        }
    }
    let k = a.nrows();
    let ridge = 1e-10 * (a.trace().abs() / k as f64).max(f64::MIN_POSITIVE);
    let reg = a + DMatrix::identity(k, k) * ridge;
    reg.lu().solve(b).unwrap_or_else(|| DVector::zeros(k))
}

struct PhaseOutcome {
    values: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

/// Tracks successive changes of a fixed-point iteration and decides when the
/// distance to the fixed point, bounded by `change * q / (1 - q)` with `q`
/// the observed contraction factor of the last few steps, is below `tol`.
struct Contraction {
    last: Option<f64>,
    ratios: Vec<f64>,
}

impl Contraction {
    fn new() -> Self {
        Self { last: None, ratios: Vec::new() }
    }

    fn done(&mut self, change: f64, tol: f64) -> bool {
        if change == 0.0 {
            return true;
        }
        let mut done = false;
        if let Some(prev) = self.last {
            self.ratios.push(if prev > 0.0 { change / prev } else { 1.0 });
            if self.ratios.len() > 10 {
                self.ratios.remove(0);
            }
            let q = self.ratios.iter().copied().fold(0.0, f64::max);
            done = change < tol && q < 1.0 && change * q / (1.0 - q) < tol;
        }
        self.last = Some(change);
        done
    }
}

/// Proximal gradient with backtracking on the separable quadratic
/// `sum_s 1/2 b_s' H_s b_s - (g_s - offset_s)' b_s` plus the penalty.
fn prox_gradient(
    systems: &LocalSystems,
    penalty: &PenaltyConfig,
    init: DMatrix<f64>,
    offset: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
    trace: &mut Vec<f64>,
) -> Result<PhaseOutcome> {
    let curvature = systems.curvature();
    let step0 = if curvature > 0.0 { 1.0 / curvature } else { 1.0 };
    let mut step = step0;
    let mut b = init;
    let mut grad = systems.local_gradient(&b, offset);
    let mut smooth = systems.surrogate(&b, offset);
    trace.push(smooth + penalty.value_of(&b));

    let mut stop = Contraction::new();
    for it in 1..=max_iter {
        let (next, next_smooth, diff) = loop {
            let next = penalty.prox_matrix(&(&b - &grad * step), step);
            let diff = &next - &b;
            let next_smooth = systems.surrogate(&next, offset);
            let bound = smooth + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if next_smooth <= bound + 1e-12 * (1.0 + smooth.abs()) {
                break (next, next_smooth, diff);
            }
            step *= 0.5;
            if step < MIN_RELATIVE_STEP * step0 {
                return Err(Error::StepSizeUnderflow { step });
            }
        };
        let change = diff.amax() / (1.0 + b.amax());
        b = next;
        smooth = next_smooth;
        grad = systems.local_gradient(&b, offset);
        trace.push(smooth + penalty.value_of(&b));
        if stop.done(change, tol) {
            return Ok(PhaseOutcome { values: b, iterations: it, converged: true });
        }
    }
    Ok(PhaseOutcome { values: b, iterations: max_iter, converged: false })
}

/// Solves the penalized equations at a fixed covariance. With a coupled
/// working covariance the cross-grid term is frozen at the current iterate,
/// the separable problem is solved, and this repeats until the iterate stops
/// moving. Each inner solve starts a new segment of `trace`.
fn mean_phase(
    systems: &LocalSystems,
    penalty: &PenaltyConfig,
    init: DMatrix<f64>,
    max_iter: usize,
    tol: f64,
    trace: &mut Vec<f64>,
    segments: &mut Vec<usize>,
) -> Result<PhaseOutcome> {
    let mut b = init;
    let mut iterations = 0;
    let mut stop = Contraction::new();
    for _ in 0..max_iter {
        let offset = systems.cross(&b);
        segments.push(trace.len());
        let out = prox_gradient(systems, penalty, b.clone(), &offset, max_iter, tol, trace)?;
        iterations += out.iterations;
        let change = (&out.values - &b).amax() / (1.0 + b.amax());
        b = out.values;
        if !systems.coupled() {
            return Ok(PhaseOutcome { values: b, iterations, converged: out.converged });
        }
        if stop.done(change, tol) {
            return Ok(PhaseOutcome { values: b, iterations, converged: out.converged });
        }
    }
    Ok(PhaseOutcome { values: b, iterations, converged: false })
}

/// Dataset, grid and kernel weights shared by every fit at one bandwidth.
#[derive(Debug, Clone)]
pub(crate) struct Problem<'a> {
    pub(crate) dataset: &'a LongitudinalDataset,
    pub(crate) grid: TimeGrid,
    index: Vec<Vec<usize>>,
    weights: SmoothingWeights,
    times: Vec<&'a [f64]>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(dataset: &'a LongitudinalDataset, grid: &TimeGrid, kernel: &KernelConfig) -> Result<Self> {
        let index = dataset.grid_index(grid)?;
        let weights = SmoothingWeights::new(dataset, grid, kernel)?;
        let times = dataset.subjects().iter().map(|s| s.times()).collect();
        Ok(Self {
            dataset,
            grid: grid.clone(),
            index,
            weights,
            times,
        })
    }

    pub(crate) fn systems(&self, params: &VarianceParams) -> Result<LocalSystems> {
        LocalSystems::new(self.dataset, &self.weights, &self.index, params)
    }

    fn residuals(&self, values: &DMatrix<f64>) -> Vec<DVector<f64>> {
        residuals_with_index(self.dataset, values, &self.index)
            .into_iter()
            .map(|r| r.residual)
            .collect()
    }

    pub(crate) fn loglik(&self, values: &DMatrix<f64>, params: &VarianceParams) -> Result<f64> {
        quasi_loglik(&self.residuals(values), &self.times, params)
    }

    pub(crate) fn update_params(&self, values: &DMatrix<f64>, current: &VarianceParams) -> Result<VarianceParams> {
        update_covariance(&self.residuals(values), &self.times, current.family, current)
    }

    /// Unpenalized solve of the rows in `free`, others fixed at zero, with
    /// `refreshes` covariance updates each followed by a new mean solve.
    pub(crate) fn fit_free_rows(
        &self,
        free: &[bool],
        start: &VarianceParams,
        refreshes: usize,
        mask: Vec<bool>,
    ) -> Result<FitResult> {
        let p = self.dataset.n_covariates();
        let zeros = DMatrix::zeros(p, self.grid.len());
        let mut params = *start;
        let mut values = self.systems(&params)?.solve_rows(free, &zeros);
        for _ in 0..refreshes {
            params = self.update_params(&values, &params)?;
            values = self.systems(&params)?.solve_rows(free, &zeros);
        }
        let systems = self.systems(&params)?;
        let u = systems.gradient(&values);
        let resid = (0..p).filter(|&j| free[j]).map(|j| u.row(j).amax()).fold(0.0, f64::max);
        let scale = systems.score.iter().map(|g| g.amax()).fold(1.0, f64::max);
        let loglik = self.loglik(&values, &params)?;
        Ok(FitResult {
            coefficients: CoefficientMatrix::new(values, self.grid.clone(), mask)?,
            params,
            objective_trace: Vec::new(),
            phase_starts: Vec::new(),
            iterations: refreshes + 1,
            converged: resid <= DEFAULT_TOL * scale,
            loglik,
        })
    }

    pub(crate) fn fit_penalized(&self, cfg: &FitConfig, init: Option<&DMatrix<f64>>) -> Result<FitResult> {
        cfg.validate()?;
        let p = self.dataset.n_covariates();
        let s = self.grid.len();
        let mask = cfg.penalty.mask().to_vec();
        if mask.len() != p || cfg.penalty.n_grid() != s {
            return invalid("penalty dimensions do not match the dataset and grid");
        }
        let mut params = cfg.params;
        let mut systems = self.systems(&params)?;
        let mut values = match init {
            Some(b) if b.shape() == (p, s) => b.clone(),
            Some(_) => return invalid("initial coefficients have the wrong shape"),
            None => {
                let free: Vec<bool> = mask.iter().map(|m| !m).collect();
                systems.solve_rows(&free, &DMatrix::zeros(p, s))
            }
        };
        let mut trace = Vec::new();
        let mut phase_starts = Vec::new();
        let mut iterations = 0;
        let mut converged = true;
        for cycle in 0..cfg.covariance_cycles {
            if cycle > 0 {
                params = self.update_params(&values, &params)?;
                systems = self.systems(&params)?;
            }
            let out = mean_phase(&systems, &cfg.penalty, values, cfg.max_iter, cfg.tol, &mut trace, &mut phase_starts)?;
            values = out.values;
            iterations += out.iterations;
            converged &= out.converged;
        }
        // Report the covariance that matches the final coefficients, so the
        // log-likelihood is profiled rather than one cycle stale.
        if let Ok(fresh) = self.update_params(&values, &params) {
            params = fresh;
        }
        let loglik = self.loglik(&values, &params)?;
        Ok(FitResult {
            coefficients: CoefficientMatrix::new(values, self.grid.clone(), mask)?,
            params,
            objective_trace: trace,
            phase_starts,
            iterations,
            converged,
            loglik,
        })
    }
}

/// `U` evaluated at every grid column of `coefficients`, as a `p x S` matrix.
pub fn estimating_function(
    dataset: &LongitudinalDataset,
    coefficients: &CoefficientMatrix,
    params: &VarianceParams,
    kernel: &KernelConfig,
) -> Result<DMatrix<f64>> {
    if coefficients.n_rows() != dataset.n_covariates() {
        return invalid("coefficient rows do not match dataset covariates");
    }
    let index = dataset.grid_index(coefficients.grid())?;
    let weights = SmoothingWeights::new(dataset, coefficients.grid(), kernel)?;
    let systems = LocalSystems::new(dataset, &weights, &index, params)?;
    Ok(systems.gradient(coefficients.values()))
}

/// Unpenalized fit of every row. The covariance starts from unit noise with
/// no dependence and is re-estimated `covariance_cycles` times, each followed
/// by a new mean solve. All rows are marked penalized in the returned mask.
pub fn fit_unpenalized(
    dataset: &LongitudinalDataset,
    grid: &TimeGrid,
    kernel: &KernelConfig,
    family: CovarianceFamily,
    covariance_cycles: usize,
) -> Result<FitResult> {
    let problem = Problem::new(dataset, grid, kernel)?;
    let p = dataset.n_covariates();
    problem.fit_free_rows(&vec![true; p], &VarianceParams::initial(family), covariance_cycles, vec![true; p])
}

/// Penalized fit. `init` warm-starts the coefficients; without it penalized
/// rows start at zero and unpenalized rows at their unpenalized solution.
pub fn fit_penalized(
    dataset: &LongitudinalDataset,
    grid: &TimeGrid,
    cfg: &FitConfig,
    init: Option<&DMatrix<f64>>,
) -> Result<FitResult> {
    Problem::new(dataset, grid, &cfg.kernel)?.fit_penalized(cfg, init)
}
