//! Working covariance families and the Gaussian quasi-likelihood in the
//! variance parameters.
//!
//! The marginal covariance of subject `i` is `V_i = sigma2 * (K(t_i) + I)`
//! where `K` is the unscaled covariance of the random process:
//!
//! * independent: `K = 0`
//! * compound symmetry: `K[n, m] = ratio`
//! * AR(1): `K[n, m] = ratio * rho^|t_n - t_m|`
//!
//! `update_covariance` profiles `sigma2` out in closed form and searches the
//! remaining structure parameters on a log-scaled grid followed by
//! golden-section refinement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceFamily {
    Independent,
    CompoundSymmetry,
    Ar1,
}

impl std::str::FromStr for CovarianceFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" | "ind" => Ok(Self::Independent),
            "compound-symmetry" | "cs" => Ok(Self::CompoundSymmetry),
            "ar1" | "ar(1)" => Ok(Self::Ar1),
            other => invalid(format!("unknown covariance family '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub family: CovarianceFamily,
    pub sigma2: f64,
    /// Variance ratio of the random process to the noise; 0 for independent.
    pub ratio: f64,
    /// Long-range dependence; used by AR(1) only.
    pub rho: f64,
}

impl VarianceParams {
    pub fn independent(sigma2: f64) -> Result<Self> {
        Self::new(CovarianceFamily::Independent, sigma2, 0.0, 0.0)
    }

    pub fn compound_symmetry(sigma2: f64, ratio: f64) -> Result<Self> {
        Self::new(CovarianceFamily::CompoundSymmetry, sigma2, ratio, 0.0)
    }

    pub fn ar1(sigma2: f64, ratio: f64, rho: f64) -> Result<Self> {
        Self::new(CovarianceFamily::Ar1, sigma2, ratio, rho)
    }

    pub fn new(family: CovarianceFamily, sigma2: f64, ratio: f64, rho: f64) -> Result<Self> {
        let p = Self {
            family,
            sigma2,
            ratio,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit noise variance, no dependence.
    pub fn initial(family: CovarianceFamily) -> Self {
        Self {
            family,
            sigma2: 1.0,
            ratio: 0.0,
            rho: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return invalid(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.ratio.is_finite() && self.ratio >= 0.0) {
            return invalid(format!("variance ratio must be nonnegative, got {}", self.ratio));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return invalid(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.family == CovarianceFamily::Independent && self.ratio != 0.0 {
            return invalid("independent family cannot carry a variance ratio");
        }
        Ok(())
    }

    fn with_structure(self, ratio: f64, rho: f64) -> Self {
        Self { ratio, rho, ..self }
    }
}

/// Unscaled `W = K + I` for one subject.
fn working_correlation(times: &[f64], params: &VarianceParams) -> DMatrix<f64> {
    let n = times.len();
    match params.family {
        CovarianceFamily::Independent => DMatrix::identity(n, n),
        CovarianceFamily::CompoundSymmetry => {
            DMatrix::from_fn(n, n, |a, b| params.ratio + if a == b { 1.0 } else { 0.0 })
        }
        CovarianceFamily::Ar1 => DMatrix::from_fn(n, n, |a, b| {
            let lag = (times[a] - times[b]).abs();
            params.ratio * params.rho.powf(lag) + if a == b { 1.0 } else { 0.0 }
        }),
    }
}

pub fn covariance_matrix(times: &[f64], params: &VarianceParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    if times.iter().any(|t| !t.is_finite()) {
        return invalid("non-finite observation time");
    }
    Ok(working_correlation(times, params) * params.sigma2)
}

/// `V^-1 rhs` by dense Cholesky.
pub fn solve_precision(v: &DMatrix<f64>, rhs: &DMatrix<f64>, subject: usize) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(v.clone()).ok_or(Error::NotPositiveDefinite { subject })?;
    Ok(chol.solve(rhs))
}

/// Factorized precision `V_i^-1` of one subject.
#[derive(Debug, Clone)]
pub(crate) enum Precision {
    Scaled { inv_sigma2: f64 },
    /// Sherman-Morrison form of `(I + r J)^-1 / sigma2`.
    CompoundSymmetry { inv_sigma2: f64, shrink: f64 },
    Dense { inv_sigma2: f64, chol: Cholesky<f64, Dyn> },
}

impl Precision {
    pub(crate) fn new(times: &[f64], params: &VarianceParams, subject: usize) -> Result<Self> {
        let inv_sigma2 = 1.0 / params.sigma2;
        Ok(match params.family {
            CovarianceFamily::Independent => Precision::Scaled { inv_sigma2 },
            CovarianceFamily::CompoundSymmetry => {
                let r = params.ratio;
                Precision::CompoundSymmetry {
                    inv_sigma2,
                    shrink: r / (1.0 + times.len() as f64 * r),
                }
            }
            CovarianceFamily::Ar1 => {
                let w = working_correlation(times, params);
                let chol = Cholesky::new(w).ok_or(Error::NotPositiveDefinite { subject })?;
                Precision::Dense { inv_sigma2, chol }
            }
        })
    }

    pub(crate) fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Precision::Scaled { inv_sigma2 } => v * *inv_sigma2,
            Precision::CompoundSymmetry { inv_sigma2, shrink } => {
                let total = v.sum();
                v.map(|x| (x - shrink * total) * inv_sigma2)
            }
            Precision::Dense { inv_sigma2, chol } => chol.solve(v) * *inv_sigma2,
        }
    }

    pub(crate) fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Precision::Scaled { inv_sigma2 } => m * *inv_sigma2,
            Precision::CompoundSymmetry { inv_sigma2, shrink } => {
                let mut out = m.clone();
                for mut col in out.column_iter_mut() {
                    let total = col.sum();
                    col.apply(|x| *x = (*x - shrink * total) * inv_sigma2);
                }
                out
            }
            Precision::Dense { inv_sigma2, chol } => chol.solve(m) * *inv_sigma2,
        }
    }
}

/// `log det W` and `r' W^-1 r` for one subject, where `V = sigma2 * W`.
fn structure_terms(times: &[f64], r: &DVector<f64>, params: &VarianceParams, subject: usize) -> Result<(f64, f64)> {
    let n = times.len() as f64;
    match params.family {
        CovarianceFamily::Independent => Ok((0.0, r.norm_squared())),
        CovarianceFamily::CompoundSymmetry => {
            let k = params.ratio;
            let s = r.sum();
            Ok(((1.0 + n * k).ln(), r.norm_squared() - k / (1.0 + n * k) * s * s))
        }
        CovarianceFamily::Ar1 => {
            let chol = Cholesky::new(working_correlation(times, params))
                .ok_or(Error::NotPositiveDefinite { subject })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad = r.dot(&chol.solve(r));
            Ok((log_det, quad))
        }
    }
}

fn check_inputs(residuals: &[DVector<f64>], times: &[&[f64]]) -> Result<()> {
    if residuals.len() != times.len() {
        return invalid("residual and time lists differ in length");
    }
    for (i, (r, t)) in residuals.iter().zip(times).enumerate() {
        if r.len() != t.len() {
            return invalid(format!("subject {i}: residual and time lengths differ"));
        }
    }
    Ok(())
}

/// `l(tau) = -1/2 sum_i [log det(2 pi V_i) + r_i' V_i^-1 r_i]`.
pub fn quasi_loglik(residuals: &[DVector<f64>], times: &[&[f64]], params: &VarianceParams) -> Result<f64> {
    params.validate()?;
    check_inputs(residuals, times)?;
    let mut total = 0.0;
    for (i, (r, t)) in residuals.iter().zip(times).enumerate() {
        let (log_det_w, quad_w) = structure_terms(t, r, params, i)?;
        let n = t.len() as f64;
        total += n * (2.0 * std::f64::consts::PI * params.sigma2).ln() + log_det_w + quad_w / params.sigma2;
    }
    Ok(-0.5 * total)
}

/// Per-subject summaries reused across profile evaluations.
enum ProfileData<'a> {
    /// `(N_i, sum r^2, (sum r)^2)` per subject.
    Moments(Vec<(f64, f64, f64)>),
    Dense {
        residuals: &'a [DVector<f64>],
        times: &'a [&'a [f64]],
    },
}

struct Profile<'a> {
    family: CovarianceFamily,
    n_total: f64,
    data: ProfileData<'a>,
}

impl<'a> Profile<'a> {
    fn new(residuals: &'a [DVector<f64>], times: &'a [&'a [f64]], family: CovarianceFamily) -> Self {
        let n_total = residuals.iter().map(|r| r.len() as f64).sum();
        let data = match family {
            CovarianceFamily::Ar1 => ProfileData::Dense { residuals, times },
            _ => ProfileData::Moments(
                residuals
                    .iter()
                    .map(|r| (r.len() as f64, r.norm_squared(), r.sum().powi(2)))
                    .collect(),
            ),
        };
        Self {
            family,
            n_total,
            data,
        }
    }

    /// Returns `(profiled loglik, sigma2_hat)` at fixed structure parameters.
    fn eval(&self, ratio: f64, rho: f64) -> Result<(f64, f64)> {
        let (mut quad, mut log_det) = (0.0, 0.0);
        match &self.data {
            ProfileData::Moments(m) => {
                for &(n, ss, s2) in m {
                    if self.family == CovarianceFamily::CompoundSymmetry {
                        log_det += (1.0 + n * ratio).ln();
                        quad += ss - ratio / (1.0 + n * ratio) * s2;
                    } else {
                        quad += ss;
                    }
                }
            }
            ProfileData::Dense { residuals, times } => {
                let params = VarianceParams {
                    family: self.family,
                    sigma2: 1.0,
                    ratio,
                    rho,
                };
                for (i, (r, t)) in residuals.iter().zip(times.iter()).enumerate() {
                    let (ld, q) = structure_terms(t, r, &params, i)?;
                    log_det += ld;
                    quad += q;
                }
            }
        }
        let sigma2 = quad / self.n_total;
        let ll = -0.5 * (self.n_total * (2.0 * std::f64::consts::PI * sigma2).ln() + log_det + self.n_total);
        Ok((ll, sigma2))
    }
}

const RATIO_MAX_LOG10: f64 = 3.0;
const RATIO_MIN_LOG10: f64 = -4.0;

/// Maximizes `f` over `[a, b]` by golden-section search.
fn golden_max(mut a: f64, mut b: f64, tol: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

fn log_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + step * k as f64).collect()
}

/// Maximizes the quasi-likelihood over the family's parameters with the
/// residuals held fixed. Never returns parameters with a lower
/// quasi-likelihood than `current`.
pub fn update_covariance(
    residuals: &[DVector<f64>],
    times: &[&[f64]],
    family: CovarianceFamily,
    current: &VarianceParams,
) -> Result<VarianceParams> {
    check_inputs(residuals, times)?;
    if residuals.is_empty() {
        return invalid("no subjects");
    }
    if residuals.iter().all(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(Error::DegenerateCovariance("all residuals are zero".into()));
    }
    if family != CovarianceFamily::Independent && residuals.iter().all(|r| r.len() < 2) {
        return Err(Error::DegenerateCovariance(
            "no subject has repeated measures; the variance ratio is not identifiable".into(),
        ));
    }
    let profile = Profile::new(residuals, times, family);
    let base = VarianceParams::initial(family);
    let start = if current.family == family { (current.ratio, current.rho) } else { (0.0, 0.0) };

    let (ratio, rho) = match family {
        CovarianceFamily::Independent => (0.0, 0.0),
        CovarianceFamily::CompoundSymmetry => search_cs(&profile, start.0)?,
        CovarianceFamily::Ar1 => search_ar1(&profile, start)?,
    };
    let (ll_new, sigma2_new) = profile.eval(ratio, rho)?;
    let candidate = base.with_structure(ratio, rho);
    let candidate = VarianceParams { sigma2: sigma2_new, ..candidate };

    // Monotone-improvement guard against the caller's parameters.
    if current.family == family && current.validate().is_ok() {
        let ll_current = quasi_loglik(residuals, times, current)?;
        if ll_current > ll_new {
            let (ll_prof, s2) = profile.eval(current.ratio, current.rho)?;
            return Ok(if ll_prof >= ll_current { VarianceParams { sigma2: s2, ..*current } } else { *current });
        }
    }
    Ok(candidate)
}

fn ratio_of(u: f64) -> f64 {
    10f64.powf(u)
}

fn search_cs(profile: &Profile<'_>, start: f64) -> Result<(f64, f64)> {
    let grid = log_grid(RATIO_MIN_LOG10, RATIO_MAX_LOG10, 0.125);
    let mut best = (0.0, profile.eval(0.0, 0.0)?.0);
    let mut best_idx: Option<usize> = None;
    for (k, &u) in grid.iter().enumerate() {
        let ll = profile.eval(ratio_of(u), 0.0)?.0;
        if ll > best.1 {
            best = (ratio_of(u), ll);
            best_idx = Some(k);
        }
    }
    if start > 0.0 && start <= ratio_of(RATIO_MAX_LOG10) {
        let ll = profile.eval(start, 0.0)?.0;
        if ll > best.1 {
            best = (start, ll);
        }
    }
    let refined = match best_idx {
        Some(k) => {
            let lo = grid[k.saturating_sub(1)];
            let hi = grid[(k + 1).min(grid.len() - 1)];
            let (u, ll) = golden_max(lo, hi, 1e-9, |u| Ok(profile.eval(ratio_of(u), 0.0)?.0))?;
            (ratio_of(u), ll)
        }
        None => golden_max(0.0, ratio_of(grid[0]), 1e-12, |r| Ok(profile.eval(r, 0.0)?.0))?,
    };
    if refined.1 > best.1 {
        best = refined;
    }
    Ok((best.0, 0.0))
}

/// AR(1) decay is searched as `rho = exp(-psi)` with `psi` log-spaced.
fn search_ar1(profile: &Profile<'_>, start: (f64, f64)) -> Result<(f64, f64)> {
    let u_grid = log_grid(RATIO_MIN_LOG10, RATIO_MAX_LOG10, 0.25);
    let w_grid = log_grid(-3.0, 3.0, 0.25);
    let rho_of = |w: f64| (-(10f64.powf(w))).exp();
    let eval = |u: f64, w: f64| -> Result<f64> { Ok(profile.eval(ratio_of(u), rho_of(w))?.0) };

    let mut best = (0.0, 0.0, profile.eval(0.0, 0.0)?.0);
    let mut best_uw: Option<(f64, f64)> = None;
    for &u in &u_grid {
        for &w in &w_grid {
            let ll = eval(u, w)?;
            if ll > best.2 {
                best = (ratio_of(u), rho_of(w), ll);
                best_uw = Some((u, w));
            }
        }
    }
    if let Some((mut u, mut w)) = best_uw {
        let (mut du, mut dw) = (0.25, 0.25);
        for _ in 0..4 {
            let (nu, _) = golden_max(
                (u - du).max(RATIO_MIN_LOG10 - 1.0),
                (u + du).min(RATIO_MAX_LOG10),
                1e-8,
                |x| eval(x, w),
            )?;
            u = nu;
            let (nw, _) = golden_max((w - dw).max(-3.0), w + dw, 1e-8, |x| eval(u, x))?;
            w = nw;
            du *= 0.5;
            dw *= 0.5;
        }
        let ll = eval(u, w)?;
        if ll > best.2 {
            best = (ratio_of(u), rho_of(w), ll);
        }
    }
    let (r0, p0) = start;
    if r0 > 0.0 && (0.0..1.0).contains(&p0) {
        let ll = profile.eval(r0, p0)?.0;
        if ll > best.2 {
            best = (r0, p0, ll);
        }
    }
    Ok((best.0, best.1))
}
