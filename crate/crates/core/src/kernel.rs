//! Gaussian smoothing kernel `k_h(d) = k(d/h)/h` with hard truncation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::SubjectRecord;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub scale: f64,
    #[serde(default)]
    pub family: KernelFamily,
    /// Weights are exactly zero beyond `truncation_radius * scale`.
    pub truncation_radius: f64,
}

impl KernelConfig {
    pub const DEFAULT_TRUNCATION: f64 = 3.0;

    pub fn gaussian(scale: f64) -> Result<Self> {
        let cfg = Self {
            scale,
            family: KernelFamily::Gaussian,
            truncation_radius: Self::DEFAULT_TRUNCATION,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_truncation(mut self, radius: f64) -> Result<Self> {
        self.truncation_radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return invalid(format!("kernel scale must be positive, got {}", self.scale));
        }
        if !(self.truncation_radius >= 3.0) {
            return invalid(format!(
                "kernel truncation radius must be >= 3, got {}",
                self.truncation_radius
            ));
        }
        Ok(())
    }

    /// Weight for a time difference already known to be finite.
    #[inline]
    pub(crate) fn eval(&self, d: f64) -> f64 {
        let u = d / self.scale;
        if u.abs() > self.truncation_radius {
            return 0.0;
        }
        match self.family {
            KernelFamily::Gaussian => (-0.5 * u * u).exp() * INV_SQRT_2PI / self.scale,
        }
    }
}

pub fn kernel_weight(d: f64, cfg: &KernelConfig) -> Result<f64> {
    if !d.is_finite() {
        return invalid(format!("kernel evaluated at non-finite distance {d}"));
    }
    Ok(cfg.eval(d))
}

/// `[k_h(t - t_in)]_n` for one subject.
pub fn kernel_vector(t: f64, subject: &SubjectRecord, cfg: &KernelConfig) -> Result<DVector<f64>> {
    if !t.is_finite() {
        return invalid(format!("kernel evaluated at non-finite time {t}"));
    }
    Ok(DVector::from_iterator(
        subject.n_obs(),
        subject.times().iter().map(|&ti| cfg.eval(t - ti)),
    ))
}
