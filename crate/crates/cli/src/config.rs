use std::path::{Path, PathBuf};

use lsvcmm::covariance::CovarianceFamily;
use lsvcmm::estimator::{DEFAULT_COVARIANCE_CYCLES, DEFAULT_MAX_ITER, DEFAULT_TOL};
use lsvcmm::inference::{BandMethod, DEFAULT_LEVEL, DEFAULT_N_BOOT};
use lsvcmm::io::{ClrOptions, ColumnRoles, INTERCEPT};
use lsvcmm::penalty::{DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_WEIGHT_CAP};
use lsvcmm::selection::{
    PathConfig, SelectedModel, DEFAULT_EBIC_GAMMA, DEFAULT_LAMBDA_MIN_RATIO, DEFAULT_N_H, DEFAULT_N_LAMBDA,
};
use lsvcmm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub columns: ColumnRoles,
    /// Design columns left out of the penalty. `None` means just the
    /// intercept when there is one.
    pub unpenalized: Option<Vec<String>>,
    pub clr: Option<ClrOptions>,
    /// Coefficient grid; defaults to the distinct observed times.
    pub grid: Option<Vec<f64>>,
    pub h_grid: Option<Vec<f64>>,
    pub n_h: usize,
    pub family: CovarianceFamily,
    pub alpha: f64,
    pub gamma: f64,
    pub weight_cap: f64,
    pub ebic_gamma: f64,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub covariance_cycles: usize,
    pub warm_start: bool,
    pub n_boot: usize,
    pub level: f64,
    pub band_method: BandMethod,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            columns: ColumnRoles { add_intercept: true, ..ColumnRoles::default() },
            unpenalized: None,
            clr: None,
            grid: None,
            h_grid: None,
            n_h: DEFAULT_N_H,
            family: CovarianceFamily::CompoundSymmetry,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            weight_cap: DEFAULT_WEIGHT_CAP,
            ebic_gamma: DEFAULT_EBIC_GAMMA,
            n_lambda: DEFAULT_N_LAMBDA,
            lambda_min_ratio: DEFAULT_LAMBDA_MIN_RATIO,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            covariance_cycles: DEFAULT_COVARIANCE_CYCLES,
            warm_start: true,
            n_boot: DEFAULT_N_BOOT,
            level: DEFAULT_LEVEL,
            band_method: BandMethod::SupT,
            output_dir: PathBuf::from("."),
            seed: None,
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl RunConfig {
    pub fn mask(&self) -> Result<Vec<bool>> {
        let names = self.columns.design_names();
        let free = match &self.unpenalized {
            Some(list) => {
                for c in list {
                    if !names.contains(c) {
                        return Err(Error::InvalidInput(format!("unknown column '{c}' in unpenalized list")));
                    }
                }
                list.clone()
            }
            None => vec![INTERCEPT.to_string()],
        };
        Ok(names.iter().map(|n| !free.contains(n)).collect())
    }

    pub fn path_config(&self) -> Result<PathConfig> {
        let mut cfg = PathConfig::new(self.family, self.mask()?);
        cfg.alpha = self.alpha;
        cfg.gamma = self.gamma;
        cfg.weight_cap = self.weight_cap;
        cfg.ebic_gamma = self.ebic_gamma;
        cfg.n_lambda = self.n_lambda;
        cfg.lambda_min_ratio = self.lambda_min_ratio;
        cfg.max_iter = self.max_iter;
        cfg.tol = self.tol;
        cfg.covariance_cycles = self.covariance_cycles;
        cfg.warm_start = self.warm_start;
        Ok(cfg)
    }
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub seed: u64,
    pub config: RunConfig,
    pub lambda_max: Vec<f64>,
    pub model: SelectedModel,
}

/// Sidecar written next to bootstrap, simulate and bench outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<T> {
    pub seed: u64,
    #[serde(flatten)]
    pub details: T,
}
