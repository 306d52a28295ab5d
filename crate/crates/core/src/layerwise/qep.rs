use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::CalibStats;
use crate::tensor::{cholesky_solve, mean_diag, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QepOptions {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    0.01
}

impl Default for QepOptions {
    fn default() -> Self {
        Self { alpha: default_alpha(), eta: default_eta() }
    }
}

impl QepOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("propagation strength {} outside [0, 1]", self.alpha)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("regularization η = {} must be positive", self.eta)));
        }
        Ok(())
    }
}

/// Tikhonov strength `λ = η·mean(diag Ĥ)`.
pub fn qep_lambda(gram: &DMatrix<f64>, eta: f64) -> f64 {
    let md = mean_diag(gram);
    eta * if md > 0.0 { md } else { 1.0 }
}

/// `(Ĥ + λI)⁻¹·C·W` in double precision.
pub fn qep_correction(w: &DMatrix<f64>, stats: &CalibStats, eta: f64) -> Result<DMatrix<f64>> {
    if stats.dim() != w.nrows() {
        return Err(Error::shape(format!(
            "stats track {} inputs, weight has {} rows",
            stats.dim(),
            w.nrows()
        )));
    }
    let lambda = qep_lambda(&stats.gram, eta);
    cholesky_solve(&stats.gram, lambda, &(&stats.cross * w))
}

/// Error-propagation corrected target `W* = (I + α(Ĥ+λI)⁻¹C)·W`.
pub fn qep_target(w: &Matrix, stats: &CalibStats, opts: &QepOptions) -> Result<Matrix> {
    opts.validate()?;
    if opts.alpha == 0.0 || !stats.has_error() {
        if stats.dim() != w.rows() {
            return Err(Error::shape("stats dimension differs from the weight's input rows"));
        }
        return Ok(w.clone());
    }
    let wd = w.to_f64();
    let z = qep_correction(&wd, stats, opts.eta)?;
    Ok(Matrix::from_f64(&(wd + z * opts.alpha)))
}
