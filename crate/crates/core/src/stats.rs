//! Streaming second-order calibration statistics for one linear layer.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{cross_gram, gram, Matrix};

/// `gram = X̂ᵀX̂` and `cross = X̂ᵀ(X − X̂)` where `X̂` are the inputs seen by the
/// partially quantized model and `X` those of the full-precision one.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibStats {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub token_count: usize,
}

impl CalibStats {
    pub fn new(dim: usize) -> Self {
        Self { gram: DMatrix::zeros(dim, dim), cross: DMatrix::zeros(dim, dim), token_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn accumulate(&mut self, x_fp: &Matrix, x_pert: &Matrix) -> Result<()> {
        if x_fp.shape() != x_pert.shape() {
            return Err(Error::shape(format!(
                "full-precision inputs {:?} vs perturbed inputs {:?}",
                x_fp.shape(),
                x_pert.shape()
            )));
        }
        if x_pert.cols() != self.dim() {
            return Err(Error::shape(format!(
                "inputs have {} features, stats track {}",
                x_pert.cols(),
                self.dim()
            )));
        }
        self.gram += gram(x_pert);
        let delta = x_fp.sub(x_pert)?;
        self.cross += cross_gram(x_pert, &delta)?;
        self.token_count += x_pert.rows();
        Ok(())
    }

    /// Stats seen through an input-side change of basis `X ↦ X·P`.
    pub fn transformed(&self, p: &DMatrix<f64>) -> CalibStats {
        let pt = p.transpose();
        CalibStats {
            gram: &pt * &self.gram * p,
            cross: &pt * &self.cross * p,
            token_count: self.token_count,
        }
    }

    pub fn has_error(&self) -> bool {
        self.cross.iter().any(|&v| v != 0.0)
    }
}

pub fn accumulate_stats(mut stats: CalibStats, x_fp: &Matrix, x_pert: &Matrix) -> Result<CalibStats> {
    stats.accumulate(x_fp, x_pert)?;
    Ok(stats)
}
