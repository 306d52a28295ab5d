use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fit_grids, fit_row_grids, quantize_matrix, Granularity, QuantConfig, QuantGrid, QuantizedMatrix, ScaleMode};
use crate::tensor::{mean_diag, weighted_sq_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptqOptions {
    #[serde(default)]
    pub actorder: bool,
    #[serde(default = "default_percdamp")]
    pub percdamp: f64,
    #[serde(default = "default_block")]
    pub block_cols: usize,
    #[serde(default)]
    pub scale_mode: ScaleMode,
}

fn default_percdamp() -> f64 {
    0.01
}

fn default_block() -> usize {
    32
}

impl Default for GptqOptions {
    fn default() -> Self {
        Self { actorder: false, percdamp: default_percdamp(), block_cols: default_block(), scale_mode: ScaleMode::Minmax }
    }
}

impl GptqOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.percdamp > 0.0 && self.percdamp <= 1.0) {
            return Err(Error::Config(format!("percdamp {} outside (0, 1]", self.percdamp)));
        }
        if self.block_cols == 0 {
            return Err(Error::Config("GPTQ block size must be positive".into()));
        }
        Ok(())
    }
}

/// `‖X(Ŵ − W)‖_F²` expressed through `H = XᵀX`.
pub fn hessian_objective(w: &Matrix, w_hat: &Matrix, h: &DMatrix<f64>) -> f64 {
    weighted_sq_norm(&(w_hat.to_f64() - w.to_f64()), h)
}

pub fn rtn_quantize(w: &Matrix, cfg: &QuantConfig, mode: ScaleMode) -> Result<QuantizedMatrix> {
    quantize_matrix(w, cfg, mode)
}

/// Processing order of the input rows: natural, or by descending
/// Hessian diagonal (stable for ties).
pub fn processing_order(h: &DMatrix<f64>, actorder: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    if actorder {
        order.sort_by(|&a, &b| h[(b, b)].total_cmp(&h[(a, a)]));
    }
    order
}

fn rounding_error(row: &[f32], grids: &[QuantGrid], segments: &[(usize, usize)]) -> f64 {
    segments
        .iter()
        .zip(grids)
        .map(|(&(s, e), g)| row[s..e].iter().map(|&v| (v as f64 - g.decode(g.code(v)) as f64).powi(2)).sum::<f64>())
        .sum()
}

/// Grids for the compensated row: fitted to it, or to the original row when
/// those round it more closely.
fn row_grids_for(row: &[f32], original: &[f32], cfg: &QuantConfig, mode: ScaleMode, segments: &[(usize, usize)]) -> Result<Vec<QuantGrid>> {
    let fitted = fit_row_grids(row, cfg, mode)?;
    if row == original {
        return Ok(fitted);
    }
    let fixed = fit_row_grids(original, cfg, mode)?;
    Ok(if rounding_error(row, &fixed, segments) < rounding_error(row, &fitted, segments) { fixed } else { fitted })
}

/// Sequential quantization of the input rows of `W` with inverse-Hessian
/// error compensation on the rows not yet processed.
pub fn gptq_quantize(w: &Matrix, h: &DMatrix<f64>, cfg: &QuantConfig, opts: &GptqOptions) -> Result<QuantizedMatrix> {
    cfg.validate()?;
    opts.validate()?;
    let (n, m) = w.shape();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::shape(format!("Hessian is {}x{}, weight has {n} input rows", h.nrows(), h.ncols())));
    }
    let md = mean_diag(h);
    let damp = opts.percdamp * if md > 0.0 { md } else { 1.0 };
    let order = processing_order(h, opts.actorder);
    let hp = DMatrix::from_fn(n, n, |a, b| h[(order[a], order[b])] + if a == b { damp } else { 0.0 });
    let chol = hp.cholesky().ok_or_else(|| Error::numerical("damped Hessian is not positive definite"))?;
    let hinv = chol.inverse();
    // Upper factor U with H⁻¹ = UᵀU.
    let u = hinv
        .cholesky()
        .ok_or_else(|| Error::numerical("inverse Hessian is not positive definite"))?
        .l()
        .transpose();

    let mut work = DMatrix::from_fn(n, m, |p, j| w.get(order[p], j) as f64);
    let per_tensor = cfg.granularity == Granularity::PerTensor;
    let tensor_grid = if per_tensor { fit_grids(w, cfg, opts.scale_mode)? } else { Vec::new() };
    let segments = cfg.row_segments(m);
    let mut row_grids: Vec<Vec<QuantGrid>> = vec![Vec::new(); n];
    let mut codes = vec![0i32; n * m];

    let bs = opts.block_cols;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let mut errs = DMatrix::<f64>::zeros(end - start, m);
        for p in start..end {
            let row: Vec<f32> = work.row(p).iter().map(|&v| v as f32).collect();
            let grids = if per_tensor { tensor_grid.clone() } else { row_grids_for(&row, w.row(order[p]), cfg, opts.scale_mode, &segments)? };
            let d = u[(p, p)];
            for (g, &(s, e)) in segments.iter().enumerate() {
                let grid = if per_tensor { &grids[0] } else { &grids[g] };
                for j in s..e {
                    let c = grid.code(row[j]);
                    codes[order[p] * m + j] = c;
                    errs[(p - start, j)] = (work[(p, j)] - grid.decode(c) as f64) / d;
                }
            }
            for pp in p + 1..end {
                let f = u[(p, pp)];
                if f != 0.0 {
                    for j in 0..m {
                        work[(pp, j)] -= errs[(p - start, j)] * f;
                    }
                }
            }
            row_grids[order[p]] = grids;
        }
        if end < n {
            let upd = u.view((start, end), (end - start, n - end)).transpose() * &errs;
            for pp in end..n {
                for j in 0..m {
                    work[(pp, j)] -= upd[(pp - end, j)];
                }
            }
        }
        start = end;
    }
    let grids = if per_tensor { tensor_grid } else { row_grids.into_iter().flatten().collect() };
    QuantizedMatrix::from_parts(n, m, *cfg, codes, grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, Scheme};
    use crate::rng;
    use crate::tensor::gram;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(rows, cols, rng::gaussian_vec(&mut r, rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn scaled_identity_hessian_is_rtn() {
        let w = random(12, 9, 1);
        let h = DMatrix::identity(12, 12) * 3.5;
        for gran in [Granularity::PerChannel, Granularity::PerGroup(4), Granularity::PerTensor] {
            let cfg = QuantConfig::new(3, Scheme::Asymmetric, gran).unwrap();
            let g = gptq_quantize(&w, &h, &cfg, &GptqOptions { actorder: true, ..Default::default() }).unwrap();
            let r = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
            assert_eq!(g, r);
        }
    }

    #[test]
    fn actorder_sorts_by_diagonal() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 100.0]);
        assert_eq!(processing_order(&h, true), vec![1, 0]);
        assert_eq!(processing_order(&h, false), vec![0, 1]);
    }

    #[test]
    fn block_size_does_not_change_result() {
        let w = random(20, 6, 2);
        let h = gram(&random(60, 20, 3));
        let cfg = QuantConfig::symmetric(3, Granularity::PerChannel).unwrap();
        let a = gptq_quantize(&w, &h, &cfg, &GptqOptions { block_cols: 1, ..Default::default() }).unwrap();
        let b = gptq_quantize(&w, &h, &cfg, &GptqOptions { block_cols: 7, ..Default::default() }).unwrap();
        let c = gptq_quantize(&w, &h, &cfg, &GptqOptions { block_cols: 64, ..Default::default() }).unwrap();
        let (ea, eb, ec) = (
            hessian_objective(&w, &dequantize(&a), &h),
            hessian_objective(&w, &dequantize(&b), &h),
            hessian_objective(&w, &dequantize(&c), &h),
        );
        assert!((ea - eb).abs() <= 1e-6 * ea && (ea - ec).abs() <= 1e-6 * ea);
    }

    #[test]
    fn beats_rtn_on_correlated_inputs() {
        let mut wins = 0;
        for seed in 0..20 {
            let w = random(16, 8, 10 + seed);
            let base = random(64, 16, 50 + seed);
            let x = Matrix::from_fn(64, 16, |t, j| base.get(t, j) + 0.8 * base.get(t, 0));
            let h = gram(&x);
            let cfg = QuantConfig::symmetric(3, Granularity::PerChannel).unwrap();
            let g = gptq_quantize(&w, &h, &cfg, &GptqOptions::default()).unwrap();
            let r = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
            if hessian_objective(&w, &dequantize(&g), &h) <= hessian_objective(&w, &dequantize(&r), &h) {
                wins += 1;
            }
        }
        assert!(wins >= 19, "{wins}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = random(3, 2, 4);
        let cfg = QuantConfig::symmetric(4, Granularity::PerChannel).unwrap();
        assert!(gptq_quantize(&w, &DMatrix::identity(2, 2), &cfg, &GptqOptions::default()).is_err());
        let neg = DMatrix::identity(3, 3) * -1.0;
        assert!(matches!(
            gptq_quantize(&w, &neg, &cfg, &GptqOptions::default()),
            Err(Error::Numerical(_))
        ));
        let opts = GptqOptions { percdamp: 0.0, ..Default::default() };
        assert!(gptq_quantize(&w, &DMatrix::identity(3, 3), &cfg, &opts).is_err());
    }
}
