//! Local search over integer codes and group scales of a uniform checkpoint.

use half::f16;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantGrid, QuantizedMatrix, Scheme};
use crate::tensor::{gram, weighted_sq_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointqOptions {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_passes")]
    pub max_passes: usize,
    #[serde(default = "default_radius")]
    pub move_radius: i32,
}

fn default_lambda() -> f64 {
    0.2
}
fn default_passes() -> usize {
    8
}
fn default_radius() -> i32 {
    2
}

impl Default for JointqOptions {
    fn default() -> Self {
        Self { lambda: default_lambda(), max_passes: default_passes(), move_radius: default_radius() }
    }
}

impl JointqOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("proximity weight {} must be finite and non-negative", self.lambda)));
        }
        if self.move_radius < 1 {
            return Err(Error::Config("move radius must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointqReport {
    /// Objective at the start and after every accepted move.
    pub trace: Vec<f64>,
    pub accepted: usize,
    pub passes: usize,
}

/// `XᵀX + nλI` for `n` calibration rows.
pub fn regularized_gram(x: &Matrix, lambda: f64) -> DMatrix<f64> {
    let mut h = gram(x);
    let shift = x.rows() as f64 * lambda;
    for i in 0..h.nrows() {
        h[(i, i)] += shift;
    }
    h
}

/// `‖XW − XŴ‖² + nλ‖W − Ŵ‖²`.
pub fn jointq_objective(q: &QuantizedMatrix, w: &Matrix, x: &Matrix, lambda: f64) -> Result<f64> {
    if q.shape() != w.shape() || x.cols() != w.rows() {
        return Err(Error::shape("objective operands disagree in shape"));
    }
    let e = q.dequantize().to_f64() - w.to_f64();
    let xe = x.to_f64() * &e;
    Ok(xe.norm_squared() + x.rows() as f64 * lambda * e.norm_squared())
}

fn f16_scale(s: f64) -> f32 {
    let v = f16::from_f64(s.abs()).to_f32();
    v.clamp(f16::MIN_POSITIVE.to_f32(), f16::MAX.to_f32())
}

struct Search<'a> {
    h: &'a DMatrix<f64>,
    w: DMatrix<f64>,
    e: DMatrix<f64>,
    he: DMatrix<f64>,
    cols: usize,
}

impl Search<'_> {
    /// Exact least-squares scale of row `i`'s segment for centred codes `c`,
    /// other entries fixed.
    fn best_scale(&self, i: usize, start: usize, c: &[f64]) -> f64 {
        let hii = self.h[(i, i)];
        let (mut num, mut den) = (0.0, 0.0);
        for (k, &cj) in c.iter().enumerate() {
            let j = start + k;
            let r = self.he[(i, j)] - hii * self.e[(i, j)];
            num += cj * (hii * self.w[(i, j)] - r);
            den += cj * cj;
        }
        if den == 0.0 || hii <= 0.0 {
            return 0.0;
        }
        num / (hii * den)
    }

    /// Objective change of replacing row `i`'s segment values by `new`.
    fn delta(&self, i: usize, start: usize, new: &[f64]) -> f64 {
        let hii = self.h[(i, i)];
        new.iter()
            .enumerate()
            .map(|(k, &v)| {
                let j = start + k;
                let d = v - self.w[(i, j)] - self.e[(i, j)];
                2.0 * d * self.he[(i, j)] + d * d * hii
            })
            .sum()
    }

    fn apply(&mut self, i: usize, start: usize, new: &[f64]) {
        let n = self.h.nrows();
        for (k, &v) in new.iter().enumerate() {
            let j = start + k;
            let d = v - self.w[(i, j)] - self.e[(i, j)];
            if d == 0.0 {
                continue;
            }
            self.e[(i, j)] += d;
            for p in 0..n {
                self.he[(p, j)] += self.h[(p, i)] * d;
            }
        }
    }

    fn objective(&self) -> f64 {
        debug_assert_eq!(self.e.ncols(), self.cols);
        weighted_sq_norm(&self.e, self.h)
    }
}

/// Refines codes and scales against `H = XᵀX + nλI`.
pub fn jointq_refine(q0: &QuantizedMatrix, w: &Matrix, x: &Matrix, opts: &JointqOptions) -> Result<(QuantizedMatrix, JointqReport)> {
    opts.validate()?;
    if x.cols() != w.rows() {
        return Err(Error::shape(format!("calibration inputs have {} columns, weight has {} rows", x.cols(), w.rows())));
    }
    let h = regularized_gram(x, opts.lambda);
    jointq_refine_gram(q0, w, &h, opts)
}

/// As [`jointq_refine`], from a precomputed regularized Gram.
pub fn jointq_refine_gram(q0: &QuantizedMatrix, w: &Matrix, h: &DMatrix<f64>, opts: &JointqOptions) -> Result<(QuantizedMatrix, JointqReport)> {
    opts.validate()?;
    let (n, m) = q0.shape();
    if w.shape() != (n, m) || h.nrows() != n || h.ncols() != n {
        return Err(Error::shape("checkpoint, weight and Gram disagree in shape"));
    }
    let cfg = *q0.config();
    if cfg.granularity == Granularity::PerTensor {
        return Err(Error::Config("joint refinement needs per-channel or per-group scales".into()));
    }
    let mut q = q0.clone();
    let wd = w.to_f64();
    let e = q.dequantize().to_f64() - &wd;
    let he = h * &e;
    let mut st = Search { h, w: wd, e, he, cols: m };
    let mut j = st.objective();
    let mut trace = vec![j];
    let mut accepted = 0;
    let mut passes = 0;
    let segments = cfg.row_segments(m);
    let gpr = segments.len();
    let asym = cfg.scheme == Scheme::Asymmetric;
    let mut deltas = Vec::new();
    for r in 1..=opts.move_radius {
        deltas.push(-r);
        deltas.push(r);
    }

    for _ in 0..opts.max_passes {
        passes += 1;
        let mut moved = false;
        for i in 0..n {
            for (g, &(s, e_end)) in segments.iter().enumerate() {
                let gi = i * gpr + g;
                let len = e_end - s;
                // Scale-only refit against the other groups' current state.
                {
                    let grid = q.grids()[gi];
                    let codes: Vec<i32> = q.codes()[i * m + s..i * m + e_end].to_vec();
                    if let Some((dj, grid2, vals)) = evaluate(&st, i, s, &codes, grid.zero_point, &grid, j) {
                        st.apply(i, s, &vals);
                        q.grids_mut()[gi] = grid2;
                        j += dj;
                        trace.push(j);
                        accepted += 1;
                        moved = true;
                    }
                }
                for jj in s..e_end {
                    for &d in &deltas {
                        let grid = q.grids()[gi];
                        let code = q.codes()[i * m + jj] + d;
                        if code < grid.q_min || code > grid.q_max {
                            continue;
                        }
                        let mut codes: Vec<i32> = q.codes()[i * m + s..i * m + e_end].to_vec();
                        codes[jj - s] = code;
                        if let Some((dj, grid2, vals)) = evaluate(&st, i, s, &codes, grid.zero_point, &grid, j) {
                            st.apply(i, s, &vals);
                            q.codes_mut()[i * m + jj] = code;
                            q.grids_mut()[gi] = grid2;
                            j += dj;
                            trace.push(j);
                            accepted += 1;
                            moved = true;
                        }
                    }
                }
                if asym {
                    for dz in [-1, 1] {
                        let grid = q.grids()[gi];
                        let z = grid.zero_point + dz;
                        if z < grid.q_min || z > grid.q_max {
                            continue;
                        }
                        let codes: Vec<i32> = q.codes()[i * m + s..i * m + s + len].to_vec();
                        if let Some((dj, grid2, vals)) = evaluate(&st, i, s, &codes, z, &grid, j) {
                            st.apply(i, s, &vals);
                            q.grids_mut()[gi] = grid2;
                            j += dj;
                            trace.push(j);
                            accepted += 1;
                            moved = true;
                        }
                    }
                }
            }
        }
        // Re-anchor against drift in the incremental updates.
        st.he = h * &st.e;
        j = st.objective();
        if let Some(last) = trace.last_mut() {
            *last = last.min(j);
        }
        if !moved {
            break;
        }
    }
    Ok((q, JointqReport { trace, accepted, passes }))
}

/// Scores a proposal with its refit scale; returns the accepted change.
fn evaluate(st: &Search, i: usize, start: usize, codes: &[i32], z: i32, grid: &QuantGrid, j: f64) -> Option<(f64, QuantGrid, Vec<f64>)> {
    let c: Vec<f64> = codes.iter().map(|&q| (q - z) as f64).collect();
    let s = st.best_scale(i, start, &c);
    if !(s > 0.0) {
        return None;
    }
    let scale = f16_scale(s);
    let g2 = QuantGrid { scale, zero_point: z, ..*grid };
    let vals: Vec<f64> = codes.iter().map(|&q| g2.decode(q) as f64).collect();
    let dj = st.delta(i, start, &vals);
    (dj < -1e-12 * j.abs().max(f64::MIN_POSITIVE)).then_some((dj, g2, vals))
}
