//! Function-preserving reparameterizations applied before quantization:
//! per-channel smoothing, orthogonal input rotations and Sinkhorn
//! row/column balancing.
//!
//! For a layer `y = x·W` the combined input-side map is
//! `P = diag(1/s)·R·diag(r)` and the stored base weight is
//! `W̃ = P⁻¹·W·diag(1/c)`, so that `x·W = (x·P)·W̃·diag(c)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calib::{collect_layer_inputs, CalibSet};
use crate::error::{Error, Result};
use crate::model::{Linear, ToyModel, WeightRepr};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScale {
    pub s: Vec<f32>,
    pub alpha: f64,
}

impl ChannelScale {
    /// `X·diag(s)⁻¹`.
    pub fn scale_activations(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |t, j| x.get(t, j) / self.s[j])
    }

    /// `diag(s)·W`.
    pub fn scale_weight(&self, w: &Matrix) -> Matrix {
        Matrix::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j) * self.s[i])
    }
}

fn col_absmax(x: &Matrix) -> Vec<f32> {
    let mut m = vec![0.0f32; x.cols()];
    for t in 0..x.rows() {
        for (a, &v) in m.iter_mut().zip(x.row(t)) {
            *a = a.max(v.abs());
        }
    }
    m
}

fn row_absmax(w: &Matrix) -> Vec<f32> {
    (0..w.rows()).map(|i| w.row(i).iter().fold(0.0f32, |a, v| a.max(v.abs()))).collect()
}

/// `s_j = max|X_{·j}|^α / max|W_{j·}|^{1−α}`; channels where either maximum
/// vanishes keep `s_j = 1`.
pub fn smooth_scale(x: &Matrix, w: &Matrix, alpha: f64) -> Result<ChannelScale> {
    if x.cols() != w.rows() {
        return Err(Error::shape(format!(
            "activations have {} channels, weight has {} rows",
            x.cols(),
            w.rows()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("smoothing strength {alpha} outside [0, 1]")));
    }
    let xm = col_absmax(x);
    let wm = row_absmax(w);
    let s = xm
        .iter()
        .zip(&wm)
        .map(|(&a, &b)| {
            if a == 0.0 || b == 0.0 {
                return 1.0;
            }
            let v = (a as f64).powf(alpha) / (b as f64).powf(1.0 - alpha);
            if v.is_finite() && v > 0.0 {
                v as f32
            } else {
                1.0
            }
        })
        .collect();
    Ok(ChannelScale { s, alpha })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    #[default]
    Identity,
    RandomOrthogonal,
    Hadamard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    pub kind: RotationKind,
    pub seed: u64,
    pub matrix: DMatrix<f64>,
}

pub const ORTHOGONALITY_TOL: f64 = 1e-6;

pub fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let n = r.nrows();
    let e = r * r.transpose() - DMatrix::<f64>::identity(n, n);
    e.amax()
}

impl Rotation {
    pub fn identity(n: usize) -> Self {
        Self { kind: RotationKind::Identity, seed: 0, matrix: DMatrix::identity(n, n) }
    }

    /// Q factor of a seeded Gaussian matrix with the diagonal of R made positive.
    pub fn random_orthogonal(n: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng::gaussian(&mut r));
        let qr = g.qr();
        let mut q = qr.q();
        let rr = qr.r();
        for j in 0..n {
            if rr[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Self { kind: RotationKind::RandomOrthogonal, seed, matrix: q }
    }

    /// Normalized Sylvester–Hadamard matrix; `n` must be a power of two.
    pub fn hadamard(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("Hadamard rotation needs a power-of-two size, got {n}")));
        }
        let norm = 1.0 / (n as f64).sqrt();
        let h = DMatrix::from_fn(n, n, |i, j| if (i & j).count_ones() % 2 == 0 { norm } else { -norm });
        Ok(Self { kind: RotationKind::Hadamard, seed: 0, matrix: h })
    }

    pub fn build(kind: RotationKind, n: usize, seed: u64) -> Result<Self> {
        match kind {
            RotationKind::Identity => Ok(Self::identity(n)),
            RotationKind::RandomOrthogonal => Ok(Self::random_orthogonal(n, seed)),
            RotationKind::Hadamard => Self::hadamard(n),
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape("rotation must be square"));
        }
        let err = orthogonality_error(&matrix);
        if err > ORTHOGONALITY_TOL {
            return Err(Error::invalid(format!("matrix is not orthogonal (max deviation {err:.3e})")));
        }
        Ok(Self { kind: RotationKind::RandomOrthogonal, seed: 0, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Rotate the input space: `W ↦ RᵀW`, activations `X ↦ XR`.
    Input,
    /// Rotate the output space: `W ↦ WR`; the consumer must undo with `Rᵀ`.
    Output,
}

pub fn apply_rotation(w: &Matrix, r: &Rotation, side: Side) -> Result<Matrix> {
    let err = orthogonality_error(&r.matrix);
    if err > ORTHOGONALITY_TOL {
        return Err(Error::invalid(format!("rotation is not orthogonal (max deviation {err:.3e})")));
    }
    let wd = w.to_f64();
    let out = match side {
        Side::Input => {
            if r.dim() != w.rows() {
                return Err(Error::shape("rotation size differs from the weight's input dimension"));
            }
            r.matrix.transpose() * wd
        }
        Side::Output => {
            if r.dim() != w.cols() {
                return Err(Error::shape("rotation size differs from the weight's output dimension"));
            }
            wd * &r.matrix
        }
    };
    Ok(Matrix::from_f64(&out))
}

/// The activation side of an input rotation: `X·R`.
pub fn rotate_activations(x: &Matrix, r: &Rotation) -> Result<Matrix> {
    if r.dim() != x.cols() {
        return Err(Error::shape("rotation size differs from the activation width"));
    }
    Ok(Matrix::from_f64(&(x.to_f64() * &r.matrix)))
}

/// `μ = max|W_ij|·√(NM)/‖W‖_F`.
pub fn incoherence(w: &Matrix) -> Result<f64> {
    let f = w.frobenius();
    if f == 0.0 {
        return Err(Error::invalid("incoherence of the zero matrix is undefined"));
    }
    Ok(w.max_abs() as f64 * ((w.rows() * w.cols()) as f64).sqrt() / f)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceNorm {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Balanced {
    pub w_bal: Matrix,
    pub row_scale: Vec<f32>,
    pub col_scale: Vec<f32>,
    pub iterations: usize,
    pub spread: f64,
    pub converged: bool,
}

fn vec_norm(v: impl Iterator<Item = f64>, norm: BalanceNorm) -> f64 {
    match norm {
        BalanceNorm::L1 => v.map(f64::abs).sum(),
        BalanceNorm::L2 => v.map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// `max/min − 1` over the nonzero norms.
fn spread(norms: &[f64]) -> f64 {
    let nz: Vec<f64> = norms.iter().copied().filter(|&v| v > 0.0).collect();
    if nz.is_empty() {
        return 0.0;
    }
    let max = nz.iter().cloned().fold(f64::MIN, f64::max);
    let min = nz.iter().cloned().fold(f64::MAX, f64::min);
    max / min - 1.0
}

/// Rescales so nonzero norms share their geometric mean; returns the factors
/// each entry was divided by (1 for zero lines).
fn normalize(norms: &[f64]) -> Vec<f64> {
    let nz: Vec<f64> = norms.iter().copied().filter(|&v| v > 0.0).collect();
    if nz.is_empty() {
        return vec![1.0; norms.len()];
    }
    let gm = (nz.iter().map(|v| v.ln()).sum::<f64>() / nz.len() as f64).exp();
    norms.iter().map(|&v| if v > 0.0 { v / gm } else { 1.0 }).collect()
}

/// Alternating row/column normalization that records the scales, reporting
/// convergence instead of failing.
pub fn sinkhorn_iterate(w: &Matrix, norm: BalanceNorm, iters: usize, tol: f64) -> Balanced {
    let (n, m) = w.shape();
    let mut b = w.to_f64();
    let mut row = vec![1.0f64; n];
    let mut col = vec![1.0f64; m];
    let measure = |b: &DMatrix<f64>| {
        let rn: Vec<f64> = (0..n).map(|i| vec_norm(b.row(i).iter().copied(), norm)).collect();
        let cn: Vec<f64> = (0..m).map(|j| vec_norm(b.column(j).iter().copied(), norm)).collect();
        spread(&rn).max(spread(&cn))
    };
    let mut sp = measure(&b);
    let mut done = 0;
    while sp > tol && done < iters {
        let rn: Vec<f64> = (0..n).map(|i| vec_norm(b.row(i).iter().copied(), norm)).collect();
        for (i, f) in normalize(&rn).into_iter().enumerate() {
            b.row_mut(i).unscale_mut(f);
            row[i] *= f;
        }
        let cn: Vec<f64> = (0..m).map(|j| vec_norm(b.column(j).iter().copied(), norm)).collect();
        for (j, f) in normalize(&cn).into_iter().enumerate() {
            b.column_mut(j).unscale_mut(f);
            col[j] *= f;
        }
        done += 1;
        sp = measure(&b);
    }
    // Rebuild W_bal from the f32 scales so the stored factors are exact.
    let row_scale: Vec<f32> = row.iter().map(|&v| v as f32).collect();
    let col_scale: Vec<f32> = col.iter().map(|&v| v as f32).collect();
    let w_bal = Matrix::from_fn(n, m, |i, j| {
        (w.get(i, j) as f64 / (row_scale[i] as f64 * col_scale[j] as f64)) as f32
    });
    Balanced { w_bal, row_scale, col_scale, iterations: done, spread: sp, converged: sp <= tol }
}

pub const SINKHORN_ITERS: usize = 50;
pub const SINKHORN_TOL: f64 = 1e-3;

/// `W = diag(row_scale)·W_bal·diag(col_scale)` with balanced row and column norms.
pub fn sinkhorn_balance(w: &Matrix, norm: BalanceNorm, iters: usize, tol: f64) -> Result<Balanced> {
    let out = sinkhorn_iterate(w, norm, iters, tol);
    if !out.converged {
        return Err(Error::NoConvergence { iterations: out.iterations, spread: out.spread });
    }
    Ok(out)
}

/// Input-side reparameterization attached to a linear layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputTransform {
    pub smooth: Option<Vec<f32>>,
    pub rotation: Option<Rotation>,
    pub row_scale: Option<Vec<f32>>,
    pub col_scale: Option<Vec<f32>>,
}

impl InputTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.smooth.is_none() && self.rotation.is_none() && self.row_scale.is_none() && self.col_scale.is_none()
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        let ok = self.smooth.as_ref().is_none_or(|s| s.len() == n)
            && self.rotation.as_ref().is_none_or(|r| r.dim() == n)
            && self.row_scale.as_ref().is_none_or(|s| s.len() == n)
            && self.col_scale.as_ref().is_none_or(|s| s.len() == m);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("transform does not fit a {n}x{m} weight")))
        }
    }

    /// `P = diag(1/s)·R·diag(r)`; `None` when the map is the identity.
    pub fn input_map(&self, n: usize) -> Option<DMatrix<f64>> {
        if self.smooth.is_none() && self.rotation.is_none() && self.row_scale.is_none() {
            return None;
        }
        let mut p = match &self.rotation {
            Some(r) => r.matrix.clone(),
            None => DMatrix::identity(n, n),
        };
        if let Some(r) = &self.row_scale {
            for (j, &v) in r.iter().enumerate() {
                p.column_mut(j).scale_mut(v as f64);
            }
        }
        if let Some(s) = &self.smooth {
            for (i, &v) in s.iter().enumerate() {
                p.row_mut(i).unscale_mut(v as f64);
            }
        }
        Some(p)
    }

    /// Dense weight in the original space: `P·base·diag(c)`.
    pub fn effective(&self, base: &Matrix) -> Result<Matrix> {
        let (n, m) = base.shape();
        self.check(n, m)?;
        if self.is_identity() {
            return Ok(base.clone());
        }
        let mut w = base.to_f64();
        if let Some(c) = &self.col_scale {
            for (j, &v) in c.iter().enumerate() {
                w.column_mut(j).scale_mut(v as f64);
            }
        }
        if let Some(p) = self.input_map(n) {
            w = p * w;
        }
        Ok(Matrix::from_f64(&w))
    }

    /// Base weight for a target dense weight: `P⁻¹·W·diag(1/c)`.
    pub fn to_base(&self, w: &Matrix) -> Result<Matrix> {
        let (n, m) = w.shape();
        self.check(n, m)?;
        if self.is_identity() {
            return Ok(w.clone());
        }
        Ok(Matrix::from_f64(&self.to_base_f64(&w.to_f64())))
    }

    pub fn to_base_f64(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut b = w.clone();
        if let Some(s) = &self.smooth {
            for (i, &v) in s.iter().enumerate() {
                b.row_mut(i).scale_mut(v as f64);
            }
        }
        if let Some(r) = &self.rotation {
            b = r.matrix.transpose() * b;
        }
        if let Some(r) = &self.row_scale {
            for (i, &v) in r.iter().enumerate() {
                b.row_mut(i).unscale_mut(v as f64);
            }
        }
        if let Some(c) = &self.col_scale {
            for (j, &v) in c.iter().enumerate() {
                b.column_mut(j).unscale_mut(v as f64);
            }
        }
        b
    }

    /// Activations in the transformed space: `X·P`.
    pub fn transform_activations(&self, x: &Matrix) -> Matrix {
        match self.input_map(x.cols()) {
            None => x.clone(),
            Some(p) => Matrix::from_f64(&(x.to_f64() * p)),
        }
    }

    /// Output columns are multiplied by `c` after the base product.
    pub fn col_factors(&self) -> Option<&[f32]> {
        self.col_scale.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessOptions {
    #[serde(default)]
    pub smooth_alpha: Option<f64>,
    #[serde(default)]
    pub rotation: RotationKind,
    #[serde(default)]
    pub balance: Option<BalanceNorm>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { smooth_alpha: None, rotation: RotationKind::Identity, balance: None, seed: 0 }
    }
}

impl PreprocessOptions {
    pub fn is_noop(&self) -> bool {
        self.smooth_alpha.is_none() && self.rotation == RotationKind::Identity && self.balance.is_none()
    }
}

/// Builds the transform for one layer from its weight and calibration inputs.
pub fn layer_transform(x: &Matrix, w: &Matrix, opts: &PreprocessOptions, seed: u64) -> Result<InputTransform> {
    let mut t = InputTransform::identity();
    let mut cur = w.clone();
    if let Some(alpha) = opts.smooth_alpha {
        let cs = smooth_scale(x, w, alpha)?;
        cur = cs.scale_weight(&cur);
        t.smooth = Some(cs.s);
    }
    if opts.rotation != RotationKind::Identity {
        let r = Rotation::build(opts.rotation, w.rows(), seed)?;
        cur = apply_rotation(&cur, &r, Side::Input)?;
        t.rotation = Some(r);
    }
    if let Some(norm) = opts.balance {
        let bal = sinkhorn_iterate(&cur, norm, SINKHORN_ITERS, SINKHORN_TOL);
        if !bal.converged {
            log::warn!(
                "balancing stopped after {} iterations at spread {:.3e}",
                bal.iterations,
                bal.spread
            );
        }
        t.row_scale = Some(bal.row_scale);
        t.col_scale = Some(bal.col_scale);
    }
    Ok(t)
}

/// Attaches per-layer transforms to every still-unquantized linear layer,
/// keeping the model function unchanged up to roundoff.
pub fn preprocess_model(model: &ToyModel, calib: &CalibSet, opts: &PreprocessOptions) -> Result<ToyModel> {
    let mut out = model.clone();
    if opts.is_noop() {
        return Ok(out);
    }
    for (k, info) in model.layer_graph().layers.iter().enumerate() {
        let lin = model.linear(&info.id)?;
        if lin.is_quantized() || !lin.transform().is_identity() {
            continue;
        }
        let w = lin.weight();
        let x = collect_layer_inputs(model, calib, &info.id)?;
        let t = layer_transform(&x, w, opts, rng::derive(opts.seed, k as u64))?;
        let base = t.to_base(w)?;
        out.set_linear(&info.id, Linear::new(WeightRepr::Full(base), t, lin.adapter().cloned())?)?;
    }
    Ok(out)
}
