//! Teacher–student fidelity measures, straight-through surrogates and the
//! low-rank residual fit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerId, LowRank};
use crate::tensor::{gram, Matrix};

fn log_softmax_row(row: &[f32], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|&v| v as f64 / tau).collect();
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Mean over rows of `KL(softmax(t/τ) ‖ softmax(s/τ))`.
pub fn kl_divergence(teacher: &Matrix, student: &Matrix, tau: f64) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape(format!("logit shapes {:?} and {:?} differ", teacher.shape(), student.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if teacher.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in 0..teacher.rows() {
        let lp = log_softmax_row(teacher.row(t), tau);
        let lq = log_softmax_row(student.row(t), tau);
        total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0);
    }
    Ok(total / teacher.rows() as f64)
}

/// Mean Shannon entropy `−Σ q log q` of the row distributions. The
/// regularizer it derives from is the negative of this value.
pub fn entropy(logits: &Matrix) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..logits.rows())
        .map(|t| {
            let lq = log_softmax_row(logits.row(t), 1.0);
            -lq.iter().map(|v| v.exp() * v).sum::<f64>()
        })
        .sum();
    (total / logits.rows() as f64).max(0.0)
}

/// Teacher-forced mean negative log-likelihood of `tokens[t+1]` given row `t`.
pub fn nll(logits: &Matrix, tokens: &[u32]) -> Result<f64> {
    if tokens.len() != logits.rows() || tokens.len() < 2 {
        return Err(Error::shape("need one logit row per token and at least two tokens"));
    }
    let mut total = 0.0;
    for t in 0..tokens.len() - 1 {
        let next = tokens[t + 1] as usize;
        if next >= logits.cols() {
            return Err(Error::invalid(format!("token {next} outside vocabulary of {}", logits.cols())));
        }
        total -= log_softmax_row(logits.row(t), 1.0)[next];
    }
    Ok(total / (tokens.len() - 1) as f64)
}

/// `1 − cos` between flattened states.
pub fn cosine_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hidden states differ in shape"));
    }
    let (na, nb) = (a.frobenius(), b.frobenius());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine distance of a zero-norm state"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Per-layer cosine distances and their mean.
pub fn hidden_alignment(teacher: &[Matrix], student: &[Matrix]) -> Result<(Vec<f64>, f64)> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::shape("tap lists must be non-empty and of equal length"));
    }
    let d: Vec<f64> = teacher.iter().zip(student).map(|(a, b)| cosine_distance(a, b)).collect::<Result<_>>()?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((d, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: LayerId,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub kl: f64,
    pub hidden_cosine: Vec<f64>,
    pub hidden_cosine_mean: f64,
    /// Mean student entropy (non-negative).
    pub entropy: f64,
    pub nll: f64,
    pub teacher_nll: f64,
    pub layer_errors: Vec<LayerError>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Differentiable rounding `⌊x⌋ + σ(k({x} − ½))` and its derivative in `x`.
pub fn smooth_ste(x: f64, k: f64) -> (f64, f64) {
    let fl = x.floor();
    let s = sigmoid(k * (x - fl - 0.5));
    (fl + s, k * s * (1.0 - s))
}

pub const PSTA_K_MIN: f64 = 2.0;
pub const PSTA_K_MAX: f64 = 20.0;

/// Linear temperature ramp over `epochs` epochs.
pub fn psta_schedule(epoch: usize, epochs: usize, k_min: f64, k_max: f64) -> Result<f64> {
    if epochs < 2 {
        return Err(Error::invalid(format!("temperature ramp needs at least two epochs, got {epochs}")));
    }
    if epoch >= epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{epochs}")));
    }
    Ok(k_min + (k_max - k_min) * epoch as f64 / (epochs - 1) as f64)
}

/// `‖X·E‖²` for a weight error `E`.
pub fn activation_objective(x: &Matrix, err: &DMatrix<f64>) -> f64 {
    (x.to_f64() * err).norm_squared()
}

/// Rank-`r` correction `B·A` minimizing `‖X(Ŵ + BA − W)‖²`, from a
/// truncated SVD of the residual in Gram-whitened coordinates.
pub fn lowrank_residual_fit(w: &Matrix, w_hat: &Matrix, x: &Matrix, rank: usize) -> Result<LowRank> {
    let (n, m) = w.shape();
    if w_hat.shape() != (n, m) || x.cols() != n {
        return Err(Error::shape("residual fit operands disagree in shape"));
    }
    if rank > n.min(m) {
        return Err(Error::invalid(format!("rank {rank} exceeds min({n}, {m})")));
    }
    if rank == 0 {
        return Ok(LowRank { b: Matrix::zeros(n, 0), a: Matrix::zeros(0, m) });
    }
    let resid = w.to_f64() - w_hat.to_f64();
    let mut h = gram(x);
    let md = crate::tensor::mean_diag(&h).max(1e-300);
    let ridge = 1e-10 * md;
    for i in 0..n {
        h[(i, i)] += ridge;
    }
    let chol = h.cholesky().ok_or_else(|| Error::numerical("whitening Gram is not positive definite"))?;
    // H = L·Lᵀ, so ‖X·E‖² ≈ ‖Lᵀ·E‖².
    let l = chol.l();
    let z = l.transpose() * &resid;
    let svd = z.svd(true, true);
    let (u, vt) = (svd.u.expect("left vectors"), svd.v_t.expect("right vectors"));
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut ur = DMatrix::zeros(n, rank);
    let mut ar = DMatrix::zeros(rank, m);
    for (k, &c) in idx.iter().take(rank).enumerate() {
        let sv = svd.singular_values[c];
        ur.set_column(k, &(u.column(c) * sv));
        ar.set_row(k, &vt.row(c));
    }
    let lt = l.transpose();
    let b = lt
        .solve_upper_triangular(&ur)
        .ok_or_else(|| Error::numerical("whitening factor is singular"))?;
    let fit = LowRank { b: Matrix::from_f64(&b), a: Matrix::from_f64(&ar) };
    let before = activation_objective(x, &resid);
    let after = activation_objective(x, &(&resid - fit.product().to_f64()));
    if after > before {
        return Ok(LowRank { b: Matrix::zeros(n, rank), a: Matrix::zeros(rank, m) });
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(rows, cols, rng::gaussian_vec(&mut r, rows * cols, std)).unwrap()
    }

    #[test]
    fn kl_basics() {
        let a = random(5, 7, 1, 2.0);
        assert_eq!(kl_divergence(&a, &a, 1.0).unwrap(), 0.0);
        for seed in 0..1000 {
            let b = random(1, 7, 10 + seed, 3.0);
            let c = random(1, 7, 5000 + seed, 3.0);
            assert!(kl_divergence(&b, &c, 1.0).unwrap() >= 0.0);
        }
        assert!(kl_divergence(&a, &random(5, 6, 2, 1.0), 1.0).is_err());
    }

    #[test]
    fn kl_peaked_teacher_against_uniform_student() {
        let v = 16;
        let margin = 12.0f32;
        let t = Matrix::from_fn(1, v, |_, j| if j == 3 { margin } else { 0.0 });
        let s = Matrix::zeros(1, v);
        // Direct summation in closed form.
        let z = margin.exp() as f64 + (v - 1) as f64;
        let p_top = margin.exp() as f64 / z;
        let p_rest = 1.0 / z;
        let expect = p_top * (p_top * v as f64).ln() + (v - 1) as f64 * p_rest * (p_rest * v as f64).ln();
        let got = kl_divergence(&t, &s, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - (v as f64).ln()).abs() < 0.01);
    }

    #[test]
    fn entropy_limits_and_shift_invariance() {
        let v = 10;
        let u = Matrix::zeros(3, v);
        assert!((entropy(&u) - (v as f64).ln()).abs() < 1e-12);
        let peak = Matrix::from_fn(1, v, |_, j| if j == 0 { 1e4 } else { 0.0 });
        assert!(entropy(&peak) < 1e-9);
        let a = random(4, v, 3, 1.0);
        assert!((entropy(&a) - entropy(&a.map(|x| x + 5.0))).abs() < 1e-5);
    }

    #[test]
    fn nll_of_uniform_logits_is_log_vocab() {
        let l = Matrix::zeros(4, 8);
        assert!((nll(&l, &[0, 1, 2, 3]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert!(nll(&l, &[0, 1, 9, 3]).is_err());
    }

    #[test]
    fn cosine_alignment() {
        let a = random(3, 4, 4, 1.0);
        let b = random(3, 4, 5, 1.0);
        let (d, mean) = hidden_alignment(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert!(d.iter().all(|&x| x.abs() < 1e-7) && mean.abs() < 1e-7);
        assert!((cosine_distance(&a, &a.scale(-1.0)).unwrap() - 2.0).abs() < 1e-7);
        let base = cosine_distance(&a, &b).unwrap();
        assert!((cosine_distance(&a, &b.scale(3.5)).unwrap() - base).abs() < 1e-6);
        assert!(cosine_distance(&a, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn smooth_ste_values_and_derivative() {
        for k in [0.1, 1.0, 50.0] {
            assert!((smooth_ste(1.5, k).0 - 1.5).abs() < 1e-12);
        }
        assert!((smooth_ste(1.3, 1000.0).0 - 1.0).abs() < 1e-3);
        assert!((smooth_ste(1.7, 1000.0).0 - 2.0).abs() < 1e-3);
        let mut r = rng::seeded(6);
        for _ in 0..100 {
            let k: f64 = r.random_range(0.5..20.0);
            // Keep away from the integer jumps of the floor.
            let x: f64 = r.random_range(-5.0..5.0f64).floor() + r.random_range(0.05..0.95);
            let h = 1e-6;
            let fd = (smooth_ste(x + h, k).0 - smooth_ste(x - h, k).0) / (2.0 * h);
            assert!((fd - smooth_ste(x, k).1).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn psta_endpoints() {
        assert_eq!(psta_schedule(0, 10, PSTA_K_MIN, PSTA_K_MAX).unwrap(), 2.0);
        assert_eq!(psta_schedule(9, 10, PSTA_K_MIN, PSTA_K_MAX).unwrap(), 20.0);
        assert_eq!(psta_schedule(2, 5, 2.0, 20.0).unwrap(), 11.0);
        assert!(psta_schedule(0, 1, 2.0, 20.0).is_err());
    }

    #[test]
    fn lowrank_fit_recovers_and_improves() {
        let x = random(40, 6, 7, 1.0);
        let w = random(6, 5, 8, 1.0);
        let w_hat = w.map(|v| (v * 2.0).round() / 2.0);
        let zero = lowrank_residual_fit(&w, &w_hat, &x, 0).unwrap();
        assert_eq!(zero.product(), Matrix::zeros(6, 5));
        let full = lowrank_residual_fit(&w, &w_hat, &x, 5).unwrap();
        let e = w_hat.add(&full.product()).unwrap().sub(&w).unwrap();
        assert!(activation_objective(&x, &e.to_f64()) <= 1e-8);
        let base = activation_objective(&x, &w_hat.sub(&w).unwrap().to_f64());
        let mut last = base;
        for r in 1..=4 {
            let f = lowrank_residual_fit(&w, &w_hat, &x, r).unwrap();
            let obj = activation_objective(&x, &w_hat.add(&f.product()).unwrap().sub(&w).unwrap().to_f64());
            assert!(obj < base && obj <= last * (1.0 + 1e-9));
            last = obj;
        }
    }
}
