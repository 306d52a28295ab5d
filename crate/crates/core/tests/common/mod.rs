#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use quantkit::calib::{CalibSet, Strategy};
use quantkit::model::{LayerId, Role, ToyConfig, ToyModel};
use quantkit::pipeline::config::{build_data, CalibOptions};
use quantkit::quant::{quantize_matrix, storage_bytes, Granularity, QuantConfig, QuantGrid, ScaleMode, Scheme};
use quantkit::rng::{self, Rng};
use quantkit::Matrix;

pub fn random(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_vec(rows, cols, rng::gaussian_vec(&mut r, rows * cols, std)).unwrap()
}

/// Rows of `Z·L` with a random mixing `L`, so the Gram has strong off-diagonals.
pub fn correlated(rows: usize, cols: usize, seed: u64) -> Matrix {
    let z = random(rows, cols, seed, 1.0);
    let mut l = random(cols, cols, seed ^ 0x9e37, 0.6);
    for i in 0..cols {
        l.set(i, i, l.get(i, i) + 1.0);
    }
    z.matmul(&l).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn report(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Calibration and held-out sets for a toy seed.
pub fn toy_data(seed: u64, vocab: usize) -> (CalibSet, CalibSet) {
    let o = CalibOptions { n: 4, eval_n: 4, seq_len: 32, strategy: Strategy::DropRand, ..Default::default() };
    build_data(&o, vocab, seed).unwrap()
}

pub fn toy(seed: u64) -> ToyModel {
    ToyModel::random(ToyConfig::default(), seed).unwrap()
}

/// Block-0 attention-norm gain on one channel scaled up, producing an
/// outlier input channel shared by the query, key and value projections.
pub fn with_outlier(m: &ToyModel, factor: f32) -> ToyModel {
    let mut out = m.clone();
    out.block_mut(0).attn_norm[3] *= factor;
    out
}

pub fn outlier_layers() -> Vec<LayerId> {
    vec![LayerId::new(0, Role::Q), LayerId::new(0, Role::K), LayerId::new(0, Role::V)]
}

/// Widest symmetric per-channel format whose total storage fits `budget`.
pub fn uniform_within(m: &ToyModel, budget: u64) -> QuantConfig {
    (2..=8u8)
        .rev()
        .map(|b| QuantConfig::new(b, Scheme::Symmetric, Granularity::PerChannel).unwrap())
        .find(|cfg| {
            let total: u64 = m
                .layer_graph()
                .layers
                .iter()
                .map(|l| storage_bytes(&quantize_matrix(m.linear(&l.id).unwrap().weight(), cfg, ScaleMode::Minmax).unwrap()) as u64)
                .sum();
            total <= budget
        })
        .expect("no uniform format fits the budget")
}

/// Sign-rank-one matrix whose magnitude field has two disjoint row modes
/// (and two column modes), plus Gaussian noise.
pub fn two_row_modes(seed: u64, n: usize, m: usize, contrast: f64, noise: f64) -> Matrix {
    let mut r = rng::seeded(seed);
    let prof = |len: usize, first: bool, r: &mut Rng| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let u: f64 = r.random_range(0.5..1.5);
                if (i < len / 2) == first {
                    u
                } else {
                    contrast * u
                }
            })
            .collect()
    };
    let (p1, p2) = (prof(n, true, &mut r), prof(n, false, &mut r));
    let (k1, k2) = (prof(m, true, &mut r), prof(m, false, &mut r));
    let s: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let t: Vec<f64> = (0..m).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let w = DMatrix::from_fn(n, m, |i, j| s[i] * t[j] * (p1[i] * k1[j] + p2[i] * k2[j]));
    let sd = noise * (w.norm_squared() / (n * m) as f64).sqrt();
    Matrix::from_f64(&DMatrix::from_fn(n, m, |i, j| w[(i, j)] + sd * rng::gaussian(&mut r)))
}

/// `tr(EᵀHE)` with `E = W − Ŵ`, computed directly.
pub fn weighted_error(w: &DMatrix<f64>, w_hat: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let e = w - w_hat;
    (e.transpose() * h * e).trace()
}

/// Minimum of `tr(EᵀHE)` over every code assignment of an `N×1` weight,
/// row `i` decoded on `grids[i]`.
pub fn exhaustive_codes(w: &DMatrix<f64>, h: &DMatrix<f64>, grids: &[QuantGrid]) -> f64 {
    let n = w.nrows();
    let levels: Vec<usize> = grids.iter().map(|g| (g.q_max - g.q_min + 1) as usize).collect();
    let total: usize = levels.iter().product();
    let mut best = f64::INFINITY;
    for idx in 0..total {
        let mut rest = idx;
        let w_hat = DMatrix::from_fn(n, 1, |i, _| {
            let c = grids[i].q_min + (rest % levels[i]) as i32;
            rest /= levels[i];
            grids[i].decode(c) as f64
        });
        best = best.min(weighted_error(w, &w_hat, h));
    }
    best
}

/// Exact optimum of `tr(EᵀHE)` over symmetric three-level codes with one
/// free scale per row, scales solved jointly in closed form.
pub fn exhaustive_ternary_rows(w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let (n, m) = w.shape();
    // A row's codes and their negation give the same reconstructions.
    let codes: Vec<Vec<f64>> = (0..3usize.pow(m as u32))
        .map(|idx| (0..m).map(|j| ((idx / 3usize.pow(j as u32)) % 3) as f64 - 1.0).collect::<Vec<f64>>())
        .filter(|c| c.iter().find(|v| **v != 0.0).copied().unwrap_or(1.0) > 0.0)
        .collect();
    let k = codes.len();
    let dot: Vec<f64> = (0..k * k).map(|t| codes[t / k].iter().zip(&codes[t % k]).map(|(a, b)| a * b).sum()).collect();
    let hw = h * w;
    let lin: Vec<f64> = (0..n * k).map(|t| (0..m).map(|j| hw[(t / k, j)] * codes[t % k][j]).sum()).collect();
    let constant = (w.transpose() * h * w).trace();
    let mut best = f64::INFINITY;
    let mut sel = vec![0usize; n];
    loop {
        let act: Vec<usize> = (0..n).filter(|&i| dot[sel[i] * k + sel[i]] > 0.0).collect();
        let d = act.len();
        let v = if d == 0 {
            constant
        } else {
            let a = DMatrix::from_fn(d, d, |p, q| h[(act[p], act[q])] * dot[sel[act[p]] * k + sel[act[q]]]);
            let b = DVector::from_fn(d, |p, _| lin[act[p] * k + sel[act[p]]]);
            match a.cholesky() {
                Some(ch) => constant - b.dot(&ch.solve(&b)),
                None => f64::INFINITY,
            }
        };
        best = best.min(v);
        let mut i = 0;
        loop {
            if i == n {
                return best.max(0.0);
            }
            sel[i] += 1;
            if sel[i] < k {
                break;
            }
            sel[i] = 0;
            i += 1;
        }
    }
}

/// Smallest total error over every choice of one candidate per module
/// within the budget; `None` when nothing fits.
pub fn brute_force_plan(costs: &[Vec<u64>], errs: &[Vec<f64>], budget: u64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut sel = vec![0usize; costs.len()];
    loop {
        let cost: u64 = sel.iter().enumerate().map(|(i, &c)| costs[i][c]).sum();
        if cost <= budget {
            let err: f64 = sel.iter().enumerate().map(|(i, &c)| errs[i][c]).sum();
            best = Some(best.map_or(err, |b: f64| b.min(err)));
        }
        let mut i = 0;
        loop {
            if i == sel.len() {
                return best;
            }
            sel[i] += 1;
            if sel[i] < costs[i].len() {
                break;
            }
            sel[i] = 0;
            i += 1;
        }
    }
}
