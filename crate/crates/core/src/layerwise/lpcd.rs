//! Relax-then-project coordinate descent over coupled layers of one block.
//!
//! Each submodule owns a fixed objective `J` over its members' dense
//! weights. One step relaxes a single member to a continuous minimizer of
//! `J` with the others held at their quantized values, then projects it back
//! with the caller's quantizer.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerwise::qep::{qep_target, QepOptions};
use crate::model::{rope_angle, Linear, Role, ToyConfig};
use crate::stats::CalibStats;
use crate::tensor::{mean_diag, Matrix};

type M64 = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpcdOptions {
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Ridge relative to the mean Gram diagonal for closed-form members.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_cgls")]
    pub cgls_iters: usize,
    #[serde(default = "default_gate_steps")]
    pub gate_steps: usize,
    #[serde(default = "default_gate_lr")]
    pub gate_lr: f64,
}

fn default_iters() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_cgls() -> usize {
    30
}
fn default_gate_steps() -> usize {
    200
}
fn default_gate_lr() -> f64 {
    1e-2
}

impl Default for LpcdOptions {
    fn default() -> Self {
        Self {
            iters: default_iters(),
            ridge: default_ridge(),
            cgls_iters: default_cgls(),
            gate_steps: default_gate_steps(),
            gate_lr: default_gate_lr(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmoduleKind {
    /// A single layer with `J = ‖X̂U − XW‖²`.
    Linear,
    Qk,
    Vo,
    GateUpDown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnDims {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

impl AttnDims {
    pub fn from_config(c: &ToyConfig) -> Self {
        Self { n_heads: c.n_heads, n_kv_heads: c.n_kv_heads, head_dim: c.head_dim(), rope_base: c.rope_base }
    }

    fn group(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
enum Data {
    Linear { x_hat: M64, x: M64, w_fp: Matrix, stats: CalibStats },
    Qk { dims: AttnDims, x_hat: Vec<M64>, target: Vec<Vec<M64>> },
    Vo { dims: AttnDims, x_hat: Vec<M64>, p_hat: Vec<Vec<M64>>, target: Vec<M64> },
    Gud { x_hat: Vec<M64>, target: Vec<M64> },
}

/// A group of coupled members and the cached inputs/targets of their objective.
#[derive(Clone, Debug)]
pub struct Submodule {
    kind: SubmoduleKind,
    data: Data,
    members: Vec<(Role, Linear)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxStep {
    pub iteration: usize,
    pub role: Role,
    pub before: f64,
    pub relaxed: f64,
    pub projected: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpcdReport {
    pub initial: f64,
    pub steps: Vec<RelaxStep>,
    /// Objective after each full cycle of projections.
    pub per_iteration: Vec<f64>,
    pub final_objective: f64,
    /// A member's relaxed solve needed extra regularization.
    pub regularized: bool,
}

fn to64(m: &Matrix) -> M64 {
    m.to_f64()
}

fn rope_rows(m: &mut M64, heads: usize, dk: usize, base: f64, inverse: bool) {
    for t in 0..m.nrows() {
        for h in 0..heads {
            for i in 0..dk / 2 {
                let (s, c) = rope_angle(t, i, dk, base).sin_cos();
                let s = if inverse { -s } else { s };
                let (a, b) = (m[(t, h * dk + 2 * i)], m[(t, h * dk + 2 * i + 1)]);
                m[(t, h * dk + 2 * i)] = a * c - b * s;
                m[(t, h * dk + 2 * i + 1)] = a * s + b * c;
            }
        }
    }
}

/// Scaled causal scores `q̂_t·k̂_s/√dk` (`s ≤ t`) for every head.
fn scores(q: &M64, k: &M64, dims: &AttnDims) -> Vec<M64> {
    let (t_len, dk) = (q.nrows(), dims.head_dim);
    let sc = dims.scale();
    (0..dims.n_heads)
        .map(|h| {
            let g = dims.group(h);
            let mut s = M64::zeros(t_len, t_len);
            for t in 0..t_len {
                for u in 0..=t {
                    let mut acc = 0.0;
                    for c in 0..dk {
                        acc += q[(t, h * dk + c)] * k[(u, g * dk + c)];
                    }
                    s[(t, u)] = acc * sc;
                }
            }
            s
        })
        .collect()
}

fn flatten_lower(per_seq: &[Vec<M64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for heads in per_seq {
        for s in heads {
            for t in 0..s.nrows() {
                for u in 0..=t {
                    out.push(s[(t, u)]);
                }
            }
        }
    }
    out
}

fn flatten(per_seq: &[M64]) -> Vec<f64> {
    per_seq.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Warm-started conjugate gradient on the normal equations of
/// `min ‖A x − b‖²`; the residual norm is non-increasing.
fn cgls(apply: &dyn Fn(&M64) -> Vec<f64>, adjoint: &dyn Fn(&[f64]) -> M64, b: &[f64], x0: &M64, iters: usize) -> M64 {
    let mut x = x0.clone();
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut s = adjoint(&r);
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let gamma0 = gamma;
    for _ in 0..iters {
        if gamma <= 1e-28 * gamma0.max(1e-300) || gamma == 0.0 {
            break;
        }
        let q = apply(&p);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq <= 0.0 || !qq.is_finite() {
            break;
        }
        let alpha = gamma / qq;
        x += &p * alpha;
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = adjoint(&r);
        let g_new = s.norm_squared();
        p = &s + &p * (g_new / gamma);
        gamma = g_new;
    }
    x
}

/// Proximal least squares `(ZᵀZ + λI)U = ZᵀT + λU₀` with `λ = ridge·mean diag`.
fn prox_ls(zs: &[M64], ts: &[M64], u0: &M64, ridge: f64, flagged: &mut bool) -> Result<M64> {
    let n = u0.nrows();
    let mut g = M64::zeros(n, n);
    let mut rhs = M64::zeros(n, u0.ncols());
    for (z, t) in zs.iter().zip(ts) {
        g += z.transpose() * z;
        rhs += z.transpose() * t;
    }
    let md = mean_diag(&g).max(1e-300);
    let mut lambda = ridge * md;
    for _ in 0..8 {
        let mut a = g.clone();
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        if let Some(ch) = a.cholesky() {
            return Ok(ch.solve(&(&rhs + u0 * lambda)));
        }
        *flagged = true;
        lambda = (lambda * 100.0).max(1e-12 * md);
    }
    Err(Error::numerical("relaxation system stayed singular after regularization"))
}

fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Submodule {
    /// Single-layer submodule from stacked quantized-model inputs `x_hat`
    /// and full-precision inputs `x`.
    pub fn linear(x_hat: &Matrix, x: &Matrix, w_fp: &Matrix, current: Linear) -> Result<Self> {
        let mut stats = CalibStats::new(x_hat.cols());
        stats.accumulate(x, x_hat)?;
        if w_fp.rows() != x_hat.cols() || current.shape() != w_fp.shape() {
            return Err(Error::shape("linear submodule shapes disagree"));
        }
        Ok(Self {
            kind: SubmoduleKind::Linear,
            data: Data::Linear { x_hat: to64(x_hat), x: to64(x), w_fp: w_fp.clone(), stats },
            members: vec![(Role::O, current)],
        })
    }

    /// Attention-score submodule. `x_hat` are the quantized model's normed
    /// attention inputs; targets come from the full-precision inputs and weights.
    pub fn qk(dims: AttnDims, x_hat: &[Matrix], x_fp: &[Matrix], wq_fp: &Matrix, wk_fp: &Matrix, q: Linear, k: Linear) -> Result<Self> {
        check_seqs(x_hat, x_fp)?;
        let (wq, wk) = (to64(wq_fp), to64(wk_fp));
        let target = x_fp
            .iter()
            .map(|x| {
                let x = to64(x);
                let mut qf = &x * &wq;
                let mut kf = &x * &wk;
                rope_rows(&mut qf, dims.n_heads, dims.head_dim, dims.rope_base, false);
                rope_rows(&mut kf, dims.n_kv_heads, dims.head_dim, dims.rope_base, false);
                scores(&qf, &kf, &dims)
            })
            .collect();
        Ok(Self {
            kind: SubmoduleKind::Qk,
            data: Data::Qk { dims, x_hat: x_hat.iter().map(to64).collect(), target },
            members: vec![(Role::Q, q), (Role::K, k)],
        })
    }

    /// Value/output submodule: `p_hat` are the quantized model's attention
    /// probabilities (frozen) and `target` the full-precision sublayer
    /// output plus the residual-stream gap `h − ĥ`.
    pub fn vo(dims: AttnDims, x_hat: &[Matrix], p_hat: &[Vec<Matrix>], target: &[Matrix], v: Linear, o: Linear) -> Result<Self> {
        check_seqs(x_hat, target)?;
        if p_hat.len() != x_hat.len() || p_hat.iter().any(|p| p.len() != dims.n_heads) {
            return Err(Error::shape("attention probabilities do not match the sequences and heads"));
        }
        Ok(Self {
            kind: SubmoduleKind::Vo,
            data: Data::Vo {
                dims,
                x_hat: x_hat.iter().map(to64).collect(),
                p_hat: p_hat.iter().map(|ps| ps.iter().map(to64).collect()).collect(),
                target: target.iter().map(to64).collect(),
            },
            members: vec![(Role::V, v), (Role::O, o)],
        })
    }

    /// Feed-forward submodule with members in (up, gate, down) order.
    pub fn gate_up_down(x_hat: &[Matrix], target: &[Matrix], gate: Linear, up: Linear, down: Linear) -> Result<Self> {
        check_seqs(x_hat, target)?;
        Ok(Self {
            kind: SubmoduleKind::GateUpDown,
            data: Data::Gud { x_hat: x_hat.iter().map(to64).collect(), target: target.iter().map(to64).collect() },
            members: vec![(Role::Up, up), (Role::Gate, gate), (Role::Down, down)],
        })
    }

    pub fn kind(&self) -> SubmoduleKind {
        self.kind
    }

    pub fn members(&self) -> &[(Role, Linear)] {
        &self.members
    }

    /// Objective at the given dense member weights (member order).
    pub fn objective(&self, ws: &[M64]) -> f64 {
        match &self.data {
            Data::Linear { x_hat, x, w_fp, .. } => (x_hat * &ws[0] - x * to64(w_fp)).norm_squared(),
            Data::Qk { dims, x_hat, target } => {
                let mut j = 0.0;
                for (x, tg) in x_hat.iter().zip(target) {
                    let (q, k) = self.qk_rotated(dims, x, &ws[0], &ws[1]);
                    for (s, t) in scores(&q, &k, dims).iter().zip(tg) {
                        for a in 0..s.nrows() {
                            for b in 0..=a {
                                j += (s[(a, b)] - t[(a, b)]).powi(2);
                            }
                        }
                    }
                }
                j
            }
            Data::Vo { dims, x_hat, p_hat, target } => x_hat
                .iter()
                .zip(p_hat)
                .zip(target)
                .map(|((x, p), t)| (vo_heads(dims, x, p, &ws[0]) * &ws[1] - t).norm_squared())
                .sum(),
            Data::Gud { x_hat, target } => x_hat
                .iter()
                .zip(target)
                .map(|(x, t)| (ffn_hidden(x, &ws[1], &ws[0]) * &ws[2] - t).norm_squared())
                .sum(),
        }
    }

    /// Objective at the members' current weights.
    pub fn current_objective(&self) -> f64 {
        self.objective(&self.dense_weights())
    }

    fn dense_weights(&self) -> Vec<M64> {
        self.members.iter().map(|(_, l)| to64(l.weight())).collect()
    }

    fn qk_rotated(&self, dims: &AttnDims, x: &M64, wq: &M64, wk: &M64) -> (M64, M64) {
        let mut q = x * wq;
        let mut k = x * wk;
        rope_rows(&mut q, dims.n_heads, dims.head_dim, dims.rope_base, false);
        rope_rows(&mut k, dims.n_kv_heads, dims.head_dim, dims.rope_base, false);
        (q, k)
    }

    /// Gram of the inputs the member sees under the current weights.
    fn member_gram(&self, idx: usize, ws: &[M64]) -> M64 {
        let grams = |xs: &mut dyn Iterator<Item = M64>| {
            let mut g: Option<M64> = None;
            for x in xs {
                let xtx = x.transpose() * &x;
                g = Some(match g {
                    None => xtx,
                    Some(acc) => acc + xtx,
                });
            }
            g.expect("at least one sequence")
        };
        match &self.data {
            Data::Linear { stats, .. } => stats.gram.clone(),
            Data::Qk { x_hat, .. } => grams(&mut x_hat.iter().cloned()),
            Data::Vo { dims, x_hat, p_hat, .. } => match idx {
                0 => grams(&mut x_hat.iter().cloned()),
                _ => grams(&mut x_hat.iter().zip(p_hat).map(|(x, p)| vo_heads(dims, x, p, &ws[0]))),
            },
            Data::Gud { x_hat, .. } => match idx {
                2 => grams(&mut x_hat.iter().map(|x| ffn_hidden(x, &ws[1], &ws[0]))),
                _ => grams(&mut x_hat.iter().cloned()),
            },
        }
    }

    /// Continuous minimizer (or descent point, for the gate) of `J` over
    /// member `idx` with the others fixed.
    fn relax(&self, idx: usize, ws: &[M64], opts: &LpcdOptions, flagged: &mut bool) -> Result<M64> {
        match &self.data {
            Data::Linear { w_fp, stats, .. } => {
                let t = qep_target(w_fp, stats, &QepOptions { alpha: 1.0, eta: opts.ridge })?;
                Ok(to64(&t))
            }
            Data::Qk { dims, x_hat, target } => Ok(self.relax_qk(dims, x_hat, target, idx, ws, opts)),
            Data::Vo { dims, x_hat, p_hat, target } => match idx {
                0 => {
                    let wo = &ws[1];
                    let apply = |wv: &M64| -> Vec<f64> {
                        let outs: Vec<M64> = x_hat.iter().zip(p_hat).map(|(x, p)| vo_heads(dims, x, p, wv) * wo).collect();
                        flatten(&outs)
                    };
                    let adjoint = |r: &[f64]| -> M64 {
                        let mut grad = M64::zeros(ws[0].nrows(), ws[0].ncols());
                        let mut off = 0;
                        for (x, p) in x_hat.iter().zip(p_hat) {
                            let (t_len, d) = (x.nrows(), wo.ncols());
                            let rm = M64::from_column_slice(t_len, d, &r[off..off + t_len * d]);
                            off += t_len * d;
                            let d_o = rm * wo.transpose();
                            let dv = vo_heads_adjoint(dims, p, &d_o);
                            grad += x.transpose() * dv;
                        }
                        grad
                    };
                    Ok(cgls(&apply, &adjoint, &flatten(target), &ws[0], opts.cgls_iters))
                }
                _ => {
                    let zs: Vec<M64> = x_hat.iter().zip(p_hat).map(|(x, p)| vo_heads(dims, x, p, &ws[0])).collect();
                    prox_ls(&zs, target, &ws[1], opts.ridge, flagged)
                }
            },
            Data::Gud { x_hat, target } => match idx {
                0 => {
                    let (wg, wd) = (&ws[1], &ws[2]);
                    let sig: Vec<M64> = x_hat.iter().map(|x| (x * wg).map(silu64)).collect();
                    let apply = |wu: &M64| -> Vec<f64> {
                        let outs: Vec<M64> = x_hat.iter().zip(&sig).map(|(x, s)| s.component_mul(&(x * wu)) * wd).collect();
                        flatten(&outs)
                    };
                    let adjoint = |r: &[f64]| -> M64 {
                        let mut grad = M64::zeros(ws[0].nrows(), ws[0].ncols());
                        let mut off = 0;
                        for (x, s) in x_hat.iter().zip(&sig) {
                            let (t_len, d) = (x.nrows(), wd.ncols());
                            let rm = M64::from_column_slice(t_len, d, &r[off..off + t_len * d]);
                            off += t_len * d;
                            let da = (rm * wd.transpose()).component_mul(s);
                            grad += x.transpose() * da;
                        }
                        grad
                    };
                    Ok(cgls(&apply, &adjoint, &flatten(target), &ws[0], opts.cgls_iters))
                }
                1 => Ok(self.relax_gate(x_hat, target, ws, opts)),
                _ => {
                    let zs: Vec<M64> = x_hat.iter().map(|x| ffn_hidden(x, &ws[1], &ws[0])).collect();
                    prox_ls(&zs, target, &ws[2], opts.ridge, flagged)
                }
            },
        }
    }

    fn relax_qk(&self, dims: &AttnDims, x_hat: &[M64], target: &[Vec<M64>], idx: usize, ws: &[M64], opts: &LpcdOptions) -> M64 {
        let dk = dims.head_dim;
        let sc = dims.scale();
        let b = flatten_lower(target);
        // The fixed partner, already rotated.
        let fixed: Vec<M64> = x_hat
            .iter()
            .map(|x| {
                let mut f = x * &ws[1 - idx];
                let heads = if idx == 0 { dims.n_kv_heads } else { dims.n_heads };
                rope_rows(&mut f, heads, dk, dims.rope_base, false);
                f
            })
            .collect();
        let apply = |w: &M64| -> Vec<f64> {
            let per: Vec<Vec<M64>> = x_hat
                .iter()
                .zip(&fixed)
                .map(|(x, f)| {
                    let mut m = x * w;
                    if idx == 0 {
                        rope_rows(&mut m, dims.n_heads, dk, dims.rope_base, false);
                        scores(&m, f, dims)
                    } else {
                        rope_rows(&mut m, dims.n_kv_heads, dk, dims.rope_base, false);
                        scores(f, &m, dims)
                    }
                })
                .collect();
            flatten_lower(&per)
        };
        let adjoint = |r: &[f64]| -> M64 {
            let mut grad = M64::zeros(ws[idx].nrows(), ws[idx].ncols());
            let mut off = 0;
            for (x, f) in x_hat.iter().zip(&fixed) {
                let t_len = x.nrows();
                let mut g = M64::zeros(t_len, ws[idx].ncols());
                for h in 0..dims.n_heads {
                    let kv = dims.group(h);
                    for t in 0..t_len {
                        for u in 0..=t {
                            let rv = r[off] * sc;
                            off += 1;
                            if rv == 0.0 {
                                continue;
                            }
                            for c in 0..dk {
                                if idx == 0 {
                                    g[(t, h * dk + c)] += rv * f[(u, kv * dk + c)];
                                } else {
                                    g[(u, kv * dk + c)] += rv * f[(t, h * dk + c)];
                                }
                            }
                        }
                    }
                }
                let heads = if idx == 0 { dims.n_heads } else { dims.n_kv_heads };
                rope_rows(&mut g, heads, dk, dims.rope_base, true);
                grad += x.transpose() * g;
            }
            grad
        };
        cgls(&apply, &adjoint, &b, &ws[idx], opts.cgls_iters)
    }

    /// Objective and analytic gradient with respect to the gate weight,
    /// other members fixed at `ws`.
    pub fn gate_objective_and_grad(&self, ws: &[M64], wg: &M64) -> Result<(f64, M64)> {
        let Data::Gud { x_hat, target } = &self.data else {
            return Err(Error::invalid("gate gradient is only defined for the feed-forward submodule"));
        };
        let (wu, wd) = (&ws[0], &ws[2]);
        let mut j = 0.0;
        let mut grad = M64::zeros(wg.nrows(), wg.ncols());
        for (x, t) in x_hat.iter().zip(target) {
            let a = x * wg;
            let u = x * wu;
            let hidden = a.map(silu64).component_mul(&u);
            let r = hidden * wd - t;
            j += r.norm_squared();
            let dh = (r * wd.transpose()) * 2.0;
            let da = dh.component_mul(&u).component_mul(&a.map(silu_grad));
            grad += x.transpose() * da;
        }
        Ok((j, grad))
    }

    fn relax_gate(&self, _x: &[M64], _t: &[M64], ws: &[M64], opts: &LpcdOptions) -> M64 {
        let mut g = ws[1].clone();
        let (mut j, mut grad) = self.gate_objective_and_grad(ws, &g).expect("gate member");
        let mut lr = opts.gate_lr;
        for _ in 0..opts.gate_steps {
            let cand = &g - &grad * lr;
            let (jc, gc) = self.gate_objective_and_grad(ws, &cand).expect("gate member");
            if jc < j {
                g = cand;
                j = jc;
                grad = gc;
            } else {
                lr *= 0.5;
                if lr < 1e-30 {
                    break;
                }
            }
        }
        g
    }
}

fn check_seqs(a: &[Matrix], b: &[Matrix]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.rows() != y.rows()) {
        return Err(Error::shape("submodule inputs and targets must pair up per sequence"));
    }
    Ok(())
}

/// Concatenated heads `P̂_h·X̂·W_v` for frozen probabilities.
fn vo_heads(dims: &AttnDims, x: &M64, p: &[M64], wv: &M64) -> M64 {
    let v = x * wv;
    let dk = dims.head_dim;
    let mut out = M64::zeros(x.nrows(), dims.n_heads * dk);
    for (h, ph) in p.iter().enumerate() {
        let g = dims.group(h);
        let vh = v.columns(g * dk, dk);
        out.columns_mut(h * dk, dk).copy_from(&(ph * vh));
    }
    out
}

fn vo_heads_adjoint(dims: &AttnDims, p: &[M64], d_out: &M64) -> M64 {
    let dk = dims.head_dim;
    let mut dv = M64::zeros(d_out.nrows(), dims.n_kv_heads * dk);
    for (h, ph) in p.iter().enumerate() {
        let g = dims.group(h);
        let contrib = ph.transpose() * d_out.columns(h * dk, dk);
        let mut slot = dv.columns_mut(g * dk, dk);
        slot += contrib;
    }
    dv
}

fn ffn_hidden(x: &M64, wg: &M64, wu: &M64) -> M64 {
    (x * wg).map(silu64).component_mul(&(x * wu))
}

/// Quantizer used for projection: receives the member role, its relaxed
/// dense weight and the Gram of the inputs it sees.
pub type Projector<'a> = dyn Fn(Role, &Matrix, &M64) -> Result<Linear> + 'a;

/// Runs `opts.iters` relax-then-project cycles and returns the best
/// projected members (never worse than the starting point).
pub fn lpcd_refine(sub: &Submodule, project: &Projector, opts: &LpcdOptions) -> Result<(Vec<(Role, Linear)>, LpcdReport)> {
    let mut members = sub.members.clone();
    let mut ws: Vec<M64> = members.iter().map(|(_, l)| to64(l.weight())).collect();
    let initial = sub.objective(&ws);
    let mut best = (initial, members.clone());
    let mut steps = Vec::new();
    let mut per_iteration = Vec::new();
    let mut flagged = false;
    for it in 0..opts.iters {
        for idx in 0..members.len() {
            let before = sub.objective(&ws);
            let mut relaxed_w = sub.relax(idx, &ws, opts, &mut flagged)?;
            let mut trial = ws.clone();
            trial[idx] = relaxed_w.clone();
            let mut relaxed = sub.objective(&trial);
            if !(relaxed <= before) && sub.kind != SubmoduleKind::Linear {
                relaxed_w = ws[idx].clone();
                relaxed = before;
            }
            let h = sub.member_gram(idx, &ws);
            let role = members[idx].0;
            let lin = project(role, &Matrix::from_f64(&relaxed_w), &h)?;
            ws[idx] = to64(lin.weight());
            members[idx].1 = lin;
            let projected = sub.objective(&ws);
            steps.push(RelaxStep { iteration: it, role, before, relaxed, projected });
        }
        let j = sub.objective(&ws);
        per_iteration.push(j);
        if j < best.0 {
            best = (j, members.clone());
        }
    }
    Ok((best.1, LpcdReport { initial, steps, per_iteration, final_objective: best.0, regularized: flagged }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layerwise::gptq::rtn_quantize;
    use crate::model::WeightRepr;
    use crate::quant::{Granularity, QuantConfig, ScaleMode};
    use crate::rng;

    fn random(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(rows, cols, rng::gaussian_vec(&mut r, rows * cols, std)).unwrap()
    }

    fn rtn(w: &Matrix, bits: u8) -> Linear {
        let cfg = QuantConfig::symmetric(bits, Granularity::PerChannel).unwrap();
        Linear::full(w.clone()).with_repr(WeightRepr::Uniform(rtn_quantize(w, &cfg, ScaleMode::Minmax).unwrap())).unwrap()
    }

    fn projector(bits: u8) -> impl Fn(Role, &Matrix, &M64) -> Result<Linear> {
        move |_r, u, _h| Ok(rtn(u, bits))
    }

    fn dims() -> AttnDims {
        AttnDims { n_heads: 4, n_kv_heads: 2, head_dim: 4, rope_base: 1e4 }
    }

    #[test]
    fn cgls_solves_small_least_squares() {
        let a = random(10, 3, 1, 1.0).to_f64();
        let b: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let apply = |x: &M64| (&a * x).as_slice().to_vec();
        let adjoint = |r: &[f64]| a.transpose() * M64::from_column_slice(10, 1, r);
        let x = cgls(&apply, &adjoint, &b, &M64::zeros(3, 1), 10);
        let bm = M64::from_column_slice(10, 1, &b);
        let exact = (a.transpose() * &a).lu().solve(&(a.transpose() * &bm)).unwrap();
        assert!((x - exact).amax() < 1e-8);
    }

    #[test]
    fn qk_adjoint_matches_operator() {
        let d = dims();
        let x = random(6, 16, 2, 1.0);
        let wq = random(16, 16, 3, 0.3);
        let wk = random(16, 8, 4, 0.3);
        let sub = Submodule::qk(d, std::slice::from_ref(&x), std::slice::from_ref(&x), &wq, &wk, Linear::full(wq.clone()), Linear::full(wk.clone())).unwrap();
        // ⟨A w, r⟩ = ⟨w, Aᵀ r⟩ checked by finite differences of J.
        let ws = vec![wq.to_f64(), wk.to_f64()];
        let j0 = sub.objective(&ws);
        assert!(j0 < 1e-20);
        let mut shifted = ws.clone();
        shifted[0][(2, 5)] += 0.1;
        assert!(sub.objective(&shifted) > 0.0);
    }

    #[test]
    fn qk_relaxation_recovers_full_precision_scores() {
        let d = dims();
        let xs: Vec<Matrix> = (0..3).map(|s| random(8, 16, 10 + s, 1.0)).collect();
        let wq = random(16, 16, 20, 0.3);
        let wk = random(16, 8, 21, 0.3);
        let sub = Submodule::qk(d, &xs, &xs, &wq, &wk, rtn(&wq, 2), rtn(&wk, 2)).unwrap();
        let ws: Vec<M64> = sub.members().iter().map(|(_, l)| l.weight().to_f64()).collect();
        let before = sub.objective(&ws);
        let mut flag = false;
        let opts = LpcdOptions { cgls_iters: 60, ..Default::default() };
        let relaxed = sub.relax(0, &ws, &opts, &mut flag).unwrap();
        let after = sub.objective(&[relaxed, ws[1].clone()]);
        assert!(after < before);
    }

    #[test]
    fn vo_and_gud_relaxations_do_not_increase_objective() {
        let d = dims();
        let xs: Vec<Matrix> = (0..2).map(|s| random(6, 16, 30 + s, 1.0)).collect();
        let ps: Vec<Vec<Matrix>> = (0..2)
            .map(|s| {
                (0..4)
                    .map(|h| {
                        let raw = random(6, 6, 40 + 4 * s + h, 1.0);
                        let mut p = Matrix::zeros(6, 6);
                        for t in 0..6 {
                            let z: f32 = (0..=t).map(|u| raw.get(t, u).exp()).sum();
                            for u in 0..=t {
                                p.set(t, u, raw.get(t, u).exp() / z);
                            }
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        let targets: Vec<Matrix> = (0..2).map(|s| random(6, 16, 50 + s, 1.0)).collect();
        let wv = random(16, 8, 60, 0.3);
        let wo = random(16, 16, 61, 0.3);
        let vo = Submodule::vo(d, &xs, &ps, &targets, rtn(&wv, 3), rtn(&wo, 3)).unwrap();
        let (_, rep) = lpcd_refine(&vo, &projector(3), &LpcdOptions::default()).unwrap();
        assert!(rep.steps.iter().all(|s| s.relaxed <= s.before));
        assert!(rep.final_objective <= rep.initial);

        let wg = random(16, 24, 62, 0.3);
        let wu = random(16, 24, 63, 0.3);
        let wd = random(24, 16, 64, 0.3);
        let gud = Submodule::gate_up_down(&xs, &targets, rtn(&wg, 3), rtn(&wu, 3), rtn(&wd, 3)).unwrap();
        let (_, rep) = lpcd_refine(&gud, &projector(3), &LpcdOptions::default()).unwrap();
        assert!(rep.steps.iter().all(|s| s.relaxed <= s.before));
        assert_eq!(rep.steps.iter().map(|s| s.role).take(3).collect::<Vec<_>>(), vec![Role::Up, Role::Gate, Role::Down]);
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let xs = vec![random(5, 6, 70, 1.0)];
        let ts = vec![random(5, 6, 71, 1.0)];
        let wg = random(6, 8, 72, 0.5);
        let wu = random(6, 8, 73, 0.5);
        let wd = random(8, 6, 74, 0.5);
        let sub = Submodule::gate_up_down(&xs, &ts, Linear::full(wg.clone()), Linear::full(wu.clone()), Linear::full(wd.clone())).unwrap();
        let ws = vec![wu.to_f64(), wg.to_f64(), wd.to_f64()];
        let g0 = wg.to_f64();
        let (_, grad) = sub.gate_objective_and_grad(&ws, &g0).unwrap();
        let eps = 1e-5;
        for (i, j) in [(0, 0), (2, 5), (5, 7), (3, 1)] {
            let mut p = g0.clone();
            p[(i, j)] += eps;
            let mut m = g0.clone();
            m[(i, j)] -= eps;
            let fd = (sub.gate_objective_and_grad(&ws, &p).unwrap().0 - sub.gate_objective_and_grad(&ws, &m).unwrap().0) / (2.0 * eps);
            assert!((fd - grad[(i, j)]).abs() <= 1e-4 * grad[(i, j)].abs().max(1.0), "{fd} vs {}", grad[(i, j)]);
        }
    }
}
