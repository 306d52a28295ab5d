//! Budgeted mixed-precision planning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerGraph, LayerId};
use crate::quant::{quantize_matrix, storage_bytes, Granularity, QuantConfig, ScaleMode, Scheme};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    Naive,
    ActAware,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exhaustive,
    #[default]
    Dp,
    BranchBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigCandidate {
    pub config: QuantConfig,
    pub cost_bytes: u64,
    pub err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCandidates {
    pub layer: LayerId,
    pub params: usize,
    pub candidates: Vec<ConfigCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub layer: LayerId,
    pub candidate: ConfigCandidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub assignment: Vec<Assignment>,
    pub budget: u64,
    pub total_cost: u64,
    pub total_err: f64,
    pub achieved_bpw: f64,
}

impl Plan {
    pub fn config_for(&self, layer: &LayerId) -> Option<QuantConfig> {
        self.assignment.iter().find(|a| &a.layer == layer).map(|a| a.candidate.config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Plan = serde_json::from_str(s)?;
        if plan.total_cost > plan.budget {
            return Err(Error::Format(format!("plan cost {} exceeds its budget {}", plan.total_cost, plan.budget)));
        }
        for a in &plan.assignment {
            a.candidate.config.validate()?;
        }
        Ok(plan)
    }
}

pub const CANDIDATE_BITS: [u8; 7] = [2, 3, 4, 5, 6, 7, 8];
pub const CANDIDATE_GROUP: usize = 128;
pub const MIN_PLAN_BPW: f64 = 2.0;

/// Default symmetric grid: every candidate width at group 128 and per channel.
pub fn candidate_grid() -> Vec<QuantConfig> {
    CANDIDATE_BITS
        .iter()
        .flat_map(|&b| {
            [Granularity::PerGroup(CANDIDATE_GROUP), Granularity::PerChannel]
                .map(|g| QuantConfig::new(b, Scheme::Symmetric, g).expect("valid candidate"))
        })
        .collect()
}

/// Second-order proxy of the loss increase from round-to-nearest under `cfg`.
/// `a_diag` is the input Gram diagonal (one entry per weight row) and
/// `b_diag` the output curvature diagonal, all ones when absent.
pub fn estimate_error(w: &Matrix, cfg: &QuantConfig, mode: ErrorMode, a_diag: Option<&[f64]>, b_diag: Option<&[f64]>) -> Result<f64> {
    let q = quantize_matrix(w, cfg, ScaleMode::Minmax)?.dequantize();
    let (n, m) = w.shape();
    match mode {
        ErrorMode::Naive => Ok(q.sub(w)?.frobenius_sq()),
        ErrorMode::ActAware => {
            let a = a_diag.ok_or_else(|| Error::invalid("activation-aware estimate needs the input Gram diagonal"))?;
            if a.len() != n || b_diag.is_some_and(|b| b.len() != m) {
                return Err(Error::shape("curvature diagonals do not match the weight shape"));
            }
            let mut err = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let d = (q.get(i, j) - w.get(i, j)) as f64;
                    err += a[i] * b_diag.map_or(1.0, |b| b[j]) * d * d;
                }
            }
            Ok(0.5 * err)
        }
    }
}

pub fn build_candidates(w: &Matrix, configs: &[QuantConfig], mode: ErrorMode, a_diag: Option<&[f64]>) -> Result<Vec<ConfigCandidate>> {
    configs
        .iter()
        .map(|cfg| {
            let q = quantize_matrix(w, cfg, ScaleMode::Minmax)?;
            Ok(ConfigCandidate {
                config: *cfg,
                cost_bytes: storage_bytes(&q) as u64,
                err: estimate_error(w, cfg, mode, a_diag, None)?,
            })
        })
        .collect()
}

/// `Σ params·bpw/8` over the graph.
pub fn budget_from_bpw(graph: &LayerGraph, target_bpw: f64) -> Result<u64> {
    if !(target_bpw.is_finite() && target_bpw > 0.0) {
        return Err(Error::Config(format!("target of {target_bpw} bits per weight is not positive")));
    }
    if target_bpw < MIN_PLAN_BPW {
        return Err(Error::Config(format!(
            "mixed-bit allocation is not supported below {MIN_PLAN_BPW} bits per weight (got {target_bpw})"
        )));
    }
    Ok((graph.total_params() as f64 * target_bpw / 8.0).floor() as u64)
}

/// Uniform configuration conventionally quoted at this bit rate.
pub fn uniform_equivalent(target_bpw: f64) -> Option<QuantConfig> {
    if (target_bpw - 4.16).abs() < 1e-9 {
        QuantConfig::new(4, Scheme::Asymmetric, Granularity::PerGroup(CANDIDATE_GROUP)).ok()
    } else if (target_bpw - 4.0).abs() < 1e-9 {
        QuantConfig::new(4, Scheme::Asymmetric, Granularity::PerChannel).ok()
    } else {
        None
    }
}

fn validate(modules: &[ModuleCandidates]) -> Result<()> {
    for m in modules {
        if m.candidates.is_empty() {
            return Err(Error::invalid(format!("{} has no candidate configurations", m.layer)));
        }
        if m.candidates.iter().any(|c| !(c.err.is_finite() && c.err >= 0.0)) {
            return Err(Error::invalid(format!("{} has a non-finite or negative error estimate", m.layer)));
        }
    }
    Ok(())
}

fn min_cost(modules: &[ModuleCandidates]) -> u64 {
    modules.iter().map(|m| m.candidates.iter().map(|c| c.cost_bytes).min().unwrap_or(0)).sum()
}

const EXHAUSTIVE_LIMIT: u128 = 20_000_000;

fn exhaustive(modules: &[ModuleCandidates], budget: u64) -> Result<Vec<usize>> {
    let combos: u128 = modules.iter().map(|m| m.candidates.len() as u128).product();
    if combos > EXHAUSTIVE_LIMIT {
        return Err(Error::Config(format!("exhaustive search over {combos} assignments is too large")));
    }
    let mut idx = vec![0usize; modules.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let cost: u64 = idx.iter().zip(modules).map(|(&k, m)| m.candidates[k].cost_bytes).sum();
        if cost <= budget {
            let err = total_err(modules, &idx);
            if best.as_ref().is_none_or(|(b, _)| err < *b) {
                best = Some((err, idx.clone()));
            }
        }
        let mut l = 0;
        loop {
            if l == modules.len() {
                return best.map(|b| b.1).ok_or(Error::Infeasible { budget, min_cost: min_cost(modules) });
            }
            idx[l] += 1;
            if idx[l] < modules[l].candidates.len() {
                break;
            }
            idx[l] = 0;
            l += 1;
        }
    }
}

fn dp(modules: &[ModuleCandidates], budget: u64) -> Result<Vec<usize>> {
    let base = min_cost(modules);
    if base > budget {
        return Err(Error::Infeasible { budget, min_cost: base });
    }
    let extra: Vec<Vec<u64>> = modules
        .iter()
        .map(|m| {
            let lo = m.candidates.iter().map(|c| c.cost_bytes).min().unwrap_or(0);
            m.candidates.iter().map(|c| c.cost_bytes - lo).collect()
        })
        .collect();
    let span: u64 = extra.iter().map(|e| e.iter().copied().max().unwrap_or(0)).sum();
    let cap = (budget - base).min(span) as usize;
    // best[c] = least error of the modules so far with extra cost at most c.
    let mut best = vec![0.0f64; cap + 1];
    let mut choice: Vec<Vec<u16>> = Vec::with_capacity(modules.len());
    for (m, ex) in modules.iter().zip(&extra) {
        let mut next = vec![f64::INFINITY; cap + 1];
        let mut pick = vec![u16::MAX; cap + 1];
        for c in 0..=cap {
            for (k, cand) in m.candidates.iter().enumerate() {
                let e = ex[k] as usize;
                if e > c {
                    continue;
                }
                let v = best[c - e] + cand.err;
                if v < next[c] {
                    next[c] = v;
                    pick[c] = k as u16;
                }
            }
        }
        best = next;
        choice.push(pick);
    }
    let mut idx = vec![0usize; modules.len()];
    let mut c = cap;
    for l in (0..modules.len()).rev() {
        let k = choice[l][c] as usize;
        idx[l] = k;
        c -= extra[l][k] as usize;
    }
    Ok(idx)
}

fn branch_bound(modules: &[ModuleCandidates], budget: u64) -> Result<Vec<usize>> {
    let base = min_cost(modules);
    if base > budget {
        return Err(Error::Infeasible { budget, min_cost: base });
    }
    let l = modules.len();
    let mut rest_err = vec![0.0; l + 1];
    let mut rest_cost = vec![0u64; l + 1];
    for i in (0..l).rev() {
        let c = &modules[i].candidates;
        rest_err[i] = rest_err[i + 1] + c.iter().map(|c| c.err).fold(f64::INFINITY, f64::min);
        rest_cost[i] = rest_cost[i + 1] + c.iter().map(|c| c.cost_bytes).min().unwrap_or(0);
    }
    let order: Vec<Vec<usize>> = modules
        .iter()
        .map(|m| {
            let mut o: Vec<usize> = (0..m.candidates.len()).collect();
            o.sort_by(|&a, &b| m.candidates[a].err.total_cmp(&m.candidates[b].err).then(a.cmp(&b)));
            o
        })
        .collect();
    struct Ctx<'a> {
        modules: &'a [ModuleCandidates],
        order: &'a [Vec<usize>],
        rest_err: &'a [f64],
        rest_cost: &'a [u64],
        budget: u64,
        best: f64,
        best_idx: Vec<usize>,
        cur: Vec<usize>,
    }
    fn go(ctx: &mut Ctx, depth: usize, err: f64, cost: u64) {
        if depth == ctx.modules.len() {
            let e = total_err(ctx.modules, &ctx.cur);
            if e < ctx.best {
                ctx.best = e;
                ctx.best_idx = ctx.cur.clone();
            }
            return;
        }
        for &k in &ctx.order[depth] {
            let c = &ctx.modules[depth].candidates[k];
            let ncost = cost + c.cost_bytes;
            if ncost + ctx.rest_cost[depth + 1] > ctx.budget {
                continue;
            }
            let nerr = err + c.err;
            // Slack keeps ties reachable despite summation order.
            if nerr + ctx.rest_err[depth + 1] > ctx.best * (1.0 + 1e-12) {
                continue;
            }
            ctx.cur[depth] = k;
            go(ctx, depth + 1, nerr, ncost);
        }
    }
    let mut ctx = Ctx {
        modules,
        order: &order,
        rest_err: &rest_err,
        rest_cost: &rest_cost,
        budget,
        best: f64::INFINITY,
        best_idx: Vec::new(),
        cur: vec![0; l],
    };
    go(&mut ctx, 0, 0.0, 0);
    Ok(ctx.best_idx)
}

fn total_err(modules: &[ModuleCandidates], idx: &[usize]) -> f64 {
    idx.iter().zip(modules).map(|(&k, m)| m.candidates[k].err).sum()
}

/// Minimizes `Σ err` subject to `Σ cost ≤ budget`, one candidate per module.
pub fn plan(modules: &[ModuleCandidates], budget: u64, solver: Solver) -> Result<Plan> {
    validate(modules)?;
    let floor = min_cost(modules);
    if floor > budget {
        return Err(Error::Infeasible { budget, min_cost: floor });
    }
    let idx = match solver {
        Solver::Exhaustive => exhaustive(modules, budget)?,
        Solver::Dp => dp(modules, budget)?,
        Solver::BranchBound => branch_bound(modules, budget)?,
    };
    let assignment: Vec<Assignment> = idx
        .iter()
        .zip(modules)
        .map(|(&k, m)| Assignment { layer: m.layer, candidate: m.candidates[k] })
        .collect();
    let total_cost: u64 = assignment.iter().map(|a| a.candidate.cost_bytes).sum();
    assert!(total_cost <= budget, "plan exceeds its budget");
    let params: usize = modules.iter().map(|m| m.params).sum();
    Ok(Plan {
        assignment,
        budget,
        total_cost,
        total_err: total_err(modules, &idx),
        achieved_bpw: if params == 0 { 0.0 } else { total_cost as f64 * 8.0 / params as f64 },
    })
}
