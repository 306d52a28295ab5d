//! Post-quantization refiners applied in sequence to a pivot model.

use serde::{Deserialize, Serialize};

use crate::binfact::{refine_alternating, RefineOptions};
use crate::calib::CalibSet;
use crate::error::Result;
use crate::jointq::{jointq_objective, jointq_refine, JointqOptions};
use crate::layerwise::{hessian_objective, qep_target, LpcdOptions, SubmoduleKind};
use crate::metrics::{activation_objective, lowrank_residual_fit, FidelityReport};
use crate::model::{LayerId, Linear, Role, ToyModel, WeightRepr};
use crate::stats::CalibStats;
use crate::tensor::Matrix;

use super::eval::evaluate;
use super::sweep::{base_stats, base_target, paired_inputs, refine_block, SweepOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RefinerSpec {
    Jointq(JointqOptions),
    Lowrank { rank: usize },
    Lpcd(LpcdOptions),
    BinfactRefine(RefineOptions),
}

impl RefinerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RefinerSpec::Jointq(_) => "jointq",
            RefinerSpec::Lowrank { .. } => "lowrank",
            RefinerSpec::Lpcd(_) => "lpcd",
            RefinerSpec::BinfactRefine(_) => "binfact_refine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub layer: LayerId,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub fidelity: FidelityReport,
    /// Per-layer refiner objective, where the stage has one.
    pub layers: Vec<LayerChange>,
}

pub struct RefineContext<'a> {
    pub teacher: &'a ToyModel,
    pub calib: &'a CalibSet,
    pub eval: &'a CalibSet,
    pub sweep: &'a SweepOptions,
}

fn layer_target(ctx: &RefineContext, id: &LayerId, x: &Matrix, x_hat: &Matrix) -> Result<(Matrix, CalibStats)> {
    let mut stats = CalibStats::new(x.cols());
    stats.accumulate(x, x_hat)?;
    let w = ctx.teacher.linear(id)?.weight();
    let t = match &ctx.sweep.qep {
        Some(q) => qep_target(w, &stats, q)?,
        None => w.clone(),
    };
    Ok((t, stats))
}

fn refine_layer(spec: &RefinerSpec, ctx: &RefineContext, lin: &Linear, id: &LayerId, x: &Matrix, x_hat: &Matrix) -> Result<Option<(Linear, f64, f64)>> {
    match (spec, lin.repr()) {
        (RefinerSpec::Jointq(opts), WeightRepr::Uniform(q0)) => {
            let (target, _) = layer_target(ctx, id, x, x_hat)?;
            let wb = base_target(lin, &target)?;
            let xb = lin.transform().transform_activations(x_hat);
            let before = jointq_objective(q0, &wb, &xb, opts.lambda)?;
            let (q, rep) = jointq_refine(q0, &wb, &xb, opts)?;
            let after = *rep.trace.last().unwrap_or(&before);
            Ok(Some((lin.with_repr(WeightRepr::Uniform(q))?, before, after)))
        }
        (RefinerSpec::Lowrank { rank }, repr) if !repr.is_full() => {
            let (target, _) = layer_target(ctx, id, x, x_hat)?;
            let bare = lin.with_adapter(None)?;
            let (n, m) = bare.shape();
            let resid = target.to_f64() - lin.weight().to_f64();
            let before = activation_objective(x_hat, &resid);
            let fit = lowrank_residual_fit(&target, bare.weight(), x_hat, (*rank).min(n.min(m)))?;
            let out = bare.with_adapter(Some(fit))?;
            let after = activation_objective(x_hat, &(target.to_f64() - out.weight().to_f64()));
            if after > before {
                return Ok(Some((lin.clone(), before, before)));
            }
            Ok(Some((out, before, after)))
        }
        (RefinerSpec::BinfactRefine(opts), WeightRepr::Binary(f0)) => {
            let (target, stats) = layer_target(ctx, id, x, x_hat)?;
            let wb = base_target(lin, &target)?;
            let h = base_stats(lin, &stats).gram;
            let before = hessian_objective(&wb, &f0.dequantize(), &h);
            let (f, _) = refine_alternating(f0, &wb, opts, Some(&h))?;
            let f = f.to_storage();
            let after = hessian_objective(&wb, &f.dequantize(), &h);
            if after > before {
                return Ok(Some((lin.clone(), before, before)));
            }
            Ok(Some((lin.with_repr(WeightRepr::Binary(f))?, before, after)))
        }
        _ => Ok(None),
    }
}

/// First member of a submodule, naming it in per-layer records.
fn anchor(kind: SubmoduleKind) -> Role {
    match kind {
        SubmoduleKind::Vo => Role::V,
        SubmoduleKind::GateUpDown => Role::Gate,
        _ => Role::Q,
    }
}

/// Applies one refiner to every eligible layer in execution order.
pub fn apply_refiner(spec: &RefinerSpec, model: &ToyModel, ctx: &RefineContext) -> Result<(ToyModel, Vec<LayerChange>)> {
    let mut out = model.clone();
    let mut changes = Vec::new();
    if let RefinerSpec::Lpcd(lp) = spec {
        for b in 0..model.config().n_layers {
            for r in refine_block(ctx.teacher, &mut out, ctx.calib, b, ctx.sweep, lp)? {
                changes.push(LayerChange { layer: LayerId::new(b, anchor(r.kind)), before: r.initial, after: r.final_objective });
            }
        }
        return Ok((out, changes));
    }
    if let RefinerSpec::Jointq(o) = spec {
        o.validate()?;
    }
    for info in model.layer_graph().layers {
        let id = info.id;
        let lin = out.linear(&id)?.clone();
        if !lin.is_quantized() {
            continue;
        }
        let (x, x_hat) = paired_inputs(ctx.teacher, &out, ctx.calib, &id)?;
        if let Some((new, before, after)) = refine_layer(spec, ctx, &lin, &id, &x, &x_hat)? {
            log::info!("{} {id}: {before:.4e} -> {after:.4e}", spec.name());
            out.set_linear(&id, new)?;
            changes.push(LayerChange { layer: id, before, after });
        }
    }
    Ok((out, changes))
}

/// Runs the refiner chain, evaluating after the pivot and after every stage.
pub fn run_refiners(pivot: &ToyModel, refiners: &[RefinerSpec], ctx: &RefineContext) -> Result<(ToyModel, Vec<StageRecord>)> {
    let mut cur = pivot.clone();
    let mut stages = vec![StageRecord { stage: "pivot".into(), fidelity: evaluate(ctx.teacher, &cur, ctx.eval)?, layers: Vec::new() }];
    for spec in refiners {
        let (next, layers) = apply_refiner(spec, &cur, ctx)?;
        cur = next;
        let fidelity = evaluate(ctx.teacher, &cur, ctx.eval)?;
        log::info!("stage {}: kl {:.4e}", spec.name(), fidelity.kl);
        stages.push(StageRecord { stage: spec.name().into(), fidelity, layers });
    }
    Ok((cur, stages))
}

/// Tab-separated `stage  metric  value` rows.
pub fn stage_table(stages: &[StageRecord]) -> String {
    let mut s = String::from("stage\tmetric\tvalue\n");
    for st in stages {
        let f = &st.fidelity;
        for (k, v) in [("kl", f.kl), ("hidden_cosine", f.hidden_cosine_mean), ("entropy", f.entropy), ("nll", f.nll), ("teacher_nll", f.teacher_nll)] {
            s.push_str(&format!("{}\t{}\t{:.6e}\n", st.stage, k, v));
        }
    }
    s
}
