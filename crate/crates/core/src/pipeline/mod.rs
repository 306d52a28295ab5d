//! End-to-end pipeline: calibration, preprocessing, precision planning,
//! the layer sweep, refiners and evaluation.

pub mod cli;
pub mod config;
pub mod eval;
pub mod ocw;
pub mod refiners;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::autobit::{budget_from_bpw, build_candidates, candidate_grid, plan, ErrorMode, ModuleCandidates, Plan, Solver};
use crate::calib::{collect_layer_inputs, CalibSet};
use crate::error::Result;
use crate::model::ToyModel;
use crate::preprocess::preprocess_model;
use crate::rng;
use crate::tensor::gram;

pub use config::PipelineConfig;
pub use eval::evaluate;
pub use refiners::{run_refiners, stage_table, RefineContext, RefinerSpec, StageRecord};
pub use sweep::{run_layerwise_sweep, LayerSpec, PrecisionMap, SweepOptions, SweepReport};

/// Mixed-precision plan from per-layer weights and calibration activations.
pub fn plan_for_model(model: &ToyModel, calib: &CalibSet, bpw: f64, mode: ErrorMode, solver: Solver) -> Result<Plan> {
    let graph = model.layer_graph();
    let budget = budget_from_bpw(&graph, bpw)?;
    let configs = candidate_grid();
    let mut modules = Vec::with_capacity(graph.len());
    for info in &graph.layers {
        let w = model.linear(&info.id)?.weight();
        let a_diag = match mode {
            ErrorMode::ActAware => {
                let h = gram(&collect_layer_inputs(model, calib, &info.id)?);
                Some(h.diagonal().iter().copied().collect::<Vec<f64>>())
            }
            ErrorMode::Naive => None,
        };
        modules.push(ModuleCandidates {
            layer: info.id,
            params: info.params(),
            candidates: build_candidates(w, &configs, mode, a_diag.as_deref())?,
        });
    }
    plan(&modules, budget, solver)
}

/// Everything one configured run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub teacher: ToyModel,
    pub calib: CalibSet,
    pub eval: CalibSet,
    pub precision: PrecisionMap,
    pub plan: Option<Plan>,
    pub pivot: ToyModel,
    pub sweep: SweepReport,
    pub refined: ToyModel,
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub plan: Option<Plan>,
    pub sweep: SweepReport,
    pub stages: Vec<StageRecord>,
    pub payload_bytes: usize,
}

impl RunOutput {
    pub fn report(&self) -> Result<RunReport> {
        Ok(RunReport {
            seed: self.seed,
            plan: self.plan.clone(),
            sweep: self.sweep.clone(),
            stages: self.stages.clone(),
            payload_bytes: ocw::to_bytes(&self.refined)?.len(),
        })
    }
}

pub fn load_teacher(cfg: &PipelineConfig, seed: u64) -> Result<ToyModel> {
    match &cfg.model.path {
        Some(p) => ocw::load(p),
        None => ToyModel::random(cfg.model.toy.clone(), config::model_seed(&cfg.model, seed)),
    }
}

pub fn resolve_precision(cfg: &PipelineConfig, model: &ToyModel, calib: &CalibSet) -> Result<(PrecisionMap, Option<Plan>)> {
    if let Some(p) = &cfg.plan {
        let plan = Plan::from_json(&std::fs::read_to_string(p)?)?;
        for a in &plan.assignment {
            model.check_layer(&a.layer)?;
        }
        return Ok((PrecisionMap::from_plan(&plan), Some(plan)));
    }
    if let Some(a) = &cfg.autobit {
        let plan = plan_for_model(model, calib, a.bpw, a.mode, a.solver)?;
        return Ok((PrecisionMap::from_plan(&plan), Some(plan)));
    }
    Ok((cfg.precision.clone(), None))
}

/// Preprocessing with the transform seed derived from the run seed.
pub fn preprocess(cfg: &PipelineConfig, model: &ToyModel, calib: &CalibSet, seed: u64) -> Result<ToyModel> {
    let mut opts = cfg.preprocess.clone();
    opts.seed = rng::derive(seed, opts.seed.wrapping_add(5));
    preprocess_model(model, calib, &opts)
}

/// Runs every configured stage.
pub fn run(cfg: &PipelineConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, seed)?;
    let (calib, eval) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
    let prepped = preprocess(cfg, &teacher, &calib, seed)?;
    let (precision, plan) = resolve_precision(cfg, &teacher, &calib)?;
    let (pivot, sweep) = run_layerwise_sweep(&prepped, &calib, &precision, &cfg.sweep)?;
    let ctx = RefineContext { teacher: &prepped, calib: &calib, eval: &eval, sweep: &cfg.sweep };
    let (refined, stages) = run_refiners(&pivot, &cfg.refiners, &ctx)?;
    Ok(RunOutput { seed, teacher, calib, eval, precision, plan, pivot, sweep, refined, stages })
}
