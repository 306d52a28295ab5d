//! Sequential layer sweep over a full-precision reference and an
//! incrementally quantized copy.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binfact::{msvid_init, rank_for_bpw, refine_alternating, BinaryFormat, RefineOptions};
use crate::calib::CalibSet;
use crate::error::{Error, Result};
use crate::layerwise::{
    gptq_quantize, lpcd_refine, qep_target, GptqOptions, LpcdOptions, LpcdReport, Method, QepOptions, Submodule, SubmoduleKind,
};
use crate::layerwise::lpcd::AttnDims;
use crate::model::{BlockTaps, LayerId, Linear, Role, ToyModel, WeightRepr};
use crate::quant::{quantize_matrix, Granularity, QuantConfig, Scheme};
use crate::stats::CalibStats;
use crate::tensor::Matrix;
use crate::autobit::Plan;

/// Target representation of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Left in full precision.
    Passthrough,
    Uniform {
        bits: u8,
        #[serde(default = "default_scheme")]
        scheme: Scheme,
        #[serde(default = "default_granularity")]
        granularity: Granularity,
    },
    Dbf {
        bpw: f64,
    },
    Mdbf {
        bpw: f64,
        #[serde(default = "default_ell")]
        ell: usize,
    },
}

fn default_scheme() -> Scheme {
    Scheme::Asymmetric
}
fn default_granularity() -> Granularity {
    Granularity::PerGroup(32)
}
fn default_ell() -> usize {
    2
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec::Uniform { bits: 4, scheme: default_scheme(), granularity: default_granularity() }
    }
}

impl LayerSpec {
    pub fn uniform(cfg: QuantConfig) -> Self {
        LayerSpec::Uniform { bits: cfg.bits, scheme: cfg.scheme, granularity: cfg.granularity }
    }

    pub fn quant_config(&self) -> Result<Option<QuantConfig>> {
        match *self {
            LayerSpec::Uniform { bits, scheme, granularity } => QuantConfig::new(bits, scheme, granularity).map(Some),
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Passthrough => Ok(()),
            LayerSpec::Uniform { .. } => self.quant_config().map(|_| ()),
            LayerSpec::Dbf { bpw } | LayerSpec::Mdbf { bpw, .. } if !(bpw > 0.0 && bpw <= 2.0) => {
                Err(Error::Config(format!("binary-factor target of {bpw} bits per weight outside (0, 2]")))
            }
            LayerSpec::Mdbf { ell: 0, .. } => Err(Error::Config("envelope rank must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Per-layer specs: a default plus explicit overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionMap {
    #[serde(default)]
    pub default: LayerSpec,
    #[serde(default)]
    pub overrides: BTreeMap<LayerId, LayerSpec>,
}

impl PrecisionMap {
    pub fn uniform(spec: LayerSpec) -> Self {
        Self { default: spec, overrides: BTreeMap::new() }
    }

    pub fn from_plan(plan: &Plan) -> Self {
        Self {
            default: LayerSpec::Passthrough,
            overrides: plan.assignment.iter().map(|a| (a.layer, LayerSpec::uniform(a.candidate.config))).collect(),
        }
    }

    pub fn get(&self, id: &LayerId) -> LayerSpec {
        self.overrides.get(id).copied().unwrap_or(self.default)
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        self.default.validate()?;
        for (id, spec) in &self.overrides {
            model.check_layer(id)?;
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub gptq: GptqOptions,
    #[serde(default)]
    pub qep: Option<QepOptions>,
    #[serde(default)]
    pub lpcd: Option<LpcdOptions>,
    #[serde(default)]
    pub binfact: RefineOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { method: Method::Gptq, gptq: GptqOptions::default(), qep: None, lpcd: None, binfact: RefineOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: LayerId,
    /// `‖X̂Ŵ − XW‖²` over the calibration tokens.
    pub objective: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpcdRecord {
    pub block: usize,
    pub kind: SubmoduleKind,
    pub initial: f64,
    pub final_objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub layers: Vec<LayerRecord>,
    pub lpcd: Vec<LpcdRecord>,
}

/// Per-sequence inputs of one layer in the reference and the student.
pub fn paired_inputs(fp: &ToyModel, q: &ToyModel, calib: &CalibSet, id: &LayerId) -> Result<(Matrix, Matrix)> {
    let (mut xs, mut xh) = (Vec::new(), Vec::new());
    for seq in &calib.sequences {
        xs.push(fp.forward_with_taps(seq)?.layer_input(id).clone());
        xh.push(q.forward_with_taps(seq)?.layer_input(id).clone());
    }
    Ok((Matrix::vstack(&xs)?, Matrix::vstack(&xh)?))
}

/// `(‖X̂Ŵ − XW‖², ‖XW‖²)`.
pub fn output_error(x: &Matrix, w: &Matrix, x_hat: &Matrix, w_hat: &Matrix) -> (f64, f64) {
    let y = x.to_f64() * w.to_f64();
    let yh = x_hat.to_f64() * w_hat.to_f64();
    ((yh - &y).norm_squared(), y.norm_squared())
}

/// Dense target with any adapter contribution removed, mapped to the base space.
pub(crate) fn base_target(lin: &Linear, target: &Matrix) -> Result<Matrix> {
    let t = match lin.adapter() {
        Some(ad) => target.sub(&ad.product())?,
        None => target.clone(),
    };
    lin.transform().to_base(&t)
}

pub(crate) fn base_stats(lin: &Linear, stats: &CalibStats) -> CalibStats {
    match lin.transform().input_map(stats.dim()) {
        Some(p) => stats.transformed(&p),
        None => stats.clone(),
    }
}

pub(crate) fn base_gram(lin: &Linear, h: &DMatrix<f64>) -> DMatrix<f64> {
    match lin.transform().input_map(h.nrows()) {
        Some(p) => p.transpose() * h * p,
        None => h.clone(),
    }
}

/// Quantizes a base-space target under `spec`, weighting by `h_base`.
pub(crate) fn quantize_base(target: &Matrix, h_base: &DMatrix<f64>, spec: &LayerSpec, opts: &SweepOptions) -> Result<Option<WeightRepr>> {
    let (n, m) = target.shape();
    Ok(match *spec {
        LayerSpec::Passthrough => None,
        LayerSpec::Uniform { .. } => {
            let cfg = spec.quant_config()?.expect("uniform spec");
            let q = match opts.method {
                Method::Rtn => quantize_matrix(target, &cfg, opts.gptq.scale_mode)?,
                Method::Gptq => gptq_quantize(target, h_base, &cfg, &opts.gptq)?,
            };
            Some(WeightRepr::Uniform(q))
        }
        LayerSpec::Dbf { bpw } | LayerSpec::Mdbf { bpw, .. } => {
            let (format, ell) = match *spec {
                LayerSpec::Mdbf { ell, .. } => (BinaryFormat::Mdbf, ell),
                _ => (BinaryFormat::Dbf, 1),
            };
            let rank = rank_for_bpw(n, m, bpw, format, ell)?;
            let init = msvid_init(target, rank, ell, format)?;
            let (f, _) = refine_alternating(&init, target, &opts.binfact, Some(h_base))?;
            Some(WeightRepr::Binary(f.to_storage()))
        }
    })
}

fn with_layer(id: &LayerId, r: Result<Linear>) -> Result<Linear> {
    r.map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("{id}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{id}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("{id}: {m}")),
        other => other,
    })
}

/// Quantizes one layer from paired inputs.
pub fn quantize_one(fp_lin: &Linear, cur: &Linear, x: &Matrix, x_hat: &Matrix, spec: &LayerSpec, opts: &SweepOptions) -> Result<Linear> {
    if *spec == LayerSpec::Passthrough {
        return Ok(cur.clone());
    }
    let mut stats = CalibStats::new(x.cols());
    stats.accumulate(x, x_hat)?;
    let w = fp_lin.weight();
    let target = match &opts.qep {
        Some(q) => qep_target(w, &stats, q)?,
        None => w.clone(),
    };
    let base = base_target(cur, &target)?;
    let h = base_stats(cur, &stats).gram;
    let repr = quantize_base(&base, &h, spec, opts)?.expect("non-passthrough spec");
    Linear::new(repr, cur.transform().clone(), cur.adapter().cloned())
}

/// Quantizes every layer in execution order, optionally refining each
/// finished block with coordinate descent.
pub fn run_layerwise_sweep(fp: &ToyModel, calib: &CalibSet, precision: &PrecisionMap, opts: &SweepOptions) -> Result<(ToyModel, SweepReport)> {
    precision.validate(fp)?;
    opts.gptq.validate()?;
    if let Some(q) = &opts.qep {
        q.validate()?;
    }
    if calib.sequences.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let mut q = fp.clone();
    let mut report = SweepReport::default();
    for info in fp.layer_graph().layers {
        let id = info.id;
        let spec = precision.get(&id);
        let (x, x_hat) = paired_inputs(fp, &q, calib, &id)?;
        let lin = with_layer(&id, quantize_one(fp.linear(&id)?, q.linear(&id)?, &x, &x_hat, &spec, opts))?;
        let (err, base) = output_error(&x, fp.linear(&id)?.weight(), &x_hat, lin.weight());
        log::info!("{id}: output error {:.4e} (relative {:.4e})", err, err / base.max(f64::MIN_POSITIVE));
        report.layers.push(LayerRecord { layer: id, objective: err, relative: err / base.max(f64::MIN_POSITIVE) });
        q.set_linear(&id, lin)?;
        if id.role == Role::Down {
            if let Some(lp) = &opts.lpcd {
                report.lpcd.extend(refine_block(fp, &mut q, calib, id.block, opts, lp)?);
            }
        }
    }
    Ok((q, report))
}

fn block_taps(model: &ToyModel, calib: &CalibSet, block: usize) -> Result<Vec<BlockTaps>> {
    calib
        .sequences
        .iter()
        .map(|s| Ok(model.forward_with_taps(s)?.blocks.swap_remove(block)))
        .collect()
}

/// Coordinate-descent refinement of one block. Submodules with a member
/// that is not uniformly quantized are skipped.
pub fn refine_block(
    fp: &ToyModel,
    q: &mut ToyModel,
    calib: &CalibSet,
    block: usize,
    opts: &SweepOptions,
    lp: &LpcdOptions,
) -> Result<Vec<LpcdRecord>> {
    let dims = AttnDims::from_config(fp.config());
    let fp_taps = block_taps(fp, calib, block)?;
    let fpw = |r: Role| fp.blocks()[block].weight(r).clone();
    let mut records = Vec::new();
    for kind in [SubmoduleKind::Qk, SubmoduleKind::Vo, SubmoduleKind::GateUpDown] {
        let roles: &[Role] = match kind {
            SubmoduleKind::Qk => &[Role::Q, Role::K],
            SubmoduleKind::Vo => &[Role::V, Role::O],
            _ => &[Role::Gate, Role::Up, Role::Down],
        };
        let ids: Vec<LayerId> = roles.iter().map(|&r| LayerId::new(block, r)).collect();
        let specs: Vec<(Role, QuantConfig)> = match ids
            .iter()
            .map(|id| match q.linear(id)?.repr() {
                WeightRepr::Uniform(m) => Ok(Some((id.role, *m.config()))),
                _ => Ok(None),
            })
            .collect::<Result<Option<Vec<_>>>>()?
        {
            Some(s) => s,
            None => continue,
        };
        let q_taps = block_taps(q, calib, block)?;
        let cur = |r: Role| q.blocks()[block].linear(r).clone();
        let xh = |f: fn(&BlockTaps) -> &Matrix| q_taps.iter().map(|t| f(t).clone()).collect::<Vec<_>>();
        let sub = match kind {
            SubmoduleKind::Qk => {
                let xf: Vec<Matrix> = fp_taps.iter().map(|t| t.attn_in.clone()).collect();
                Submodule::qk(dims, &xh(|t| &t.attn_in), &xf, &fpw(Role::Q), &fpw(Role::K), cur(Role::Q), cur(Role::K))?
            }
            SubmoduleKind::Vo => {
                let wo = fpw(Role::O);
                let target = fp_taps
                    .iter()
                    .zip(&q_taps)
                    .map(|(f, s)| f.o_in.matmul(&wo)?.add(&f.input)?.sub(&s.input))
                    .collect::<Result<Vec<_>>>()?;
                let probs: Vec<Vec<Matrix>> = q_taps.iter().map(|t| t.probs.clone()).collect();
                Submodule::vo(dims, &xh(|t| &t.attn_in), &probs, &target, cur(Role::V), cur(Role::O))?
            }
            _ => {
                let wd = fpw(Role::Down);
                let target = fp_taps
                    .iter()
                    .zip(&q_taps)
                    .map(|(f, s)| f.down_in.matmul(&wd)?.add(&f.mid)?.sub(&s.mid))
                    .collect::<Result<Vec<_>>>()?;
                Submodule::gate_up_down(&xh(|t| &t.ffn_in), &target, cur(Role::Gate), cur(Role::Up), cur(Role::Down))?
            }
        };
        let members: BTreeMap<Role, Linear> = roles.iter().map(|&r| (r, cur(r))).collect();
        let project = |role: Role, u: &Matrix, h: &DMatrix<f64>| -> Result<Linear> {
            let lin = &members[&role];
            let cfg = specs.iter().find(|(r, _)| *r == role).expect("member spec").1;
            let base = base_target(lin, u)?;
            let hb = base_gram(lin, h);
            let repr = quantize_base(&base, &hb, &LayerSpec::uniform(cfg), opts)?.expect("uniform");
            Linear::new(repr, lin.transform().clone(), lin.adapter().cloned())
        };
        let (out, rep): (_, LpcdReport) = lpcd_refine(&sub, &project, lp)?;
        log::info!("block {block} {kind:?}: objective {:.4e} -> {:.4e}", rep.initial, rep.final_objective);
        for (role, lin) in out {
            q.set_linear(&LayerId::new(block, role), lin)?;
        }
        records.push(LpcdRecord { block, kind, initial: rep.initial, final_objective: rep.final_objective });
    }
    Ok(records)
}
