//! Activation-aware layer-wise solvers.

pub mod gptq;
pub mod lpcd;
pub mod qep;

use serde::{Deserialize, Serialize};

pub use gptq::{gptq_quantize, hessian_objective, rtn_quantize, GptqOptions};
pub use lpcd::{lpcd_refine, LpcdOptions, LpcdReport, Submodule, SubmoduleKind};
pub use qep::{qep_target, QepOptions};

use crate::error::Result;
use crate::quant::{quantize_matrix, QuantConfig, QuantizedMatrix};
use crate::stats::CalibStats;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rtn,
    #[default]
    Gptq,
}

/// Quantizes one layer from its calibration statistics: optional target
/// correction, then the base quantizer.
pub fn quantize_layer(
    w: &Matrix,
    stats: &CalibStats,
    method: Method,
    qep: Option<&QepOptions>,
    cfg: &QuantConfig,
    gptq: &GptqOptions,
) -> Result<QuantizedMatrix> {
    let target = match qep {
        Some(opts) => qep_target(w, stats, opts)?,
        None => w.clone(),
    };
    match method {
        Method::Rtn => quantize_matrix(&target, cfg, gptq.scale_mode),
        Method::Gptq => gptq_quantize(&target, &stats.gram, cfg, gptq),
    }
}
