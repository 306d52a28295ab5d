//! Teacher-student fidelity on held-out sequences.

use crate::calib::CalibSet;
use crate::error::{Error, Result};
use crate::metrics::{entropy, hidden_alignment, kl_divergence, nll, FidelityReport, LayerError};
use crate::model::ToyModel;
use crate::tensor::Matrix;

use super::sweep::{output_error, paired_inputs};

pub fn evaluate(teacher: &ToyModel, student: &ToyModel, eval: &CalibSet) -> Result<FidelityReport> {
    if eval.sequences.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if teacher.config() != student.config() {
        return Err(Error::shape("teacher and student configurations differ"));
    }
    let nb = teacher.config().n_layers;
    let (mut kl, mut ent, mut s_nll, mut t_nll, mut rows) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut th: Vec<Vec<Matrix>> = vec![Vec::new(); nb];
    let mut sh: Vec<Vec<Matrix>> = vec![Vec::new(); nb];
    for seq in &eval.sequences {
        let t = teacher.forward_with_taps(seq)?;
        let s = student.forward_with_taps(seq)?;
        let r = seq.len();
        kl += kl_divergence(&t.logits, &s.logits, 1.0)? * r as f64;
        ent += entropy(&s.logits) * r as f64;
        s_nll += nll(&s.logits, seq)?;
        t_nll += nll(&t.logits, seq)?;
        rows += r;
        for (b, (tb, sb)) in t.blocks.into_iter().zip(s.blocks).enumerate() {
            th[b].push(tb.output);
            sh[b].push(sb.output);
        }
    }
    let th: Vec<Matrix> = th.iter().map(|v| Matrix::vstack(v)).collect::<Result<_>>()?;
    let sh: Vec<Matrix> = sh.iter().map(|v| Matrix::vstack(v)).collect::<Result<_>>()?;
    let (hidden_cosine, hidden_cosine_mean) = hidden_alignment(&th, &sh)?;
    let mut layer_errors = Vec::new();
    for info in teacher.layer_graph().layers {
        let (x, x_hat) = paired_inputs(teacher, student, eval, &info.id)?;
        let (err, base) = output_error(&x, teacher.linear(&info.id)?.weight(), &x_hat, student.linear(&info.id)?.weight());
        layer_errors.push(LayerError { layer: info.id, error: err / base.max(f64::MIN_POSITIVE) });
    }
    let n = eval.sequences.len() as f64;
    Ok(FidelityReport {
        kl: kl / rows as f64,
        hidden_cosine,
        hidden_cosine_mean,
        entropy: ent / rows as f64,
        nll: s_nll / n,
        teacher_nll: t_nll / n,
        layer_errors,
    })
}
