//! Per-sample teacher weights from gradient alignment with a biased model.
//!
//! For sample `i` and teacher `t`, the student's KD-loss gradient against
//! `t` is compared with its KD-loss gradient against the biased model `b`:
//!
//! ```text
//! G_t(i) = ⟨∇ℓ_t(i) / ‖∇ℓ_t(i)‖, ∇ℓ_b(i) / ‖∇ℓ_b(i)‖⟩
//! W_t(i) = 1 − G_t(i)                       ∈ [0, 2]
//! wKD(i) = Σ_t W_t(i) · ℓ_t(i) / Σ_t W_t(i)
//! ```
//!
//! Teachers that would pull the student the same way as the biased model get
//! weight near 0; teachers pulling the opposite way get weight near 2.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{kd_loss, KdConfig};
use crate::model::{BoundMlp, GradScope, Mlp};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingConfig {
    pub normalize_gradients: bool,
    pub grad_scope: GradScope,
    pub zero_weight_epsilon: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            normalize_gradients: true,
            grad_scope: GradScope::AllParams,
            zero_weight_epsilon: 1e-8,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zero_weight_epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "zero_weight_epsilon must be > 0, got {}",
                self.zero_weight_epsilon
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub sample: usize,
    pub teacher: usize,
    pub alignment: f64,
    pub weight: f64,
}

/// Flattened gradient of one per-sample scalar loss over `scope`.
///
/// A loss that does not depend on the student yields the zero vector.
pub fn per_sample_grad(tape: &mut Tape, student: &BoundMlp, loss_i: Var, scope: GradScope) -> Result<Tensor> {
    if !tape.value(loss_i).is_scalar() {
        return Err(Error::Contract(format!(
            "per-sample loss must be a scalar, got shape {:?}",
            tape.value(loss_i).shape()
        )));
    }
    if !tape.requires_grad(loss_i) {
        let params = student.params();
        let scoped = match scope {
            GradScope::AllParams => params,
            GradScope::LastLayer => &params[params.len() - 1..],
        };
        let len = scoped.iter().map(|&(w, b)| tape.value(w).len() + tape.value(b).len()).sum();
        return Ok(Tensor::zeros(&[len]));
    }
    tape.backward(loss_i)?;
    student.flatten_grads_scoped(tape, scope)
}

/// Cosine similarity (or the raw dot product when `normalize` is false).
/// A zero vector on either side gives 0.
pub fn alignment(g_t: &Tensor, g_b: &Tensor, normalize: bool) -> Result<f64> {
    if g_t.len() != g_b.len() {
        return Err(Error::Dimension(format!(
            "gradient lengths differ: {} vs {}",
            g_t.len(),
            g_b.len()
        )));
    }
    if !normalize {
        return g_t.dot(g_b);
    }
    let (nt, nb) = (g_t.norm(), g_b.norm());
    if nt == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let cos = g_t
        .data()
        .iter()
        .zip(g_b.data())
        .map(|(a, b)| (a / nt) * (b / nb))
        .sum::<f64>();
    Ok(cos.clamp(-1.0, 1.0))
}

/// `W_t = 1 − alignment_t`.
pub fn teacher_weights(alignments: &[f64]) -> Vec<f64> {
    alignments.iter().map(|a| 1.0 - a).collect()
}

/// Per-sample weights normalized to sum to one; rows whose total is below
/// `epsilon` fall back to the uniform `1/M`.
pub fn normalized_weights(weights: &Tensor, epsilon: f64) -> Result<Tensor> {
    if weights.shape().len() != 2 {
        return Err(Error::Dimension(format!("weights must be [batch×M], got {:?}", weights.shape())));
    }
    if let Some(w) = weights.data().iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Contract(format!("teacher weights must be ≥ 0, got {w}")));
    }
    let m = weights.cols();
    let mut out = weights.clone();
    for r in out.data_mut().chunks_exact_mut(m) {
        let total: f64 = r.iter().sum();
        if total < epsilon {
            r.fill(1.0 / m as f64);
        } else {
            r.iter_mut().for_each(|w| *w /= total);
        }
    }
    Ok(out)
}

/// `Σ_t W_t ℓ_t / Σ_t W_t` per sample, with the uniform-mean fallback.
/// Gradients flow through the losses only; weights are constants.
pub fn weighted_kd_loss(tape: &mut Tape, per_teacher_losses: Var, weights: &Tensor, epsilon: f64) -> Result<Var> {
    let shape = tape.value(per_teacher_losses).shape();
    if shape != weights.shape() {
        return Err(Error::Dimension(format!(
            "losses {:?} and weights {:?} differ",
            shape,
            weights.shape()
        )));
    }
    let w = normalized_weights(weights, epsilon)?;
    let wc = tape.constant(w);
    let prod = tape.mul(per_teacher_losses, wc)?;
    tape.sum_rows(prod)
}

/// Alignments and weights of every teacher for every row of `x`, evaluated
/// at the student's current parameters. Returns `[batch×M]` tensors.
///
/// Per-sample gradients are taken one sample at a time on a fresh tape.
pub fn batch_alignments(
    student: &Mlp,
    x: &Tensor,
    teacher_logits: &[Tensor],
    biased_logits: &Tensor,
    kd: &KdConfig,
    cfg: &WeightingConfig,
) -> Result<(Tensor, Tensor)> {
    let m = teacher_logits.len();
    let n = x.rows();
    let mut align = Vec::with_capacity(n * m);
    for i in 0..n {
        let xi = Tensor::matrix(1, x.cols(), x.row(i).to_vec())?;
        let row_of = |t: &Tensor| Tensor::matrix(1, t.cols(), t.row(i).to_vec());

        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let xv = tape.constant(xi);
        let z = bound.forward(&mut tape, xv)?;

        let lb = kd_loss(&mut tape, z, &row_of(biased_logits)?, kd.tau, kd.direction)?;
        let lb = tape.sum(lb);
        let g_b = per_sample_grad(&mut tape, &bound, lb, cfg.grad_scope)?;
        for t in teacher_logits {
            let lt = kd_loss(&mut tape, z, &row_of(t)?, kd.tau, kd.direction)?;
            let lt = tape.sum(lt);
            let g_t = per_sample_grad(&mut tape, &bound, lt, cfg.grad_scope)?;
            align.push(alignment(&g_t, &g_b, cfg.normalize_gradients)?);
        }
    }
    let align = Tensor::matrix(n, m, align)?;
    let weights = align.map(|a| 1.0 - a);
    Ok((align, weights))
}

/// Writes `sample,teacher,alignment,weight` rows.
pub fn write_alignment_csv(records: &[AlignmentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}
