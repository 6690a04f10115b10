//! Per-sample training losses on the tape.
//!
//! All KD losses are `τ² · KL(·‖·)` between temperature-softened
//! distributions. Teacher logits arrive as plain tensors, so the teacher side
//! is a constant and gradients flow into the student only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Argument order of the KL divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(teacher ‖ student)`. Averaging softened teacher outputs and
    /// averaging per-teacher losses give the same student gradient here.
    #[default]
    TeacherToStudent,
    /// `KL(student ‖ teacher)`.
    StudentToTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub tau: f64,
    pub alpha: f64,
    pub direction: KdDirection,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            alpha: 1.0,
            direction: KdDirection::TeacherToStudent,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_alpha(self.alpha)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// `−log softmax(logits)[y]` per sample.
pub fn cross_entropy(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let c = tape.value(logits).cols();
    if let Some(&bad) = y.iter().find(|&&v| v >= c) {
        return Err(Error::Parameter(format!("label {bad} out of range for {c} classes")));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, y)?;
    Ok(tape.scale(picked, -1.0))
}

/// Log of the softened distribution, `log σ(z / τ)`, row-wise.
pub fn softened_log_probs(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    logits.scale(1.0 / tau).log_softmax_rows()
}

/// Row-wise log of the mean of several distributions given as log-probs,
/// computed by log-sum-exp.
pub fn mean_log_probs(log_probs: &[Tensor]) -> Result<Tensor> {
    let first = log_probs
        .first()
        .ok_or_else(|| Error::Parameter("ensemble KD needs at least one teacher".into()))?;
    if log_probs.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::Dimension("teacher outputs disagree in shape".into()));
    }
    let ln_m = (log_probs.len() as f64).ln();
    let mut out = first.clone();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let max = log_probs.iter().map(|t| t.data()[k]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let s: f64 = log_probs.iter().map(|t| (t.data()[k] - max).exp()).sum();
        *o = max + s.ln() - ln_m;
    }
    Ok(out)
}

/// `KL(p ‖ q)` per row for plain probability matrices (`0 · log 0 = 0`).
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let terms = p.zip_with(q, "kl", |pv, qv| if pv == 0.0 { 0.0 } else { pv * (pv.ln() - qv.ln()) })?;
    terms.sum_rows()
}

/// `τ² · KL(p ‖ q)` for already-softened `p`, `q`.
pub fn scaled_kl(p: &Tensor, q: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    Ok(kl_divergence(p, q)?.scale(tau * tau))
}

/// Core KD term against a fixed target given by its log-probs.
fn kd_against(tape: &mut Tape, student_logits: Var, target_logp: &Tensor, tau: f64, direction: KdDirection) -> Result<Var> {
    let zs = tape.value(student_logits);
    if zs.shape() != target_logp.shape() {
        return Err(Error::Dimension(format!(
            "student logits {:?} vs teacher outputs {:?}",
            zs.shape(),
            target_logp.shape()
        )));
    }
    let scaled = tape.scale(student_logits, 1.0 / tau);
    let logq = tape.log_softmax(scaled)?;
    let kl = match direction {
        KdDirection::TeacherToStudent => {
            let p = target_logp.map(f64::exp);
            let neg_entropy = p
                .zip_with(target_logp, "entropy", |pv, lp| if pv == 0.0 { 0.0 } else { pv * lp })?
                .sum_rows()?;
            let pc = tape.constant(p);
            let cross = tape.mul(pc, logq)?;
            let cross = tape.sum_rows(cross)?;
            let ne = tape.constant(neg_entropy);
            tape.sub(ne, cross)?
        }
        KdDirection::StudentToTeacher => {
            let q = tape.exp(logq);
            let lp = tape.constant(target_logp.clone());
            let diff = tape.sub(logq, lp)?;
            let terms = tape.mul(q, diff)?;
            tape.sum_rows(terms)?
        }
    };
    Ok(tape.scale(kl, tau * tau))
}

/// Single-teacher KD loss per sample.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    tau: f64,
    direction: KdDirection,
) -> Result<Var> {
    let target = softened_log_probs(teacher_logits, tau)?;
    kd_against(tape, student_logits, &target, tau, direction)
}

/// `α · kd + (1 − α) · cls`.
pub fn combined_loss(tape: &mut Tape, kd: Var, cls: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = tape.scale(kd, alpha);
    let b = tape.scale(cls, 1.0 - alpha);
    tape.add(a, b)
}

/// KD against the mean of the teachers' softened outputs, per sample.
pub fn ensemble_kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &[Tensor],
    tau: f64,
    direction: KdDirection,
) -> Result<Var> {
    if teacher_logits.is_empty() {
        return Err(Error::Parameter("ensemble KD needs at least one teacher".into()));
    }
    let logps = teacher_logits
        .iter()
        .map(|t| softened_log_probs(t, tau))
        .collect::<Result<Vec<_>>>()?;
    let target = mean_log_probs(&logps)?;
    kd_against(tape, student_logits, &target, tau, direction)
}
