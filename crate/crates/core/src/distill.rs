//! Temperature-softened distillation losses and the distillation schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discrepancy::smoothed_ce;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    pub tau: f64,
    pub lambda_cls: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Multiply both KL terms by τ².
    pub kd_tau_squared: bool,
    /// Use KL(teacher ‖ student) instead of KL(student ‖ teacher).
    pub kd_kl_reverse: bool,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            lambda_cls: 0.8,
            alpha1: 0.1,
            alpha2: 0.9,
            kd_tau_squared: true,
            kd_kl_reverse: false,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_cls) {
            return Err(Error::InvalidArgument(format!("lambda_cls {} outside [0, 1]", self.lambda_cls)));
        }
        check_alphas(self.alpha1, self.alpha2)
    }
}

fn check_alphas(a1: f64, a2: f64) -> Result<()> {
    if !(a1 > 0.0 && a1 <= a2 && a2 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule bounds need 0 < α₁ ≤ α₂ < 1, got {a1}, {a2}"
        )));
    }
    Ok(())
}

/// Row-wise `softmax(logits / τ)`.
pub fn temp_softmax(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let z = tape.mul_scalar(logits, 1.0 / tau)?;
    tape.softmax(z)
}

fn temp_log_softmax(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    let z = tape.mul_scalar(logits, 1.0 / tau)?;
    tape.log_softmax(z)
}

/// Batch-mean KL divergence between the softened student and teacher
/// outputs. Teacher logits are detached here, so no gradient reaches the
/// teacher whatever the caller passes.
pub fn soft_kl(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    cfg: &DistillationConfig,
) -> Result<Var> {
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", cfg.tau)));
    }
    let (ss, ts) = (tape.shape(student_logits).to_vec(), tape.shape(teacher_logits).to_vec());
    if ss != ts || ss.len() != 2 || ss[0] == 0 {
        return Err(Error::shape("kd", format!("student {ss:?} vs teacher {ts:?}")));
    }
    let teacher = tape.detach(teacher_logits);
    let log_s = temp_log_softmax(tape, student_logits, cfg.tau)?;
    let log_t = temp_log_softmax(tape, teacher, cfg.tau)?;
    let (log_p, log_q) = if cfg.kd_kl_reverse { (log_t, log_s) } else { (log_s, log_t) };
    let p = tape.exp(log_p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    let scale = if cfg.kd_tau_squared { cfg.tau * cfg.tau } else { 1.0 };
    tape.mul_scalar(total, scale / ss[0] as f64)
}

/// Distillation loss on target samples.
pub fn kd_target_loss(
    tape: &mut Tape,
    student_logits_t: Var,
    teacher_logits_t: Var,
    cfg: &DistillationConfig,
) -> Result<Var> {
    soft_kl(tape, student_logits_t, teacher_logits_t, cfg)
}

/// Distillation loss on labelled source samples: the soft KL term plus
/// `λ_CLS` times the smoothed cross-entropy of the student.
pub fn kd_source_loss(
    tape: &mut Tape,
    student_logits_s: Var,
    teacher_logits_s: Var,
    labels_s: &[usize],
    cfg: &DistillationConfig,
    eps: f64,
) -> Result<Var> {
    let kl = soft_kl(tape, student_logits_s, teacher_logits_s, cfg)?;
    let ce = smoothed_ce(tape, student_logits_s, labels_s, eps)?;
    let ce = tape.mul_scalar(ce, cfg.lambda_cls)?;
    tape.add(kl, ce)
}

/// `(1 − λ_e)·L_SDA + λ_e·(L_KD^T + L_KD^S)`.
pub fn total_loss(tape: &mut Tape, l_sda: Var, l_kd_t: Var, l_kd_s: Var, lambda_e: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_e) {
        return Err(Error::InvalidArgument(format!("λ_e {lambda_e} outside [0, 1]")));
    }
    let a = tape.mul_scalar(l_sda, 1.0 - lambda_e)?;
    let kd = tape.add(l_kd_t, l_kd_s)?;
    let b = tape.mul_scalar(kd, lambda_e)?;
    tape.add(a, b)
}

/// Plain-number version of [`total_loss`], used to audit logged values.
pub fn total_loss_value(l_sda: f64, l_kd_t: f64, l_kd_s: f64, lambda_e: f64) -> f64 {
    (1.0 - lambda_e) * l_sda + lambda_e * (l_kd_t + l_kd_s)
}

/// Geometric ramp from `α₁` at epoch 0 to `α₂` at epoch `n_e`.
pub fn lambda_e(e: usize, n_e: usize, alpha1: f64, alpha2: f64) -> Result<f64> {
    check_alphas(alpha1, alpha2)?;
    if n_e == 0 {
        return Err(Error::InvalidArgument("max epochs must be positive".into()));
    }
    if e > n_e {
        return Err(Error::InvalidArgument(format!("epoch {e} beyond {n_e}")));
    }
    if e == n_e {
        return Ok(alpha2);
    }
    Ok(alpha1 * ((e as f64 / n_e as f64) * (alpha2 / alpha1).ln()).exp())
}
