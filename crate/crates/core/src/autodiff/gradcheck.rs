use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that components whose true
/// derivative is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// One-sided slopes differing by more than this (relative to the central
/// slope) mark a coordinate as a kink: a max/ReLU tie point where the
/// derivative is not defined.
const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped as non-differentiable points.
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    x.validate()?;

    let mut tape = Tape::new();
    let xv = tape.param(x)?;
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "function output must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let f0 = tape.value(out)[0];
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(xv);

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let v = t.constant(&probe)?;
        let o = f(&mut t, v)?;
        t.scalar(o)
    };

    let mut probe = x.data().to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
        passed: true,
    };
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(&probe)?;
        probe[i] = orig - eps;
        let fm = eval(&probe)?;
        probe[i] = orig;

        let central = (fp - fm) / (2.0 * eps);
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        if (right - left).abs() > KINK_TOL * central.abs().max(1.0) {
            report.excluded.push(i);
            continue;
        }
        let a = analytic[i];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(REL_ERR_FLOOR);
        report.checked += 1;
        if err > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
