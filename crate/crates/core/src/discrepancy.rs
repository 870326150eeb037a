//! Kernel discrepancies between source and target feature sets, label
//! smoothing, and the subdomain-adaptation objective.
//!
//! All discrepancies use a Gaussian mixture kernel
//! `k(x, y) = Σ_u μ_u·exp(−‖x−y‖² / (2σ_u²))`. The squared-kernel variants
//! replace `k` by `k²`, the tensor-product kernel that brings second-order
//! statistics into the embedding.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bandwidths used for adaptation unless configured otherwise.
pub const DEFAULT_BANDWIDTHS: [f64; 5] = [0.001, 0.01, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelFamily {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidArgument("kernel family needs a bandwidth".into()));
        }
        if bandwidths.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bandwidths but {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("bandwidths must be positive".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("mixture weights must sum to 1".into()));
        }
        Ok(Self { bandwidths, weights })
    }

    /// Equal mixture weights over the given bandwidths.
    pub fn uniform(bandwidths: &[f64]) -> Result<Self> {
        let w = 1.0 / bandwidths.len().max(1) as f64;
        Self::new(bandwidths.to_vec(), vec![w; bandwidths.len()])
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Scalar kernel value, used by reference implementations.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.eval_sq_dist(d2)
    }

    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }
}

impl Default for KernelFamily {
    fn default() -> Self {
        Self::uniform(&DEFAULT_BANDWIDTHS).expect("default bandwidths are valid")
    }
}

/// Kernel matrix between the rows of `x (m×d)` and `y (n×d)`, elementwise
/// squared when `squared` is set.
pub fn kernel_matrix(
    tape: &mut Tape,
    x: Var,
    y: Var,
    family: &KernelFamily,
    squared: bool,
) -> Result<Var> {
    let d = tape.pairwise_sq_dist(x, y)?;
    let mut acc: Option<Var> = None;
    for (&s, &w) in family.bandwidths.iter().zip(&family.weights) {
        let scaled = tape.mul_scalar(d, -1.0 / (2.0 * s * s))?;
        let e = tape.exp(scaled)?;
        let term = tape.mul_scalar(e, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let k = acc.expect("family is nonempty");
    if squared {
        tape.mul(k, k)
    } else {
        Ok(k)
    }
}

fn rows(tape: &Tape, v: Var, op: &'static str) -> Result<usize> {
    match tape.shape(v) {
        [n, _] => Ok(*n),
        s => Err(Error::shape(op, format!("features must be rank 2, got {s:?}"))),
    }
}

/// Biased squared-kernel discrepancy between two sample sets:
/// `mean k²(s,s) + mean k²(t,t) − 2·mean k²(s,t)`.
pub fn mmsd_biased(tape: &mut Tape, xs: Var, xt: Var, family: &KernelFamily) -> Result<Var> {
    global_discrepancy(tape, xs, xt, family, true)
}

/// Biased marginal discrepancy, with plain (`squared = false`) or squared
/// kernels.
pub fn global_discrepancy(
    tape: &mut Tape,
    xs: Var,
    xt: Var,
    family: &KernelFamily,
    squared: bool,
) -> Result<Var> {
    if rows(tape, xs, "mmsd")? == 0 || rows(tape, xt, "mmsd")? == 0 {
        return Err(Error::InvalidArgument("each domain needs at least one sample".into()));
    }
    let kss = kernel_matrix(tape, xs, xs, family, squared)?;
    let ktt = kernel_matrix(tape, xt, xt, family, squared)?;
    let kst = kernel_matrix(tape, xs, xt, family, squared)?;
    let a = tape.mean(kss)?;
    let b = tape.mean(ktt)?;
    let c = tape.mean(kst)?;
    let c2 = tape.mul_scalar(c, 2.0)?;
    let ab = tape.add(a, b)?;
    tape.sub(ab, c2)
}

/// Per-sample, per-class weights `ω_ic = y_ic / Σ_j y_jc` for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassWeights {
    /// `n × n_c`; each present class column sums to 1.
    pub weights: Tensor,
    pub present: Vec<bool>,
}

/// Normalizes per-sample class distributions (`n × n_c`, rows summing to 1)
/// into class weights. A class with no mass gets a zero column.
pub fn class_weights(label_dists: &Tensor, n_c: usize) -> Result<DomainClassWeights> {
    let (n, c) = label_dists.dims2()?;
    if c != n_c {
        return Err(Error::shape("class_weights", format!("{c} columns for {n_c} classes")));
    }
    for i in 0..n {
        let row = label_dists.row(i);
        if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
        }
    }
    let mut w = label_dists.data().to_vec();
    let mut present = vec![false; n_c];
    for (cls, flag) in present.iter_mut().enumerate() {
        let mass: f64 = (0..n).map(|i| w[i * n_c + cls]).sum();
        if mass > 0.0 {
            *flag = true;
            for i in 0..n {
                w[i * n_c + cls] /= mass;
            }
        }
    }
    Ok(DomainClassWeights {
        weights: Tensor::new(vec![n, n_c], w)?,
        present,
    })
}

/// Source and target weights for one batch. Classes not present in both
/// domains are zeroed on both sides and drop out of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub source: Tensor,
    pub target: Tensor,
    pub active: Vec<bool>,
}

impl ClassWeights {
    pub fn pair(source: DomainClassWeights, target: DomainClassWeights) -> Result<Self> {
        let n_c = source.present.len();
        if target.present.len() != n_c {
            return Err(Error::shape("ClassWeights", "class counts differ between domains"));
        }
        let active: Vec<bool> = source
            .present
            .iter()
            .zip(&target.present)
            .map(|(a, b)| *a && *b)
            .collect();
        let mask = |t: Tensor| -> Result<Tensor> {
            let (n, _) = t.dims2()?;
            let mut d = t.into_data();
            for i in 0..n {
                for (c, on) in active.iter().enumerate() {
                    if !on {
                        d[i * n_c + c] = 0.0;
                    }
                }
            }
            Tensor::new(vec![n, n_c], d)
        };
        Ok(Self {
            source: mask(source.weights)?,
            target: mask(target.weights)?,
            active,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.active.len()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Smoothed label distributions `(1 − ε)·onehot + ε/n_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabels {
    pub probs: Tensor,
    pub eps: f64,
}

pub fn smooth_labels(labels: &[usize], eps: f64, n_c: usize) -> Result<SmoothedLabels> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("smoothing coefficient {eps} outside [0, 1)")));
    }
    if n_c == 0 {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let base = eps / n_c as f64;
    let mut probs = vec![base; labels.len() * n_c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_c {
            return Err(Error::InvalidArgument(format!("label {y} out of {n_c} classes")));
        }
        probs[i * n_c + y] += 1.0 - eps;
    }
    Ok(SmoothedLabels {
        probs: Tensor::new(vec![labels.len(), n_c], probs)?,
        eps,
    })
}

/// Batch-mean cross-entropy of `logits` against smoothed labels.
pub fn smoothed_ce(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (b, n_c) = match *tape.shape(logits) {
        [b, c] => (b, c),
        ref s => return Err(Error::shape("smoothed_ce", format!("logits must be rank 2, got {s:?}"))),
    };
    if b != labels.len() || b == 0 {
        return Err(Error::shape("smoothed_ce", format!("{b} logit rows for {} labels", labels.len())));
    }
    let target = smooth_labels(labels, eps, n_c)?;
    let t = tape.constant(&target.probs)?;
    let ls = tape.log_softmax(logits)?;
    let prod = tape.mul(ls, t)?;
    let s = tape.sum(prod)?;
    tape.mul_scalar(s, -1.0 / b as f64)
}

/// Result of a class-weighted discrepancy.
#[derive(Debug, Clone, Copy)]
pub struct LocalDiscrepancy {
    pub value: Var,
    pub active_classes: usize,
    /// Set when no class is present in both domains; `value` is then 0.
    pub no_shared_class: bool,
}

/// Class-weighted discrepancy
/// `(1/n_c)·Σ_c [ΣΣ ω^s ω^s k + ΣΣ ω^t ω^t k − 2·ΣΣ ω^s ω^t k]`,
/// with `k²` in place of `k` when `squared`.
pub fn local_discrepancy(
    tape: &mut Tape,
    fs: Var,
    ft: Var,
    weights: &ClassWeights,
    family: &KernelFamily,
    squared: bool,
) -> Result<LocalDiscrepancy> {
    let ns = rows(tape, fs, "local_discrepancy")?;
    let nt = rows(tape, ft, "local_discrepancy")?;
    let (ws_n, _) = weights.source.dims2()?;
    let (wt_n, _) = weights.target.dims2()?;
    if ws_n != ns || wt_n != nt {
        return Err(Error::shape(
            "local_discrepancy",
            format!("weights for {ws_n}+{wt_n} samples, features for {ns}+{nt}"),
        ));
    }
    let n_c = weights.num_classes();
    let active = weights.num_active();
    if active == 0 {
        let zero = tape.constant(&Tensor::scalar(0.0))?;
        return Ok(LocalDiscrepancy {
            value: zero,
            active_classes: 0,
            no_shared_class: true,
        });
    }
    let pair_weights = |a: &Tensor, b: &Tensor| -> Tensor {
        // (Ω_a Ω_bᵀ)_ij = Σ_c ω_ic ω_jc
        crate::linalg::matmul(a, &b.transpose2().expect("rank 2")).expect("class counts agree")
    };
    let wss = tape.constant(&pair_weights(&weights.source, &weights.source))?;
    let wtt = tape.constant(&pair_weights(&weights.target, &weights.target))?;
    let wst = tape.constant(&pair_weights(&weights.source, &weights.target))?;

    let kss = kernel_matrix(tape, fs, fs, family, squared)?;
    let ktt = kernel_matrix(tape, ft, ft, family, squared)?;
    let kst = kernel_matrix(tape, fs, ft, family, squared)?;
    let a = tape.mul(kss, wss)?;
    let a = tape.sum(a)?;
    let b = tape.mul(ktt, wtt)?;
    let b = tape.sum(b)?;
    let c = tape.mul(kst, wst)?;
    let c = tape.sum(c)?;
    let c2 = tape.mul_scalar(c, 2.0)?;
    let ab = tape.add(a, b)?;
    let total = tape.sub(ab, c2)?;
    let value = tape.mul_scalar(total, 1.0 / n_c as f64)?;
    Ok(LocalDiscrepancy {
        value,
        active_classes: active,
        no_shared_class: false,
    })
}

/// Class-weighted squared-kernel discrepancy.
pub fn elmmsd(
    tape: &mut Tape,
    fs: Var,
    ft: Var,
    weights: &ClassWeights,
    family: &KernelFamily,
) -> Result<LocalDiscrepancy> {
    local_discrepancy(tape, fs, ft, weights, family, true)
}

/// Class-weighted plain-kernel discrepancy; callers pass weights built from
/// hard source labels.
pub fn lmmd_baseline(
    tape: &mut Tape,
    fs: Var,
    ft: Var,
    weights: &ClassWeights,
    family: &KernelFamily,
) -> Result<LocalDiscrepancy> {
    local_discrepancy(tape, fs, ft, weights, family, false)
}

/// Which alignment term enters the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Class-weighted, squared kernels.
    Elmmsd,
    /// Marginal, squared kernels.
    Mmsd,
    /// Class-weighted, plain kernels.
    Lmmd,
}

/// Features of one layer for both domains.
#[derive(Debug, Clone, Copy)]
pub struct LayerPair {
    pub source: Var,
    pub target: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SdaTerms {
    pub total: Var,
    pub cls: Var,
    pub d1: Var,
    pub d2: Var,
    pub no_shared_class: bool,
}

/// `L_cls + λ_SDA·(d̂₁ + d̂₂)` where `d̂₁`, `d̂₂` align the two given layers.
#[allow(clippy::too_many_arguments)]
pub fn sda_loss(
    tape: &mut Tape,
    logits_s: Var,
    labels_s: &[usize],
    layer1: LayerPair,
    layer2: LayerPair,
    weights: &ClassWeights,
    family: &KernelFamily,
    eps: f64,
    lambda_sda: f64,
    alignment: Alignment,
) -> Result<SdaTerms> {
    let cls = smoothed_ce(tape, logits_s, labels_s, eps)?;
    let mut no_shared = false;
    let mut align = |tape: &mut Tape, l: LayerPair| -> Result<Var> {
        match alignment {
            Alignment::Mmsd => mmsd_biased(tape, l.source, l.target, family),
            Alignment::Elmmsd | Alignment::Lmmd => {
                let r = local_discrepancy(
                    tape,
                    l.source,
                    l.target,
                    weights,
                    family,
                    alignment == Alignment::Elmmsd,
                )?;
                no_shared |= r.no_shared_class;
                Ok(r.value)
            }
        }
    };
    let d1 = align(tape, layer1)?;
    let d2 = align(tape, layer2)?;
    let d = tape.add(d1, d2)?;
    let weighted = tape.mul_scalar(d, lambda_sda)?;
    let total = tape.add(cls, weighted)?;
    Ok(SdaTerms {
        total,
        cls,
        d1,
        d2,
        no_shared_class: no_shared,
    })
}

/// Adaptation weight at epoch `e` of `n_e`: `4 − 4/(√(e/(n_e+1)) + 1)`.
pub fn lambda_sda(e: usize, n_e: usize) -> Result<f64> {
    if n_e == 0 {
        return Err(Error::InvalidArgument("max epochs must be positive".into()));
    }
    let r = (e as f64 / (n_e as f64 + 1.0)).sqrt();
    Ok(-4.0 / (r + 1.0) + 4.0)
}
