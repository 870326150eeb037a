//! Accuracy, confusion matrices, proxy domain distances and report output.
//!
//! The distances use a hinge-loss linear probe trained by subgradient
//! descent, scored by seeded 5-fold cross-validation over the pooled
//! features. `ζ` is the held-out error, clipped to `[0, 0.5]` before the
//! `2(1 − 2ζ)` map.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CostReport;
use crate::tensor::{argmax, Tensor};

pub const PROBE_SEED: u64 = 0x5eed;
const PROBE_ITERS: usize = 300;
const PROBE_L2: f64 = 1e-3;
const PROBE_FOLDS: usize = 5;

/// Argmax predictions scored against labels. Rows of the confusion matrix
/// are true classes.
pub fn accuracy_and_confusion(logits: &Tensor, labels: &[usize], n_c: usize) -> Result<(f64, Vec<Vec<u64>>)> {
    let (n, c) = logits.dims2()?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if n != labels.len() || c != n_c {
        return Err(Error::shape("accuracy_and_confusion", format!("logits {n}x{c}, {} labels, {n_c} classes", labels.len())));
    }
    let mut cm = vec![vec![0u64; n_c]; n_c];
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_c {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let p = argmax(logits.row(i));
        cm[y][p] += 1;
        hits += usize::from(p == y);
    }
    Ok((hits as f64 / n as f64, cm))
}

/// Held-out error of the linear probe and the distance derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Raw held-out error.
    pub zeta: f64,
    /// `2(1 − 2ζ)` with `ζ` clipped to `[0, 0.5]`.
    pub distance: f64,
    /// `2(1 − 2ζ)` without clipping.
    pub raw_distance: f64,
}

impl ProbeResult {
    pub fn from_zeta(zeta: f64) -> Self {
        let z = zeta.clamp(0.0, 0.5);
        Self {
            zeta,
            distance: 2.0 * (1.0 - 2.0 * z),
            raw_distance: 2.0 * (1.0 - 2.0 * zeta),
        }
    }
}

fn check_features(x: &Tensor, name: &str) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{name}: need at least 2 samples, got {n}")));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument(format!("{name}: non-finite features")));
    }
    Ok((n, d))
}

/// Fold index per sample: a seeded shuffle dealt round-robin into `k` folds.
fn assign_folds(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Domain-classifier distance between two feature sets. `ζ` is the
/// cross-validated error: every sample is scored once by a probe trained on
/// the other folds.
pub fn a_distance(fs: &Tensor, ft: &Tensor) -> Result<ProbeResult> {
    let (ns, d) = check_features(fs, "source features")?;
    let (nt, dt) = check_features(ft, "target features")?;
    if d != dt {
        return Err(Error::shape("a_distance", format!("feature widths {d} and {dt}")));
    }
    let k = PROBE_FOLDS.min(ns).min(nt);
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let s_fold = assign_folds(ns, k, &mut rng);
    let t_fold = assign_folds(nt, k, &mut rng);
    let rows: Vec<(&[f64], f64, usize)> = (0..ns)
        .map(|i| (fs.row(i), -1.0, s_fold[i]))
        .chain((0..nt).map(|i| (ft.row(i), 1.0, t_fold[i])))
        .collect();

    let mut errors = 0usize;
    for fold in 0..k {
        let train: Vec<&(&[f64], f64, usize)> = rows.iter().filter(|r| r.2 != fold).collect();
        // Standardize with training statistics.
        let mut mean = vec![0.0; d];
        for r in &train {
            for (m, v) in mean.iter_mut().zip(r.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        let mut sd = vec![0.0; d];
        for r in &train {
            for j in 0..d {
                sd[j] += (r.0[j] - mean[j]).powi(2);
            }
        }
        for s in sd.iter_mut() {
            *s = (*s / train.len() as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let norm = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
        let xtr: Vec<Vec<f64>> = train.iter().map(|r| norm(r.0)).collect();
        let ytr: Vec<f64> = train.iter().map(|r| r.1).collect();
        let (w, b) = train_hinge(&xtr, &ytr, d);
        errors += rows
            .iter()
            .filter(|r| r.2 == fold)
            .filter(|r| {
                let s = dot(&w, &norm(r.0)) + b;
                // Ties predict the source side.
                let pred = if s > 0.0 { 1.0 } else { -1.0 };
                pred != r.1
            })
            .count();
    }
    Ok(ProbeResult::from_zeta(errors as f64 / rows.len() as f64))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch subgradient descent on the L2-regularized, class-balanced
/// hinge loss.
fn train_hinge(x: &[Vec<f64>], y: &[f64], d: usize) -> (Vec<f64>, f64) {
    let n_pos = y.iter().filter(|v| **v > 0.0).count().max(1) as f64;
    let n_neg = y.iter().filter(|v| **v < 0.0).count().max(1) as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for it in 0..PROBE_ITERS {
        let lr = 1.0 / (1.0 + it as f64).sqrt();
        let mut gw: Vec<f64> = w.iter().map(|v| PROBE_L2 * v).collect();
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            if yi * (dot(&w, xi) + b) < 1.0 {
                let c = if yi > 0.0 { 0.5 / n_pos } else { 0.5 / n_neg };
                for (g, v) in gw.iter_mut().zip(xi) {
                    *g -= c * yi * v;
                }
                gb -= c * yi;
            }
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * g;
        }
        b -= lr * gb;
    }
    (w, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistance {
    pub class: usize,
    pub prior: f64,
    pub probe: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdomainDistance {
    /// `2 Σ_c p(c)(1 − 2ζ^c)` over the included classes, priors renormalized.
    pub value: f64,
    pub per_class: Vec<ClassDistance>,
    /// Classes with fewer than 2 samples in either domain.
    pub excluded: Vec<usize>,
}

/// Class-conditional distance weighted by the target class priors.
/// Target classes come from pseudo-labels.
pub fn a_l_distance(fs: &Tensor, ys: &[usize], ft: &Tensor, yt: &[usize], n_c: usize) -> Result<SubdomainDistance> {
    let (ns, _) = fs.dims2()?;
    let (nt, _) = ft.dims2()?;
    if ys.len() != ns || yt.len() != nt {
        return Err(Error::shape("a_l_distance", "label count differs from feature rows"));
    }
    if ys.iter().chain(yt).any(|&c| c >= n_c) {
        return Err(Error::InvalidArgument("label out of range".into()));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..n_c {
        let si: Vec<usize> = (0..ns).filter(|&i| ys[i] == c).collect();
        let ti: Vec<usize> = (0..nt).filter(|&i| yt[i] == c).collect();
        if si.len() < 2 || ti.len() < 2 {
            excluded.push(c);
            continue;
        }
        let probe = a_distance(&fs.select_rows(&si)?, &ft.select_rows(&ti)?)?;
        per_class.push(ClassDistance { class: c, prior: ti.len() as f64, probe });
    }
    let mass: f64 = per_class.iter().map(|c| c.prior).sum();
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("no class has samples in both domains".into()));
    }
    for c in per_class.iter_mut() {
        c.prior /= mass;
    }
    let value = per_class.iter().map(|c| c.prior * c.probe.distance).sum();
    Ok(SubdomainDistance { value, per_class, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

/// Evaluation of one model on the target test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    pub a_distance: Option<ProbeResult>,
    pub a_l_distance: Option<SubdomainDistance>,
    pub cost: CostReport,
    pub config_hash: String,
}

/// Per-class precision and recall from a confusion matrix. An empty
/// prediction column gives precision 0.
pub fn class_metrics(confusion: &[Vec<u64>], names: &[String]) -> Vec<ClassMetrics> {
    let n = confusion.len();
    (0..n)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            ClassMetrics {
                name: names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                precision: if predicted > 0 { tp / predicted as f64 } else { 0.0 },
                recall: if support > 0 { tp / support as f64 } else { 0.0 },
                support,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let n = self.confusion.len();
        if n == 0 || self.confusion.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = self.confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("confusion matrix has no samples".into()));
        }
        let trace: u64 = (0..n).map(|i| self.confusion[i][i]).sum();
        if (trace as f64 / total as f64 - self.accuracy).abs() > 1e-12 {
            return Err(Error::InvalidArgument("accuracy disagrees with the confusion matrix".into()));
        }
        if self.per_class.len() != n
            || self.per_class.iter().zip(&self.confusion).any(|(m, r)| m.support != r.iter().sum::<u64>())
        {
            return Err(Error::InvalidArgument("per-class supports disagree with the confusion matrix".into()));
        }
        Ok(())
    }

    /// Human-readable block.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("== {} / {} / seed {} ==\n", self.mode, self.model, self.seed));
        s.push_str(&format!("config {}\n", self.config_hash));
        s.push_str(&format!("accuracy {:.4}\n", self.accuracy));
        if let Some(a) = &self.a_distance {
            s.push_str(&format!("d_A {:.4} (raw {:.4}, zeta {:.4})\n", a.distance, a.raw_distance, a.zeta));
        }
        if let Some(a) = &self.a_l_distance {
            s.push_str(&format!("d_AL {:.4}", a.value));
            if !a.excluded.is_empty() {
                s.push_str(&format!(" (excluded classes {:?})", a.excluded));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "params {} size {} B flops {}\n",
            self.cost.parameter_count, self.cost.model_size_bytes, self.cost.flops
        ));
        s.push_str("class              precision  recall  support\n");
        for m in &self.per_class {
            s.push_str(&format!("{:<18} {:>9.4} {:>7.4} {:>8}\n", m.name, m.precision, m.recall, m.support));
        }
        s.push_str("confusion\n");
        for r in &self.confusion {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:>4}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Writes `path` (text) and `path` with a `.jsonl` extension (one record per
/// report).
pub fn emit_report(reports: &[EvalReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    for r in reports {
        r.validate()?;
    }
    let mut text = std::fs::File::create(path)?;
    for r in reports {
        text.write_all(r.render().as_bytes())?;
        text.write_all(b"\n")?;
    }
    let mut jsonl = std::fs::File::create(path.with_extension("jsonl"))?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(jsonl, "{line}")?;
    }
    Ok(())
}

pub fn parse_reports(text: &str) -> Result<Vec<EvalReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(e.to_string())))
        .collect()
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    parse_reports(&std::fs::read_to_string(path)?)
}
