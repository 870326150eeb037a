//! Training pipelines: joint teacher adaptation with progressive
//! distillation, and the ablation variants.
//!
//! Every step builds one tape holding both networks. The logged `l_total`
//! is the tape value of `(1 − λ_e)·L_SDA + λ_e·(L_KD^T + L_KD^S)`, with terms
//! a pipeline phase does not use fixed at zero, so the record re-derives
//! from its parts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{AblationMode, DataConfig, ExperimentConfig};
use crate::data::{self, Domain, SignalDataset};
use crate::discrepancy::{
    class_weights, lambda_sda, sda_loss, smooth_labels, Alignment, ClassWeights, KernelFamily, LayerPair,
};
use crate::distill::{kd_source_loss, kd_target_loss, lambda_e, total_loss, DistillationConfig};
use crate::error::{Error, Result};
use crate::models::{Student, Teacher};
use crate::nn::{ParamStore, Sgd};
use crate::tensor::{argmax, Tensor};

/// Train/validation/test splits of one domain, standardized per segment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SignalDataset,
    pub val: SignalDataset,
    pub test: SignalDataset,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source: Splits,
    pub target: Splits,
}

impl PreparedData {
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        let (src, tgt) = match &cfg.archive {
            Some(dir) => (
                data::load_archive(dir, Domain::Source, cfg.source.window, cfg.archive_overlap)?,
                data::load_archive(dir, Domain::Target, cfg.target.window, cfg.archive_overlap)?,
            ),
            None => data::synth_domain_pair(&cfg.source, &cfg.target)?,
        };
        Self::from_datasets(&src, &tgt, cfg.split, cfg.split_seed)
    }

    pub fn from_datasets(src: &SignalDataset, tgt: &SignalDataset, split: [f64; 3], seed: u64) -> Result<Self> {
        if src.class_names != tgt.class_names {
            return Err(Error::Data("source and target class lists differ".into()));
        }
        let prep = |ds: &SignalDataset, seed: u64| -> Result<Splits> {
            let (a, b, c) = data::split_dataset(ds, (split[0], split[1], split[2]), seed)?;
            let std = |mut d: SignalDataset| -> Result<SignalDataset> {
                d.segments = data::standardize(&d.segments)?;
                Ok(d)
            };
            Ok(Splits { train: std(a)?, val: std(b)?, test: std(c)? })
        };
        Ok(Self {
            source: prep(src, seed)?,
            target: prep(tgt, seed.wrapping_add(1))?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.source.train.num_classes()
    }

    pub fn input_len(&self) -> usize {
        self.source.train.window()
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub l_cls: f64,
    pub d1: f64,
    pub d2: f64,
    pub l_sda: f64,
    pub l_kd_t: f64,
    pub l_kd_s: f64,
    pub l_total: f64,
    pub lambda_sda: f64,
    pub lambda_e: f64,
    pub no_shared_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: String,
    pub epoch: usize,
    pub lambda_sda: f64,
    pub lambda_e: f64,
    pub mean_total: Option<f64>,
    pub teacher_val_acc: Option<f64>,
    pub student_val_acc: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(LossBreakdown),
    Epoch(EpochSummary),
    PhaseBoundary { phase: String },
}

impl MetricsRecord {
    pub fn to_jsonl(records: &[MetricsRecord]) -> String {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1))))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mode: AblationMode,
    /// Best-validation teacher, when the pipeline has one.
    pub teacher: Option<Teacher>,
    /// Best-validation student.
    pub student: Student,
    pub log: Vec<MetricsRecord>,
    pub best_teacher_val: Option<f64>,
    pub best_student_val: f64,
}

impl TrainOutcome {
    pub fn steps(&self) -> impl Iterator<Item = &LossBreakdown> {
        self.log.iter().filter_map(|r| match r {
            MetricsRecord::Step(s) => Some(s),
            _ => None,
        })
    }
}

/// Soft pseudo-labels: softmax rows of the teacher's inference logits.
pub fn generate_pseudo_labels(teacher: &mut Teacher, x: &Tensor) -> Result<Tensor> {
    let (logits, _) = teacher.infer(x)?;
    Ok(softmax_rows(&logits))
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(vec![n, c], out).expect("shape preserved")
}

fn one_hot_rows(labels: &[usize], n_c: usize) -> Tensor {
    let mut d = vec![0.0; labels.len() * n_c];
    for (i, &y) in labels.iter().enumerate() {
        d[i * n_c + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_c], d).expect("shape")
}

/// Classification accuracy of `logits` against `labels`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&logits.data()[i * c..(i + 1) * c]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Which networks a step trains and which loss terms it builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepKind {
    /// Teacher on `L_SDA` (adaptation optional), student on KD terms.
    Joint { adapt: bool, target_kd: bool },
    /// Teacher alone on `L_SDA`.
    TeacherSda,
    /// Student distilled from the frozen teacher.
    FrozenKd,
    /// Student alone on `L_SDA` over its own features.
    StudentSda,
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    family: KernelFamily,
    kd: DistillationConfig,
    eps: f64,
    alignment: Alignment,
    hard_target_weights: bool,
    n_c: usize,
    teacher: Teacher,
    student: Student,
    t_opt: Sgd,
    s_opt: Sgd,
    rng: ChaCha8Rng,
    log: Vec<MetricsRecord>,
    best_teacher: Option<(f64, ParamStore)>,
    best_student: Option<(f64, ParamStore)>,
}

struct StepInput<'b> {
    xs: &'b Tensor,
    ys: &'b [usize],
    xt: &'b Tensor,
}

fn divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a PreparedData) -> Result<Self> {
        cfg.validate()?;
        let n_c = data.num_classes();
        if data.target.train.num_classes() != n_c {
            return Err(Error::Data("domains disagree on the class count".into()));
        }
        let mode = cfg.run.mode;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        init.set_stream(1);
        let teacher = Teacher::new(cfg.model.teacher, n_c, data.input_len(), &mut init)?;
        init.set_stream(2);
        let student = Student::new(n_c, data.input_len(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        rng.set_stream(3);
        let opt = || Sgd::new(cfg.run.learning_rate, cfg.run.momentum);
        Ok(Self {
            cfg,
            data,
            family: cfg.kernel_family()?,
            kd: cfg.distillation(),
            eps: cfg.effective_epsilon(),
            alignment: match mode {
                AblationMode::MmsdBaseline => Alignment::Mmsd,
                AblationMode::LmmdBaseline => Alignment::Lmmd,
                _ => Alignment::Elmmsd,
            },
            hard_target_weights: mode == AblationMode::LmmdBaseline,
            n_c,
            teacher,
            student,
            t_opt: opt(),
            s_opt: opt(),
            rng,
            log: Vec::new(),
            best_teacher: None,
            best_student: None,
        })
    }

    fn class_weights(&self, ys: &[usize], target_logits: &Tensor) -> Result<ClassWeights> {
        let src = smooth_labels(ys, self.eps, self.n_c)?;
        let tgt = if self.hard_target_weights {
            one_hot_rows(&target_logits.argmax_rows()?, self.n_c)
        } else {
            softmax_rows(target_logits)
        };
        ClassWeights::pair(class_weights(&src.probs, self.n_c)?, class_weights(&tgt, self.n_c)?)
    }

    /// Batches of source indices and paired target indices for one epoch.
    fn epoch_batches(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let ns = self.data.source.train.len();
        let nt = self.data.target.train.len();
        let bs = self.cfg.run.batch_size;
        let mut src: Vec<usize> = (0..ns).collect();
        src.shuffle(&mut self.rng);
        let mut tgt: Vec<usize> = (0..nt).collect();
        tgt.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for (b, chunk) in src.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let t = if nt == ns {
                tgt[b * bs..b * bs + chunk.len()].to_vec()
            } else {
                (0..chunk.len()).map(|_| self.rng.random_range(0..nt)).collect()
            };
            out.push((chunk.to_vec(), t));
        }
        out
    }

    fn run_epoch(&mut self, kind: StepKind, phase: &str, epoch: usize, l_sda_w: f64, l_e: f64) -> Result<f64> {
        let batches = self.epoch_batches();
        let mut total = 0.0;
        for (step, (si, ti)) in batches.iter().enumerate() {
            let xs = self.data.source.train.segments.select_rows(si)?;
            let ys: Vec<usize> = si.iter().map(|&i| self.data.source.train.labels[i]).collect();
            let xt = self.data.target.train.segments.select_rows(ti)?;
            let input = StepInput { xs: &xs, ys: &ys, xt: &xt };
            let rec = self
                .step(kind, &input, l_sda_w, l_e, phase, epoch, step)
                .map_err(|e| divergence(e, epoch, step))?;
            if !rec.l_total.is_finite() {
                return Err(Error::Divergence { epoch, step, detail: "non-finite total loss".into() });
            }
            total += rec.l_total;
            self.log.push(MetricsRecord::Step(rec));
        }
        Ok(total / batches.len().max(1) as f64)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        kind: StepKind,
        b: &StepInput,
        lam_sda: f64,
        lam_e: f64,
        phase: &str,
        epoch: usize,
        step: usize,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let train_teacher = matches!(kind, StepKind::Joint { .. } | StepKind::TeacherSda);
        let use_teacher = kind != StepKind::StudentSda;
        let train_student = kind != StepKind::TeacherSda;
        let zero = tape.constant(&Tensor::scalar(0.0))?;

        let pt = if use_teacher { Some(self.teacher.store.bind(&mut tape, train_teacher)?) } else { None };
        let ps = if train_student { Some(self.student.store.bind(&mut tape, true)?) } else { None };

        let (mut l_cls, mut d1, mut d2, mut l_sda) = (zero, zero, zero, zero);
        let (mut kd_t, mut kd_s) = (zero, zero);
        let mut no_shared = false;

        match kind {
            StepKind::Joint { adapt, target_kd } => {
                let pt = pt.as_ref().expect("bound");
                let ps = ps.as_ref().expect("bound");
                let ts = self.teacher.forward(&mut tape, pt, b.xs, true)?;
                let tt = if adapt || target_kd { Some(self.teacher.forward(&mut tape, pt, b.xt, true)?) } else { None };
                let sda = match (&tt, adapt) {
                    (Some(tt), true) => {
                        let w = self.class_weights(b.ys, &tape.tensor(tt.logits))?;
                        Some(sda_loss(
                            &mut tape,
                            ts.logits,
                            b.ys,
                            LayerPair { source: ts.fc1, target: tt.fc1 },
                            LayerPair { source: ts.fc2, target: tt.fc2 },
                            &w,
                            &self.family,
                            self.eps,
                            lam_sda,
                            self.alignment,
                        )?)
                    }
                    _ => None,
                };
                match sda {
                    Some(s) => {
                        (l_cls, d1, d2, l_sda, no_shared) = (s.cls, s.d1, s.d2, s.total, s.no_shared_class);
                    }
                    None => {
                        l_cls = crate::discrepancy::smoothed_ce(&mut tape, ts.logits, b.ys, self.eps)?;
                        l_sda = l_cls;
                    }
                }
                let ss = self.student.forward(&mut tape, ps, b.xs, true)?;
                kd_s = kd_source_loss(&mut tape, ss.logits, ts.logits, b.ys, &self.kd, self.eps)?;
                if let (Some(tt), true) = (&tt, target_kd) {
                    let st = self.student.forward(&mut tape, ps, b.xt, true)?;
                    kd_t = kd_target_loss(&mut tape, st.logits, tt.logits, &self.kd)?;
                }
            }
            StepKind::TeacherSda => {
                let pt = pt.as_ref().expect("bound");
                let ts = self.teacher.forward(&mut tape, pt, b.xs, true)?;
                let tt = self.teacher.forward(&mut tape, pt, b.xt, true)?;
                let w = self.class_weights(b.ys, &tape.tensor(tt.logits))?;
                let s = sda_loss(
                    &mut tape,
                    ts.logits,
                    b.ys,
                    LayerPair { source: ts.fc1, target: tt.fc1 },
                    LayerPair { source: ts.fc2, target: tt.fc2 },
                    &w,
                    &self.family,
                    self.eps,
                    lam_sda,
                    self.alignment,
                )?;
                (l_cls, d1, d2, l_sda, no_shared) = (s.cls, s.d1, s.d2, s.total, s.no_shared_class);
            }
            StepKind::FrozenKd => {
                let pt = pt.as_ref().expect("bound");
                let ps = ps.as_ref().expect("bound");
                let ts = self.teacher.forward(&mut tape, pt, b.xs, false)?;
                let tt = self.teacher.forward(&mut tape, pt, b.xt, false)?;
                let ss = self.student.forward(&mut tape, ps, b.xs, true)?;
                let st = self.student.forward(&mut tape, ps, b.xt, true)?;
                kd_s = kd_source_loss(&mut tape, ss.logits, ts.logits, b.ys, &self.kd, self.eps)?;
                kd_t = kd_target_loss(&mut tape, st.logits, tt.logits, &self.kd)?;
            }
            StepKind::StudentSda => {
                let ps = ps.as_ref().expect("bound");
                let ss = self.student.forward(&mut tape, ps, b.xs, true)?;
                let st = self.student.forward(&mut tape, ps, b.xt, true)?;
                let w = self.class_weights(b.ys, &tape.tensor(st.logits))?;
                let layer = LayerPair { source: ss.fc4, target: st.fc4 };
                let s = sda_loss(
                    &mut tape,
                    ss.logits,
                    b.ys,
                    layer,
                    layer,
                    &w,
                    &self.family,
                    self.eps,
                    lam_sda,
                    self.alignment,
                )?;
                (l_cls, d1, d2, l_sda, no_shared) = (s.cls, s.d1, s.d2, s.total, s.no_shared_class);
            }
        }

        let l_total = total_loss(&mut tape, l_sda, kd_t, kd_s, lam_e)?;
        tape.backward(l_total)?;
        if let Some(pt) = &pt {
            self.t_opt.step(&mut self.teacher.store, &tape, pt)?;
        }
        if let Some(ps) = &ps {
            self.s_opt.step(&mut self.student.store, &tape, ps)?;
        }
        let v = |x: Var| tape.value(x)[0];
        Ok(LossBreakdown {
            phase: phase.to_string(),
            epoch,
            step,
            l_cls: v(l_cls),
            d1: v(d1),
            d2: v(d2),
            l_sda: v(l_sda),
            l_kd_t: v(kd_t),
            l_kd_s: v(kd_s),
            l_total: v(l_total),
            lambda_sda: lam_sda,
            lambda_e: lam_e,
            no_shared_class: no_shared,
        })
    }

    fn validate_teacher(&mut self) -> Result<f64> {
        let val = &self.data.target.val;
        let (logits, _) = self.teacher.infer(&val.segments)?;
        let acc = accuracy(&logits, &val.labels);
        if self.best_teacher.as_ref().is_none_or(|(b, _)| acc > *b) {
            self.best_teacher = Some((acc, self.teacher.store.clone()));
        }
        Ok(acc)
    }

    fn validate_student(&mut self) -> Result<f64> {
        let val = &self.data.target.val;
        let (logits, _) = self.student.infer(&val.segments)?;
        let acc = accuracy(&logits, &val.labels);
        if self.best_student.as_ref().is_none_or(|(b, _)| acc > *b) {
            self.best_student = Some((acc, self.student.store.clone()));
        }
        Ok(acc)
    }

    /// Runs `n` epochs of one phase. `schedule(e)` gives `(λ_SDA, λ_e)`.
    fn phase(
        &mut self,
        name: &str,
        kind: StepKind,
        n: usize,
        schedule: impl Fn(usize) -> Result<(f64, f64)>,
    ) -> Result<()> {
        self.log.push(MetricsRecord::PhaseBoundary { phase: name.to_string() });
        let teacher_trains = matches!(kind, StepKind::Joint { .. } | StepKind::TeacherSda);
        let student_trains = kind != StepKind::TeacherSda;
        for e in 0..=n {
            let (ls, le) = schedule(e)?;
            let mean_total = if e < n { Some(self.run_epoch(kind, name, e, ls, le)?) } else { None };
            let teacher_val_acc = if teacher_trains && e < n { Some(self.validate_teacher()?) } else { None };
            let student_val_acc = if student_trains && e < n { Some(self.validate_student()?) } else { None };
            self.log.push(MetricsRecord::Epoch(EpochSummary {
                phase: name.to_string(),
                epoch: e,
                lambda_sda: ls,
                lambda_e: le,
                mean_total,
                teacher_val_acc,
                student_val_acc,
            }));
        }
        Ok(())
    }

    fn restore_best_teacher(&mut self) {
        if let Some((_, store)) = &self.best_teacher {
            self.teacher.store = store.clone();
        }
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let mode = self.cfg.run.mode;
        let n_e = self.cfg.run.epochs;
        let (a1, a2) = (self.kd.alpha1, self.kd.alpha2);
        let joint = |n: usize| move |e: usize| Ok((lambda_sda(e, n)?, lambda_e(e, n, a1, a2)?));
        let (p1, p2) = self.cfg.phase_split();
        match mode {
            AblationMode::Kavi | AblationMode::MmsdBaseline | AblationMode::LmmdBaseline | AblationMode::NoLabelSmoothing => {
                self.phase("joint", StepKind::Joint { adapt: true, target_kd: true }, n_e, joint(n_e))?;
            }
            AblationMode::SourceOnly => {
                self.phase("joint", StepKind::Joint { adapt: false, target_kd: true }, n_e, move |e| {
                    Ok((0.0, lambda_e(e, n_e, a1, a2)?))
                })?;
            }
            AblationMode::SdaThenKd => {
                self.phase("sda", StepKind::TeacherSda, p1, move |e| Ok((lambda_sda(e, p1)?, 0.0)))?;
                self.restore_best_teacher();
                self.phase("kd", StepKind::FrozenKd, p2, |_| Ok((0.0, 1.0)))?;
            }
            AblationMode::KdThenSda => {
                self.phase("kd", StepKind::Joint { adapt: false, target_kd: false }, p1, move |e| {
                    Ok((0.0, lambda_e(e, p1, a1, a2)?))
                })?;
                self.phase("sda", StepKind::StudentSda, p2, move |e| Ok((lambda_sda(e, p2)?, 0.0)))?;
            }
            AblationMode::SdaOnly => {
                self.phase("sda", StepKind::StudentSda, n_e, move |e| Ok((lambda_sda(e, n_e)?, 0.0)))?;
            }
        }

        let has_teacher = mode.has_teacher();
        let (best_teacher_val, teacher) = match (has_teacher, self.best_teacher.take()) {
            (true, Some((acc, store))) => {
                self.teacher.store = store;
                (Some(acc), Some(self.teacher))
            }
            _ => (None, None),
        };
        let (best_student_val, store) = self.best_student.take().expect("student validated at least once");
        self.student.store = store;
        Ok(TrainOutcome {
            mode,
            teacher,
            student: self.student,
            log: self.log,
            best_teacher_val,
            best_student_val,
        })
    }
}

/// Trains the pipeline selected by `cfg.run.mode`.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    Trainer::new(cfg, data)?.run()
}

/// Joint pipeline with the mode forced to `kavi`.
pub fn train_kavi(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let mut c = cfg.clone();
    c.run.mode = AblationMode::Kavi;
    train(&c, data)
}

/// Runs the pipeline named by `cfg.run.mode`.
pub fn train_ablation(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    train(cfg, data)
}
