//! One end-to-end run: prepare data, train, evaluate on the target test
//! split.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{a_distance, a_l_distance, accuracy_and_confusion, class_metrics, EvalReport};
use crate::models::CostReport;
use crate::tensor::Tensor;
use crate::trainer::{train, PreparedData, TrainOutcome};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub teacher: Option<EvalReport>,
    pub student: EvalReport,
}

/// Final metrics of a run, the part compared across re-executions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub teacher_accuracy: Option<f64>,
    pub student_accuracy: f64,
    pub teacher_a_distance: Option<f64>,
    pub teacher_a_l_distance: Option<f64>,
    pub student_a_distance: f64,
    pub student_a_l_distance: f64,
}

impl RunResult {
    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            mode: self.student.mode.clone(),
            seed: self.student.seed,
            config_hash: self.student.config_hash.clone(),
            teacher_accuracy: self.teacher.as_ref().map(|r| r.accuracy),
            student_accuracy: self.student.accuracy,
            teacher_a_distance: self.teacher.as_ref().and_then(|r| r.a_distance.map(|a| a.distance)),
            teacher_a_l_distance: self.teacher.as_ref().and_then(|r| r.a_l_distance.as_ref().map(|a| a.value)),
            student_a_distance: self.student.a_distance.map_or(f64::NAN, |a| a.distance),
            student_a_l_distance: self.student.a_l_distance.as_ref().map_or(f64::NAN, |a| a.value),
        }
    }
}

/// Scores a model from its source/target test outputs.
#[allow(clippy::too_many_arguments)]
fn report(
    name: &str,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    src: (Tensor, Tensor),
    tgt: (Tensor, Tensor),
    cost: CostReport,
) -> Result<EvalReport> {
    let n_c = data.num_classes();
    let test = &data.target.test;
    let (accuracy, confusion) = accuracy_and_confusion(&tgt.0, &test.labels, n_c)?;
    let pseudo = tgt.0.argmax_rows()?;
    Ok(EvalReport {
        model: name.into(),
        mode: cfg.run.mode.to_string(),
        seed: cfg.run.seed,
        accuracy,
        per_class: class_metrics(&confusion, &test.class_names),
        confusion,
        a_distance: Some(a_distance(&src.1, &tgt.1)?),
        a_l_distance: Some(a_l_distance(&src.1, &data.source.test.labels, &tgt.1, &pseudo, n_c)?),
        cost,
        config_hash: cfg.hash(),
    })
}

/// Trains the configured pipeline and evaluates both networks. Distances
/// use FC2 features for the teacher and FC4 features for the student.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunResult> {
    let mut outcome = train(cfg, data)?;
    let xs = &data.source.test.segments;
    let xt = &data.target.test.segments;
    let teacher = match outcome.teacher.as_mut() {
        Some(t) => {
            let cost = t.cost_report();
            Some(report("teacher", cfg, data, t.infer(xs)?, t.infer(xt)?, cost)?)
        }
        None => None,
    };
    let s = &mut outcome.student;
    let cost = s.cost_report();
    let student = report("student", cfg, data, s.infer(xs)?, s.infer(xt)?, cost)?;
    Ok(RunResult { outcome, teacher, student })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    let data = PreparedData::from_config(&cfg.data)?;
    run_prepared(cfg, &data)
}
