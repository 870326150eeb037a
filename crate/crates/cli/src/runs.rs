use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use kavi_core::checkpoint;
use kavi_core::config::{AblationMode, ExperimentConfig};
use kavi_core::data::{self, Domain};
use kavi_core::eval::emit_report;
use kavi_core::experiment::{run_prepared, RunMetrics};
use kavi_core::trainer::{MetricsRecord, PreparedData};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const RESULT_FILE: &str = "result.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    if cfg.data.archive.is_some() {
        return Err(Failure::Usage("config already points at an archive".into()));
    }
    if out.join(data::MANIFEST).exists() {
        return Err(Failure::Data(format!("{} already holds a manifest", out.display())));
    }
    std::fs::create_dir_all(out).map_err(io(out))?;
    for (spec, domain) in [(&cfg.data.source, Domain::Source), (&cfg.data.target, Domain::Target)] {
        let recs = data::synth_recordings(spec)?;
        data::write_recordings(out, domain, &recs)?;
    }
    println!("wrote {}", out.join(data::MANIFEST).display());
    Ok(())
}

/// Archived beside the runs of one mode.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

/// Seed-averaged record.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub runs: usize,
    pub teacher_accuracy: Option<Stat>,
    pub student_accuracy: Option<Stat>,
    pub teacher_a_distance: Option<Stat>,
    pub teacher_a_l_distance: Option<Stat>,
    pub per_seed: Vec<RunMetrics>,
}

impl Summary {
    pub fn of(mode: AblationMode, runs: &[RunMetrics]) -> Self {
        let col = |f: &dyn Fn(&RunMetrics) -> Option<f64>| Stat::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
        Summary {
            mode: mode.to_string(),
            runs: runs.len(),
            teacher_accuracy: col(&|m| m.teacher_accuracy),
            student_accuracy: col(&|m| Some(m.student_accuracy)),
            teacher_a_distance: col(&|m| m.teacher_a_distance),
            teacher_a_l_distance: col(&|m| m.teacher_a_l_distance),
            per_seed: runs.to_vec(),
        }
    }
}

pub fn run_dir(out: &Path, mode: AblationMode, seed: u64) -> PathBuf {
    out.join(mode.as_str()).join(format!("seed-{seed}"))
}

/// One run: train, evaluate, write the run directory.
fn single(cfg: &ExperimentConfig, data: &PreparedData, dir: &Path) -> Result<RunMetrics, Failure> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(io(&cfg_path))?;
    let result = run_prepared(cfg, data)?;

    let metrics = dir.join(METRICS_FILE);
    std::fs::write(&metrics, MetricsRecord::to_jsonl(&result.outcome.log)).map_err(io(&metrics))?;
    let mut reports = Vec::new();
    reports.extend(result.teacher.clone());
    reports.push(result.student.clone());
    emit_report(&reports, &dir.join(REPORT_FILE))?;
    if let Some(t) = &result.outcome.teacher {
        checkpoint::save(&dir.join("teacher.ckpt"), &t.store.named_tensors())?;
    }
    checkpoint::save(&dir.join("student.ckpt"), &result.outcome.student.store.named_tensors())?;
    let m = result.metrics();
    let res = dir.join(RESULT_FILE);
    std::fs::write(&res, serde_json::to_string_pretty(&m).expect("metrics serialize")).map_err(io(&res))?;
    Ok(m)
}

pub fn train_modes(base: &ExperimentConfig, modes: &[AblationMode], seeds: usize, jobs: usize, out: &Path) -> Result<(), Failure> {
    if seeds == 0 || jobs == 0 {
        return Err(Failure::Usage("--seeds and --jobs must be positive".into()));
    }
    let data = PreparedData::from_config(&base.data)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.run.seed + i).collect();
    let tasks: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seed_list.iter().map(move |&s| (m, s))).collect();
    let started = now();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunMetrics, Failure>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mode, seed)) = tasks.get(i) else { break };
                let mut cfg = base.clone();
                cfg.run.mode = mode;
                cfg.run.seed = seed;
                let r = single(&cfg, &data, &run_dir(out, mode, seed));
                match &r {
                    Ok(m) => println!(
                        "{mode} seed {seed}: student {:.4}{}",
                        m.student_accuracy,
                        m.teacher_accuracy.map(|t| format!(" teacher {t:.4}")).unwrap_or_default()
                    ),
                    Err(e) => eprintln!("{mode} seed {seed}: {e}"),
                }
                results.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    let results: Vec<Result<RunMetrics, Failure>> =
        results.into_inner().expect("no poisoned runs").into_iter().map(|r| r.expect("every task ran")).collect();

    let mut first_err = None;
    for &mode in modes {
        let ok: Vec<RunMetrics> = tasks
            .iter()
            .zip(&results)
            .filter(|((m, _), _)| *m == mode)
            .filter_map(|(_, r)| r.as_ref().ok().cloned())
            .collect();
        let dir = out.join(mode.as_str());
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let manifest = RunManifest {
            mode: mode.to_string(),
            seeds: seed_list.clone(),
            out: out.to_path_buf(),
            started_unix: started,
            finished_unix: now(),
        };
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("serializes")).map_err(io(&p))?;
        if !ok.is_empty() {
            let s = Summary::of(mode, &ok);
            let p = dir.join("summary.json");
            std::fs::write(&p, serde_json::to_string_pretty(&s).expect("serializes")).map_err(io(&p))?;
            if let Some(a) = &s.student_accuracy {
                println!("{mode}: {} runs, student {:.4} ± {:.4}", s.runs, a.mean, a.std);
            }
        }
    }
    for r in results {
        if let Err(e) = r {
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}
