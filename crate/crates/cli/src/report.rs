use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kavi_core::config::{AblationMode, ExperimentConfig};
use kavi_core::eval::{read_reports, EvalReport};
use kavi_core::experiment::RunMetrics;
use kavi_core::models::{student_cost, teacher_cost, TeacherConfig};

use crate::runs::{Stat, CONFIG_FILE, METRICS_FILE, REPORT_FILE, RESULT_FILE};
use crate::Failure;

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if dir.join(CONFIG_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, out)?;
        }
    }
    Ok(())
}

struct Loaded {
    mode: AblationMode,
    metrics: RunMetrics,
    reports: Vec<EvalReport>,
}

fn load_run(dir: &Path) -> Result<Loaded, String> {
    let text = std::fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| format!("config: {e}"))?;
    let cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    if !dir.join(METRICS_FILE).is_file() {
        return Err("missing metrics file".into());
    }
    let res = std::fs::read_to_string(dir.join(RESULT_FILE)).map_err(|e| format!("missing result: {e}"))?;
    let metrics: RunMetrics = serde_json::from_str(&res).map_err(|e| format!("result: {e}"))?;
    let reports = read_reports(&dir.join(REPORT_FILE).with_extension("jsonl")).map_err(|e| format!("report: {e}"))?;
    Ok(Loaded { mode: cfg.run.mode, metrics, reports })
}

fn fmt(s: Option<Stat>) -> String {
    s.map_or_else(|| "-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
}

pub fn report(dir: &Path) -> Result<(), Failure> {
    let mut dirs = Vec::new();
    find_runs(dir, &mut dirs).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    if dirs.is_empty() {
        return Err(Failure::Data(format!("no runs under {}", dir.display())));
    }
    let mut by_mode: BTreeMap<AblationMode, Vec<Loaded>> = BTreeMap::new();
    let mut errors = Vec::new();
    for d in &dirs {
        match load_run(d) {
            Ok(l) => by_mode.entry(l.mode).or_default().push(l),
            Err(e) => errors.push(format!("{}: {e}", d.display())),
        }
    }

    println!("## accuracy (target test)");
    println!("| mode | runs | teacher | student |");
    println!("|---|---|---|---|");
    for (mode, runs) in &by_mode {
        let t: Vec<f64> = runs.iter().filter_map(|r| r.metrics.teacher_accuracy).collect();
        let s: Vec<f64> = runs.iter().map(|r| r.metrics.student_accuracy).collect();
        println!("| {mode} | {} | {} | {} |", runs.len(), fmt(Stat::of(&t)), fmt(Stat::of(&s)));
    }
    println!("\n## distances (teacher features)");
    println!("| mode | d_A | d_AL |");
    println!("|---|---|---|");
    for (mode, runs) in &by_mode {
        let a: Vec<f64> = runs.iter().filter_map(|r| r.metrics.teacher_a_distance).collect();
        let al: Vec<f64> = runs.iter().filter_map(|r| r.metrics.teacher_a_l_distance).collect();
        println!("| {mode} | {} | {} |", fmt(Stat::of(&a)), fmt(Stat::of(&al)));
    }
    println!("\n## cost");
    println!("| mode | model | params | size (B, f32) | FLOPs |");
    println!("|---|---|---|---|---|");
    for (mode, runs) in &by_mode {
        for r in runs[0].reports.iter() {
            println!(
                "| {mode} | {} | {} | {} | {} |",
                r.model, r.cost.parameter_count, r.cost.model_size_bytes, r.cost.flops
            );
        }
    }
    if !errors.is_empty() {
        println!("\n## errors");
        for e in &errors {
            println!("- {e}");
        }
        return Err(Failure::Data(format!("{} run(s) could not be read", errors.len())));
    }
    Ok(())
}

pub fn cost(cfg: &ExperimentConfig, nodes: &[usize]) -> Result<(), Failure> {
    let n_c = cfg.data.source.classes.len();
    let len = cfg.data.source.window;
    println!("| model | nodes | params | size (B, f32) | FLOPs |");
    println!("|---|---|---|---|---|");
    for &n in nodes {
        let tc = TeacherConfig { nodes: n, ..cfg.model.teacher };
        let c = teacher_cost(&tc, n_c, len);
        println!("| teacher | {n} | {} | {} | {} |", c.parameter_count, c.model_size_bytes, c.flops);
    }
    let s = student_cost(n_c, len);
    println!("| student | - | {} | {} | {} |", s.parameter_count, s.model_size_bytes, s.flops);
    Ok(())
}
