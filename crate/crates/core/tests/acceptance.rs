//! Acceptance suite: ten criteria, one PASS/FAIL line each.
//!
//! Training-based criteria share one sweep of every mode over five seeds
//! on the default synthetic pair.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use kavi_core::autodiff::grad_check;
use kavi_core::config::{AblationMode, ExperimentConfig};
use kavi_core::discrepancy::{
    class_weights, elmmsd, lambda_sda, lmmd_baseline, local_discrepancy, mmsd_biased, smooth_labels, smoothed_ce,
    ClassWeights, KernelFamily, DEFAULT_BANDWIDTHS,
};
use kavi_core::distill::{kd_source_loss, kd_target_loss, lambda_e, total_loss, total_loss_value, DistillationConfig};
use kavi_core::eval::a_distance;
use kavi_core::experiment::{run_prepared, RunMetrics, RunResult};
use kavi_core::graph::{arma1_fixed_point, armak_fixed_point, armak_response, spectral_filter_oracle, InstanceGraph};
use kavi_core::models::{student_cost, teacher_cost, TeacherConfig};
use kavi_core::trainer::{MetricsRecord, PreparedData};
use kavi_core::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const GRAD_CASES: usize = 100;
const GRAD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

/// Training settings for the sweep. The learning rate and momentum differ
/// from the config defaults; at 0.001 plain SGD neither network leaves
/// chance level within 40 epochs.
fn sweep_config(mode: AblationMode, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.mode = mode;
    c.run.seed = seed;
    c.run.learning_rate = 0.01;
    c.run.momentum = 0.9;
    c
}

struct Run {
    metrics: RunMetrics,
    elapsed: Duration,
    audit_max_err: f64,
    audit_steps: usize,
}

#[derive(Default)]
struct Ctx {
    data: Option<PreparedData>,
    runs: BTreeMap<(AblationMode, u64), Run>,
    kavi_seed0: Option<RunResult>,
}

impl Ctx {
    fn data(&mut self) -> &PreparedData {
        self.data
            .get_or_insert_with(|| PreparedData::from_config(&ExperimentConfig::default().data).expect("default data"))
    }

    fn run(&mut self, mode: AblationMode, seed: u64) -> &Run {
        if !self.runs.contains_key(&(mode, seed)) {
            let cfg = sweep_config(mode, seed);
            let t = Instant::now();
            let r = run_prepared(&cfg, self.data()).expect("training run");
            let elapsed = t.elapsed();
            let mut audit_max_err: f64 = 0.0;
            let mut audit_steps = 0;
            for s in r.outcome.steps() {
                let re = total_loss_value(s.l_sda, s.l_kd_t, s.l_kd_s, s.lambda_e);
                audit_max_err = audit_max_err.max((re - s.l_total).abs());
                audit_steps += 1;
            }
            let metrics = r.metrics();
            eprintln!("    [{mode} seed {seed}: teacher {:?} student {:.4} in {:.1}s]", metrics.teacher_accuracy, metrics.student_accuracy, elapsed.as_secs_f64());
            if mode == AblationMode::Kavi && seed == 0 {
                self.kavi_seed0 = Some(r);
            }
            self.runs.insert((mode, seed), Run { metrics, elapsed, audit_max_err, audit_steps });
        }
        &self.runs[&(mode, seed)]
    }

    fn mean(&mut self, mode: AblationMode, f: impl Fn(&RunMetrics) -> Option<f64>) -> f64 {
        let xs: Vec<f64> = (0..SEEDS).map(|s| f(&self.run(mode, s).metrics).expect("metric present")).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

type Loss = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Reduces any output to a scalar with fixed non-uniform weights.
fn scalarize(t: &mut Tape, v: Var) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| ((k * 7 + 3) as f64).sin() + 0.3).collect())?;
    let wv = t.constant(&w)?;
    let p = t.mul(v, wv)?;
    t.sum(p)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Denominators bounded away from zero, either sign.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

type Case = (Tensor, Loss);

fn gradient_suite() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
        (rng.random_range(1..5), rng.random_range(1..6))
    }
    fn labels(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..c)).collect()
    }
    fn probs(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut d = Vec::with_capacity(n * c);
        for _ in 0..n {
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            d.extend(row.iter().map(|v| v / s));
        }
        Tensor::new(vec![n, c], d).unwrap()
    }
    fn family(rng: &mut ChaCha8Rng) -> KernelFamily {
        if rng.random_bool(0.5) {
            KernelFamily::uniform(&DEFAULT_BANDWIDTHS).unwrap()
        } else {
            let bw: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..3.0)).collect();
            KernelFamily::uniform(&bw).unwrap()
        }
    }
    fn unary(op: fn(&mut Tape, Var) -> Result<Var>) -> Loss {
        Box::new(move |t, x| {
            let y = op(t, x)?;
            scalarize(t, y)
        })
    }
    fn binary_lhs(other: Tensor, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Loss {
        Box::new(move |t, x| {
            let b = t.constant(&other)?;
            let y = op(t, x, b)?;
            scalarize(t, y)
        })
    }
    fn binary_rhs(other: Tensor, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Loss {
        Box::new(move |t, x| {
            let a = t.constant(&other)?;
            let y = op(t, a, x)?;
            scalarize(t, y)
        })
    }

    let mut s: Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> = Vec::new();
    let ew: [(&'static str, fn(&mut Tape, Var, Var) -> Result<Var>); 4] =
        [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul), ("div", Tape::div)];
    for (name, op) in ew {
        let lhs: &'static str = Box::leak(format!("{name}/lhs").into_boxed_str());
        let rhs: &'static str = Box::leak(format!("{name}/rhs-broadcast").into_boxed_str());
        let is_div = name == "div";
        s.push((lhs, Box::new(move |r| {
            let (m, n) = dims(r);
            let b = if is_div { away_from_zero(&[n], r) } else { normal(&[n], r) };
            (normal(&[m, n], r), binary_lhs(b, op))
        })));
        s.push((rhs, Box::new(move |r| {
            let (m, n) = dims(r);
            let x = if is_div { away_from_zero(&[n], r) } else { normal(&[n], r) };
            (x, binary_rhs(normal(&[m, n], r), op))
        })));
    }
    s.push(("add_scalar", Box::new(|r| {
        let (m, n) = dims(r);
        let c = r.random_range(-2.0..2.0);
        (normal(&[m, n], r), Box::new(move |t, x| { let y = t.add_scalar(x, c)?; scalarize(t, y) }))
    })));
    s.push(("mul_scalar", Box::new(|r| {
        let (m, n) = dims(r);
        let c = r.random_range(-2.0..2.0);
        (normal(&[m, n], r), Box::new(move |t, x| { let y = t.mul_scalar(x, c)?; scalarize(t, y) }))
    })));
    s.push(("neg", Box::new(|r| { let (m, n) = dims(r); (normal(&[m, n], r), unary(Tape::neg)) })));
    s.push(("exp", Box::new(|r| { let (m, n) = dims(r); (uniform(&[m, n], -2.0, 2.0, r), unary(Tape::exp)) })));
    s.push(("log", Box::new(|r| { let (m, n) = dims(r); (uniform(&[m, n], 0.2, 3.0, r), unary(Tape::log)) })));
    s.push(("sqrt", Box::new(|r| { let (m, n) = dims(r); (uniform(&[m, n], 0.2, 3.0, r), unary(Tape::sqrt)) })));
    s.push(("relu", Box::new(|r| { let (m, n) = dims(r); (normal(&[m, n], r), unary(Tape::relu)) })));
    s.push(("sum", Box::new(|r| {
        let (m, n) = dims(r);
        (normal(&[m, n], r), Box::new(|t, x| { let y = t.sum(x)?; t.mul(y, y) }))
    })));
    s.push(("mean", Box::new(|r| {
        let (m, n) = dims(r);
        (normal(&[m, n], r), Box::new(|t, x| { let y = t.mean(x)?; t.mul(y, y) }))
    })));
    for axis in [0usize, 1] {
        let name: &'static str = if axis == 0 { "sum_axis/0" } else { "sum_axis/1" };
        s.push((name, Box::new(move |r| {
            let (m, n) = dims(r);
            (normal(&[m, n], r), Box::new(move |t, x| { let y = t.sum_axis(x, axis)?; scalarize(t, y) }))
        })));
    }
    s.push(("softmax", Box::new(|r| { let (m, n) = dims(r); (normal(&[m, n + 1], r), unary(Tape::softmax)) })));
    s.push(("log_softmax", Box::new(|r| { let (m, n) = dims(r); (normal(&[m, n + 1], r), unary(Tape::log_softmax)) })));
    s.push(("matmul/lhs", Box::new(|r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..5);
        (normal(&[m, k], r), binary_lhs(normal(&[k, n], r), Tape::matmul))
    })));
    s.push(("matmul/rhs", Box::new(|r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..5);
        (normal(&[k, n], r), binary_rhs(normal(&[m, k], r), Tape::matmul))
    })));
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let name: &'static str = Box::leak(format!("matmul_t/{}{}", u8::from(ta), u8::from(tb)).into_boxed_str());
        s.push((name, Box::new(move |r| {
            let (m, k) = dims(r);
            let n = r.random_range(1..5);
            let a_shape = if ta { [k, m] } else { [m, k] };
            let b_shape = if tb { [n, k] } else { [k, n] };
            let b = normal(&b_shape, r);
            let a = normal(&a_shape, r);
            if r.random_bool(0.5) {
                (a, Box::new(move |t: &mut Tape, x: Var| { let bv = t.constant(&b)?; let y = t.matmul_t(x, bv, ta, tb)?; scalarize(t, y) }) as Loss)
            } else {
                (b, Box::new(move |t: &mut Tape, x: Var| { let av = t.constant(&a)?; let y = t.matmul_t(av, x, ta, tb)?; scalarize(t, y) }) as Loss)
            }
        })));
    }
    s.push(("transpose", Box::new(|r| { let (m, n) = dims(r); (normal(&[m, n], r), unary(Tape::transpose)) })));
    s.push(("reshape", Box::new(|r| {
        let (m, n) = dims(r);
        (normal(&[m, n], r), Box::new(move |t, x| { let y = t.reshape(x, &[n, m])?; scalarize(t, y) }))
    })));
    s.push(("gather_rows", Box::new(|r| {
        let (m, n) = dims(r);
        let idx: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..m)).collect();
        (normal(&[m, n], r), Box::new(move |t, x| { let y = t.gather_rows(x, &idx)?; scalarize(t, y) }))
    })));

    fn conv_geom(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
        let n = r.random_range(1..3);
        let c_in = r.random_range(1..3);
        let c_out = r.random_range(1..4);
        let k = r.random_range(1..4);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        let l = r.random_range(k.max(2)..8);
        (n, c_in, c_out, k, stride, pad, l)
    }
    s.push(("conv1d/x", Box::new(|r| {
        let (n, ci, co, k, st, pad, l) = conv_geom(r);
        let w = normal(&[co, ci, k], r);
        let b = normal(&[co], r);
        (normal(&[n, ci, l], r), Box::new(move |t, x| {
            let (wv, bv) = (t.constant(&w)?, t.constant(&b)?);
            let y = t.conv1d(x, wv, Some(bv), st, pad)?;
            scalarize(t, y)
        }))
    })));
    s.push(("conv1d/w", Box::new(|r| {
        let (n, ci, co, k, st, pad, l) = conv_geom(r);
        let xin = normal(&[n, ci, l], r);
        (normal(&[co, ci, k], r), Box::new(move |t, w| {
            let xv = t.constant(&xin)?;
            let y = t.conv1d(xv, w, None, st, pad)?;
            scalarize(t, y)
        }))
    })));
    s.push(("conv1d/bias", Box::new(|r| {
        let (n, ci, co, k, st, pad, l) = conv_geom(r);
        let xin = normal(&[n, ci, l], r);
        let w = normal(&[co, ci, k], r);
        (normal(&[co], r), Box::new(move |t, b| {
            let (xv, wv) = (t.constant(&xin)?, t.constant(&w)?);
            let y = t.conv1d(xv, wv, Some(b), st, pad)?;
            scalarize(t, y)
        }))
    })));
    fn bn_case(r: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        // At two samples per channel the outputs are ±1 up to O(eps) and the
        // gradient falls below finite-difference resolution.
        let n = r.random_range(2..4);
        let c = r.random_range(1..3);
        let l = r.random_range(if n == 2 { 2 } else { 1 }..4);
        (normal(&[n, c, l], r), uniform(&[c], 0.5, 1.5, r), normal(&[c], r))
    }
    s.push(("batch_norm/train/x", Box::new(|r| {
        let (x, g, b) = bn_case(r);
        (x, Box::new(move |t, x| {
            let (gv, bv) = (t.constant(&g)?, t.constant(&b)?);
            let (y, _) = t.batch_norm(x, gv, bv, None, 1e-5)?;
            scalarize(t, y)
        }))
    })));
    s.push(("batch_norm/train/gamma", Box::new(|r| {
        let (x, g, b) = bn_case(r);
        (g, Box::new(move |t, gv| {
            let (xv, bv) = (t.constant(&x)?, t.constant(&b)?);
            let (y, _) = t.batch_norm(xv, gv, bv, None, 1e-5)?;
            scalarize(t, y)
        }))
    })));
    s.push(("batch_norm/train/beta", Box::new(|r| {
        let (x, g, b) = bn_case(r);
        (b, Box::new(move |t, bv| {
            let (xv, gv) = (t.constant(&x)?, t.constant(&g)?);
            let (y, _) = t.batch_norm(xv, gv, bv, None, 1e-5)?;
            scalarize(t, y)
        }))
    })));
    s.push(("batch_norm/eval/x", Box::new(|r| {
        let (x, g, b) = bn_case(r);
        let c = g.len();
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        (x, Box::new(move |t, x| {
            let (gv, bv) = (t.constant(&g)?, t.constant(&b)?);
            let (y, _) = t.batch_norm(x, gv, bv, Some((&mean, &var)), 1e-5)?;
            scalarize(t, y)
        }))
    })));
    s.push(("max_pool1d", Box::new(|r| {
        let n = r.random_range(1..3);
        let c = r.random_range(1..3);
        let k = r.random_range(1..4);
        let st = r.random_range(1..3);
        let l = r.random_range(k..9);
        (normal(&[n, c, l], r), Box::new(move |t, x| { let y = t.max_pool1d(x, k, st)?; scalarize(t, y) }))
    })));
    s.push(("global_avg_pool", Box::new(|r| {
        let n = r.random_range(1..3);
        let c = r.random_range(1..3);
        let l = r.random_range(1..6);
        (normal(&[n, c, l], r), unary(Tape::global_avg_pool))
    })));
    s.push(("pairwise_sq_dist/x", Box::new(|r| {
        let (m, d) = dims(r);
        let n = r.random_range(1..5);
        (normal(&[m, d], r), binary_lhs(normal(&[n, d], r), Tape::pairwise_sq_dist))
    })));
    s.push(("pairwise_sq_dist/y", Box::new(|r| {
        let (m, d) = dims(r);
        let n = r.random_range(1..5);
        (normal(&[n, d], r), binary_rhs(normal(&[m, d], r), Tape::pairwise_sq_dist))
    })));

    // Composite losses.
    s.push(("loss/smoothed_ce", Box::new(|r| {
        let n = r.random_range(1..5);
        let c = r.random_range(2..6);
        let y = labels(n, c, r);
        let eps = if r.random_bool(0.5) { 0.1 } else { r.random_range(0.0..0.5) };
        (normal(&[n, c], r), Box::new(move |t, x| smoothed_ce(t, x, &y, eps)))
    })));
    s.push(("loss/mmsd", Box::new(|r| {
        let (ns, d) = dims(r);
        let nt = r.random_range(1..5);
        let fam = family(r);
        let ft = normal(&[nt, d], r);
        (normal(&[ns, d], r), Box::new(move |t, x| { let y = t.constant(&ft)?; mmsd_biased(t, x, y, &fam) }))
    })));
    fn local_case(r: &mut ChaCha8Rng) -> (Tensor, Tensor, ClassWeights, KernelFamily) {
        let ns = r.random_range(2..6);
        let nt = r.random_range(2..6);
        let d = r.random_range(1..4);
        let c = r.random_range(2..4);
        let ys = smooth_labels(&labels(ns, c, r), 0.1, c).unwrap();
        let pt = probs(nt, c, r);
        let w = ClassWeights::pair(class_weights(&ys.probs, c).unwrap(), class_weights(&pt, c).unwrap()).unwrap();
        (normal(&[ns, d], r), normal(&[nt, d], r), w, family(r))
    }
    s.push(("loss/elmmsd/source", Box::new(|r| {
        let (fs, ft, w, fam) = local_case(r);
        (fs, Box::new(move |t, x| { let y = t.constant(&ft)?; Ok(elmmsd(t, x, y, &w, &fam)?.value) }))
    })));
    s.push(("loss/elmmsd/target", Box::new(|r| {
        let (fs, ft, w, fam) = local_case(r);
        (ft, Box::new(move |t, y| { let x = t.constant(&fs)?; Ok(elmmsd(t, x, y, &w, &fam)?.value) }))
    })));
    for reverse in [false, true] {
        let name: &'static str = if reverse { "loss/kd_kl/reverse" } else { "loss/kd_kl" };
        s.push((name, Box::new(move |r| {
            let n = r.random_range(1..5);
            let c = r.random_range(2..6);
            let teacher = normal(&[n, c], r);
            let cfg = DistillationConfig { tau: r.random_range(1.0..25.0), kd_kl_reverse: reverse, ..Default::default() };
            (normal(&[n, c], r).mul_scalar_owned(3.0), Box::new(move |t, x| {
                let tv = t.constant(&teacher)?;
                kd_target_loss(t, x, tv, &cfg)
            }))
        })));
    }
    s.push(("loss/total", Box::new(|r| {
        let n = r.random_range(2..5);
        let c = r.random_range(2..5);
        let y = labels(n, c, r);
        let teacher = normal(&[n, c], r);
        let ft = normal(&[n, c], r);
        let lam = r.random_range(0.0..=1.0);
        let cfg = DistillationConfig { tau: r.random_range(1.0..25.0), ..Default::default() };
        let fam = family(r);
        (normal(&[n, c], r), Box::new(move |t, x| {
            let tv = t.constant(&teacher)?;
            let ftv = t.constant(&ft)?;
            let ce = smoothed_ce(t, x, &y, 0.1)?;
            let m = mmsd_biased(t, x, ftv, &fam)?;
            let sda = t.add(ce, m)?;
            let kdt = kd_target_loss(t, x, tv, &cfg)?;
            let kds = kd_source_loss(t, x, tv, &y, &cfg, 0.1)?;
            total_loss(t, sda, kdt, kds, lam)
        }))
    })));
    s
}

trait ScaleOwned {
    fn mul_scalar_owned(self, s: f64) -> Tensor;
}

impl ScaleOwned for Tensor {
    fn mul_scalar_owned(mut self, s: f64) -> Tensor {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}

fn criterion_1(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: (f64, &str) = (0.0, "");
    let mut cases = 0;
    let mut excluded = 0;
    let suite = gradient_suite();
    for (i, (name, make)) in suite.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        for case in 0..GRAD_CASES {
            let (x, f) = make(&mut rng);
            match grad_check(f, &x, GRAD_EPS, GRAD_TOL) {
                Ok(rep) => {
                    if rep.max_rel_err > worst.0 {
                        worst = (rep.max_rel_err, name);
                    }
                    excluded += rep.excluded.len();
                    if !rep.passed {
                        failures.push(format!("{name}#{case} shape {:?} rel {:.2e}", x.shape(), rep.max_rel_err));
                    }
                }
                Err(e) => failures.push(format!("{name}#{case}: {e}")),
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 300.0;
    verdict(
        pass,
        format!(
            "{} checks x {GRAD_CASES} cases = {cases}, worst rel err {:.2e} ({}), {excluded} kink coords excluded, {secs:.1}s{}",
            suite.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!(", failures: {:?}", &failures[..failures.len().min(5)]) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst1: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    let mut worst_add: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(2..6);
        let k = rng.random_range(1..=n.min(5));
        let x = Tensor::randn(&[n, d], &mut rng);
        let g = InstanceGraph::from_features(&x, k).unwrap();
        let x0 = Tensor::randn(&[n, 3], &mut rng);

        let p = rng.random_range(-0.9..0.9);
        let q = rng.random_range(-2.0..2.0);
        let fp = arma1_fixed_point(&g, &x0, p, q, 100_000, 1e-14).unwrap();
        let oracle = spectral_filter_oracle(&g, |l| q / (1.0 - p * (1.0 - l)), &x0).unwrap();
        worst1 = worst1.max(fp.max_abs_diff(&oracle));

        let coeffs: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-0.9..0.9), rng.random_range(-2.0..2.0))).collect();
        let fk = armak_fixed_point(&g, &x0, &coeffs, 100_000, 1e-14).unwrap();
        let ok = spectral_filter_oracle(&g, |l| armak_response(&coeffs, l), &x0).unwrap();
        worst_k = worst_k.max(fk.max_abs_diff(&ok));
        let mut sum = Tensor::zeros(x0.shape());
        for &(p, q) in &coeffs {
            let part = spectral_filter_oracle(&g, |l| q / (1.0 - p * (1.0 - l)), &x0).unwrap();
            for (a, b) in sum.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        worst_add = worst_add.max(fk.max_abs_diff(&sum));
    }
    let pass = worst1 <= 1e-6 && worst_k <= 1e-6 && worst_add <= 1e-6;
    verdict(pass, format!("50 graphs: ARMA1 max err {worst1:.2e}, ARMA3 vs response {worst_k:.2e}, ARMA3 vs sum of stacks {worst_add:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn brute_kernel(fam: &KernelFamily, a: &[f64], b: &[f64], squared: bool) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let k: f64 = fam.bandwidths().iter().zip(fam.weights()).map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp()).sum();
    if squared { k * k } else { k }
}

fn brute_mmsd(fam: &KernelFamily, s: &Tensor, t: &Tensor) -> f64 {
    let (ns, nt) = (s.shape()[0], t.shape()[0]);
    let mut ss = 0.0;
    for i in 0..ns {
        for j in 0..ns {
            ss += brute_kernel(fam, s.row(i), s.row(j), true);
        }
    }
    let mut tt = 0.0;
    for i in 0..nt {
        for j in 0..nt {
            tt += brute_kernel(fam, t.row(i), t.row(j), true);
        }
    }
    let mut st = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            st += brute_kernel(fam, s.row(i), t.row(j), true);
        }
    }
    ss / (ns * ns) as f64 + tt / (nt * nt) as f64 - 2.0 * st / (ns * nt) as f64
}

/// Class-conditional double sums with weights `y_ic / Σ_j y_jc`, over the
/// classes with mass in both domains, divided by the class count.
fn brute_local(fam: &KernelFamily, s: &Tensor, ys: &Tensor, t: &Tensor, yt: &Tensor, squared: bool) -> f64 {
    let (ns, nt, c) = (s.shape()[0], t.shape()[0], ys.shape()[1]);
    let mut total = 0.0;
    for cls in 0..c {
        let ms: f64 = (0..ns).map(|i| ys.at2(i, cls)).sum();
        let mt: f64 = (0..nt).map(|i| yt.at2(i, cls)).sum();
        if ms <= 0.0 || mt <= 0.0 {
            continue;
        }
        let ws = |i: usize| ys.at2(i, cls) / ms;
        let wt = |i: usize| yt.at2(i, cls) / mt;
        for i in 0..ns {
            for j in 0..ns {
                total += ws(i) * ws(j) * brute_kernel(fam, s.row(i), s.row(j), squared);
            }
        }
        for i in 0..nt {
            for j in 0..nt {
                total += wt(i) * wt(j) * brute_kernel(fam, t.row(i), t.row(j), squared);
            }
        }
        for i in 0..ns {
            for j in 0..nt {
                total -= 2.0 * ws(i) * wt(j) * brute_kernel(fam, s.row(i), t.row(j), squared);
            }
        }
    }
    total / c as f64
}

fn criterion_3(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e_mmsd, mut e_lmmd, mut e_elmmsd, mut e_reduce): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for case in 0..100 {
        let ns = rng.random_range(2..9);
        let nt = rng.random_range(2..9);
        let d = rng.random_range(1..5);
        let c = rng.random_range(2..5);
        let scale = rng.random_range(0.05..3.0);
        let fs = Tensor::randn(&[ns, d], &mut rng).mul_scalar_owned(scale);
        let ft = Tensor::randn(&[nt, d], &mut rng).mul_scalar_owned(scale);
        let fam = if case % 2 == 0 {
            KernelFamily::uniform(&DEFAULT_BANDWIDTHS).unwrap()
        } else {
            let bw: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0.1..5.0)).collect();
            let raw: Vec<f64> = bw.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            KernelFamily::new(bw, raw.iter().map(|w| w / s).collect()).unwrap()
        };
        let labels: Vec<usize> = (0..ns).map(|_| rng.random_range(0..c)).collect();
        let hard = smooth_labels(&labels, 0.0, c).unwrap().probs;
        let soft = smooth_labels(&labels, 0.1, c).unwrap().probs;
        let mut pt = Vec::new();
        for _ in 0..nt {
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = row.iter().sum::<f64>().max(1e-12);
            pt.extend(row.iter().map(|v| v / s));
        }
        let pt = Tensor::new(vec![nt, c], pt).unwrap();
        let w_hard = ClassWeights::pair(class_weights(&hard, c).unwrap(), class_weights(&pt, c).unwrap()).unwrap();
        let w_soft = ClassWeights::pair(class_weights(&soft, c).unwrap(), class_weights(&pt, c).unwrap()).unwrap();

        let mut t = Tape::new();
        let (sv, tv) = (t.constant(&fs).unwrap(), t.constant(&ft).unwrap());
        let m = mmsd_biased(&mut t, sv, tv, &fam).unwrap();
        let l = lmmd_baseline(&mut t, sv, tv, &w_hard, &fam).unwrap();
        let el = elmmsd(&mut t, sv, tv, &w_soft, &fam).unwrap();
        let red = local_discrepancy(&mut t, sv, tv, &w_hard, &fam, false).unwrap();

        e_mmsd = e_mmsd.max((t.scalar(m).unwrap() - brute_mmsd(&fam, &fs, &ft)).abs());
        e_lmmd = e_lmmd.max((t.scalar(l.value).unwrap() - brute_local(&fam, &fs, &hard, &ft, &pt, false)).abs());
        e_elmmsd = e_elmmsd.max((t.scalar(el.value).unwrap() - brute_local(&fam, &fs, &soft, &ft, &pt, true)).abs());
        e_reduce = e_reduce.max((t.scalar(red.value).unwrap() - t.scalar(l.value).unwrap()).abs());
    }
    let pass = e_mmsd <= 1e-12 && e_lmmd <= 1e-12 && e_elmmsd <= 1e-12 && e_reduce <= 1e-12;
    verdict(
        pass,
        format!("100 batches: mmsd {e_mmsd:.1e}, lmmd {e_lmmd:.1e}, elmmsd {e_elmmsd:.1e}, hard+plain reduction {e_reduce:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(ctx: &mut Ctx) -> Verdict {
    let mut problems = Vec::new();
    for n_e in [1usize, 2, 3, 10, 40, 400] {
        if lambda_sda(0, n_e).unwrap() != 0.0 {
            problems.push(format!("λ_SDA(0) ≠ 0 for n_e={n_e}"));
        }
        let vals: Vec<f64> = (0..=n_e).map(|e| lambda_sda(e, n_e).unwrap()).collect();
        if vals.windows(2).any(|w| w[1] < w[0]) || vals.iter().any(|&v| !(v < 2.0)) {
            problems.push(format!("λ_SDA not monotone below 2 for n_e={n_e}"));
        }
        if lambda_e(0, n_e, 0.1, 0.9).unwrap() != 0.1 || lambda_e(n_e, n_e, 0.1, 0.9).unwrap() != 0.9 {
            problems.push(format!("λ_e endpoints for n_e={n_e}"));
        }
    }
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for mode in AblationMode::ALL {
        for seed in 0..SEEDS {
            let r = ctx.run(mode, seed);
            worst = worst.max(r.audit_max_err);
            steps += r.audit_steps;
        }
    }
    // Endpoints as logged by a kavi run.
    let r = ctx.kavi_seed0.as_ref().expect("kavi seed 0 ran");
    let epochs: Vec<_> = r
        .outcome
        .log
        .iter()
        .filter_map(|m| if let MetricsRecord::Epoch(e) = m { Some(e) } else { None })
        .collect();
    let first = epochs.first().unwrap();
    let last = epochs.last().unwrap();
    if first.lambda_e != 0.1 || first.lambda_sda != 0.0 || last.lambda_e != 0.9 || last.epoch != 40 {
        problems.push("logged schedule endpoints".into());
    }
    if worst > 1e-12 {
        problems.push(format!("audit error {worst:.2e}"));
    }
    verdict(
        problems.is_empty(),
        format!("schedules exact; total-loss audit over {steps} logged steps, max err {worst:.1e}{}", if problems.is_empty() { String::new() } else { format!("; {problems:?}") }),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5(ctx: &mut Ctx) -> Verdict {
    let p = smooth_labels(&[3], 0.1, 10).unwrap().probs;
    let exact = (0..10).all(|c| {
        let want = if c == 3 { 0.91 } else { 0.01 };
        (p.at2(0, c) - want).abs() <= 1e-15
    });
    let smooth = ctx.mean(AblationMode::Kavi, |m| m.teacher_accuracy);
    let hard = ctx.mean(AblationMode::NoLabelSmoothing, |m| m.teacher_accuracy);
    verdict(
        exact && smooth >= hard,
        format!("smoothed labels 0.91/0.01 exact: {exact}; teacher target acc smoothing {smooth:.4} vs hard {hard:.4}"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(ctx: &mut Ctx) -> Verdict {
    use AblationMode::*;
    let student_order = [Kavi, KdThenSda, SdaOnly, SdaThenKd];
    let teacher_order = [Kavi, MmsdBaseline, LmmdBaseline];
    let mut time = Duration::ZERO;
    for mode in student_order.iter().chain(&teacher_order) {
        for seed in 0..SEEDS {
            if !(student_order[0] == *mode && teacher_order[0] == *mode && seed >= SEEDS) {
                time += ctx.run(*mode, seed).elapsed;
            }
        }
    }
    // Kavi runs serve both orderings; count them once.
    time -= (0..SEEDS).map(|s| ctx.runs[&(Kavi, s)].elapsed).sum::<Duration>();

    let s: Vec<f64> = student_order.iter().map(|&m| ctx.mean(m, |r| Some(r.student_accuracy))).collect();
    let t: Vec<f64> = teacher_order.iter().map(|&m| ctx.mean(m, |r| r.teacher_accuracy)).collect();
    let student_ok = s.windows(2).all(|w| w[0] - w[1] >= 0.01);
    let teacher_ok = t.windows(2).all(|w| w[0] > w[1]);
    let minutes = time.as_secs_f64() / 60.0;
    verdict(
        student_ok && teacher_ok && minutes < 30.0,
        format!(
            "student kavi {:.4} > kd_then_sda {:.4} > sda_only {:.4} > sda_then_kd {:.4} (margin 0.01): {student_ok}; teacher elmmsd {:.4} > mmsd {:.4} > lmmd {:.4}: {teacher_ok}; {minutes:.1} min",
            s[0], s[1], s[2], s[3], t[0], t[1], t[2]
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(ctx: &mut Ctx) -> Verdict {
    let t = ctx.mean(AblationMode::Kavi, |m| m.teacher_accuracy);
    let s = ctx.mean(AblationMode::Kavi, |m| Some(m.student_accuracy));
    verdict((t - s).abs() <= 0.03, format!("teacher {t:.4}, student {s:.4}, gap {:.4} (limit 0.03)", (t - s).abs()))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(ctx: &mut Ctx) -> Verdict {
    ctx.run(AblationMode::Kavi, 0);
    let data = ctx.data().clone();
    let r = ctx.kavi_seed0.as_mut().expect("kavi seed 0 ran");
    let teacher = r.outcome.teacher.as_mut().expect("kavi has a teacher");
    let (_, feats) = teacher.infer(&data.source.train.segments).expect("inference");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut idx: Vec<usize> = (0..feats.shape()[0]).collect();
    idx.shuffle(&mut rng);
    let a = feats.select_rows(&idx[..200]).unwrap();
    let b = feats.select_rows(&idx[200..400]).unwrap();
    let null = a_distance(&a, &b).unwrap();

    let da_kavi = ctx.mean(AblationMode::Kavi, |m| m.teacher_a_distance);
    let da_src = ctx.mean(AblationMode::SourceOnly, |m| m.teacher_a_distance);
    let dal_kavi = ctx.mean(AblationMode::Kavi, |m| m.teacher_a_l_distance);
    let dal_src = ctx.mean(AblationMode::SourceOnly, |m| m.teacher_a_l_distance);
    let pass = null.distance.abs() < 0.2 && da_kavi < da_src && dal_kavi < dal_src;
    verdict(
        pass,
        format!(
            "null d_A {:.4} (raw {:.4}); d_A adapted {da_kavi:.4} vs source-only {da_src:.4}; d_AL adapted {dal_kavi:.4} vs source-only {dal_src:.4}",
            null.distance, null.raw_distance
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(_: &mut Ctx) -> Verdict {
    let base = TeacherConfig::default();
    let t = teacher_cost(&base, 10, 1024);
    let s = student_cost(10, 1024);
    let flops: Vec<u64> = [32, 64, 128, 256]
        .iter()
        .map(|&n| teacher_cost(&TeacherConfig { nodes: n, ..base }, 10, 1024).flops)
        .collect();
    let ratio = s.model_size_bytes as f64 / t.model_size_bytes as f64;
    let pass = s.parameter_count < t.parameter_count
        && s.flops < t.flops
        && flops.windows(2).all(|w| w[0] < w[1])
        && ratio < 0.1;
    verdict(
        pass,
        format!(
            "params {} vs {}, FLOPs {} vs {}, teacher FLOPs over nodes {flops:?}, size ratio {ratio:.4}",
            s.parameter_count, t.parameter_count, s.flops, t.flops
        ),
    )
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10(ctx: &mut Ctx) -> Verdict {
    let original = ctx.run(AblationMode::Kavi, 0).metrics.clone();
    let archived = sweep_config(AblationMode::Kavi, 0).to_toml().unwrap();
    let cfg = ExperimentConfig::from_toml(&archived).unwrap();
    let data = PreparedData::from_config(&cfg.data).unwrap();
    let again = run_prepared(&cfg, &data).unwrap();
    let same_params = ctx
        .kavi_seed0
        .as_ref()
        .map(|r| r.outcome.student.store.named_tensors() == again.outcome.student.store.named_tensors())
        .unwrap_or(false);
    let same = again.metrics() == original;
    verdict(same && same_params, format!("re-run from archived config: metrics identical {same}, student weights identical {same_params}"))
}

fn main() {
    let criteria: [(&str, fn(&mut Ctx) -> Verdict); 10] = [
        ("gradient correctness", criterion_1),
        ("ARMA identity", criterion_2),
        ("discrepancy oracles", criterion_3),
        ("schedules and loss audit", criterion_4),
        ("label smoothing", criterion_5),
        ("ablation orderings", criterion_6),
        ("distillation gap", criterion_7),
        ("distances", criterion_8),
        ("cost reporting", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut ctx = Ctx::default();
    let mut failed = 0;
    let mut err = std::io::stderr();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| verdict(false, format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        failed += usize::from(!v.pass);
        let _ = writeln!(
            err,
            "criterion {n:>2} {name}: {} ({}) [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    let _ = writeln!(err, "acceptance: {failed} failed");
    // Verdicts are reported, not enforced, unless strict mode is requested.
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
