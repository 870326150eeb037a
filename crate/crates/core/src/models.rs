//! Teacher (instance graph + ARMA convolutions + MLP head) and Student
//! (two-block 1-D CNN) networks, plus parameter and FLOP accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{armak_forward, InstanceGraph};
use crate::nn::{kaiming_uniform, BatchNorm, Binding, Conv1d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Largest instance graph built at inference; bigger inputs are chunked.
pub const EVAL_GRAPH_MAX_NODES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub nodes: usize,
    pub top_k: usize,
    pub stacks: usize,
    pub arma_layers: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            nodes: 128,
            top_k: 2,
            stacks: 3,
            arma_layers: 3,
            fc1: 256,
            fc2: 128,
        }
    }
}

/// Parameter, size and FLOP accounting for one forward pass of one sample.
///
/// Multiply and add count separately (2 FLOPs per MAC), batch-norm and
/// activations cost 1 FLOP per element, graph propagation costs 2 FLOPs per
/// nonzero of the Top-K adjacency per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub parameter_count: u64,
    /// At 4 bytes per weight.
    pub model_size_bytes: u64,
    /// At 8 bytes per weight, the precision used for training.
    pub model_size_bytes_f64: u64,
    pub flops: u64,
}

impl CostReport {
    fn new(params: u64, flops: u64) -> Self {
        Self {
            parameter_count: params,
            model_size_bytes: params * 4,
            model_size_bytes_f64: params * 8,
            flops,
        }
    }
}

fn linear_cost(d_in: u64, d_out: u64) -> (u64, u64) {
    (d_in * d_out + d_out, 2 * d_in * d_out + d_out)
}

/// Forward outputs the adaptation losses need.
#[derive(Debug, Clone, Copy)]
pub struct TeacherOutput {
    pub fc1: Var,
    pub fc2: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
struct ArmaBlock {
    stacks: Vec<(ParamId, ParamId)>,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    pub n_c: usize,
    pub input_len: usize,
    pub store: ParamStore,
    blocks: Vec<ArmaBlock>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl Teacher {
    pub fn new<R: Rng + ?Sized>(cfg: TeacherConfig, n_c: usize, input_len: usize, rng: &mut R) -> Result<Self> {
        if n_c < 2 || input_len == 0 || cfg.nodes == 0 || cfg.stacks == 0 || cfg.arma_layers == 0 || cfg.top_k == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid teacher dimensions: n_c={n_c}, input_len={input_len}, {cfg:?}"
            )));
        }
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.arma_layers);
        let mut d_in = input_len;
        for l in 0..cfg.arma_layers {
            let stacks = (0..cfg.stacks)
                .map(|s| {
                    let w = store.add_param(&format!("arma{l}.stack{s}.w"), kaiming_uniform(&[d_in, cfg.nodes], d_in, rng));
                    let v = store.add_param(&format!("arma{l}.stack{s}.v"), kaiming_uniform(&[d_in, cfg.nodes], d_in, rng));
                    (w, v)
                })
                .collect();
            let bn = BatchNorm::new(&mut store, &format!("arma{l}.bn"), cfg.nodes);
            blocks.push(ArmaBlock { stacks, bn });
            d_in = cfg.nodes;
        }
        let fc1 = Linear::new(&mut store, "fc1", cfg.nodes, cfg.fc1, rng);
        let fc2 = Linear::new(&mut store, "fc2", cfg.fc1, cfg.fc2, rng);
        let fc3 = Linear::new(&mut store, "fc3", cfg.fc2, n_c, rng);
        Ok(Self { cfg, n_c, input_len, store, blocks, fc1, fc2, fc3 })
    }

    /// Forward pass over a batch `x (n × input_len)`; the batch is one
    /// instance graph. `train` selects batch statistics for batch-norm and
    /// updates the running averages.
    pub fn forward(&mut self, tape: &mut Tape, p: &Binding, x: &Tensor, train: bool) -> Result<TeacherOutput> {
        let (n, l) = x.dims2()?;
        if l != self.input_len {
            return Err(Error::shape("teacher", format!("input length {l}, expected {}", self.input_len)));
        }
        let graph = InstanceGraph::from_features(x, self.cfg.top_k.min(n))?;
        let prop = tape.constant(&graph.propagation)?;
        let mut h = tape.constant(x)?;
        for b in &self.blocks {
            let stacks: Vec<(Var, Var)> = b.stacks.iter().map(|&(w, v)| (p.var(w), p.var(v))).collect();
            let a = armak_forward(tape, prop, h, &stacks)?;
            let a = b.bn.forward(tape, &mut self.store, p, a, train)?;
            h = tape.relu(a)?;
        }
        let f1 = self.fc1.forward(tape, p, h)?;
        let fc1 = tape.relu(f1)?;
        let f2 = self.fc2.forward(tape, p, fc1)?;
        let fc2 = tape.relu(f2)?;
        let logits = self.fc3.forward(tape, p, fc2)?;
        Ok(TeacherOutput { fc1, fc2, logits })
    }

    /// Inference-mode logits and FC2 features, one graph per chunk of at
    /// most [`EVAL_GRAPH_MAX_NODES`] samples.
    pub fn infer(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, _) = x.dims2()?;
        let mut logits = Vec::with_capacity(n * self.n_c);
        let mut feats = Vec::with_capacity(n * self.cfg.fc2);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_GRAPH_MAX_NODES).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = x.select_rows(&idx)?;
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false)?;
            let out = self.forward(&mut tape, &p, &chunk, false)?;
            logits.extend_from_slice(tape.value(out.logits));
            feats.extend_from_slice(tape.value(out.fc2));
            start = end;
        }
        Ok((
            Tensor::new(vec![n, self.n_c], logits)?,
            Tensor::new(vec![n, self.cfg.fc2], feats)?,
        ))
    }

    pub fn cost_report(&self) -> CostReport {
        teacher_cost(&self.cfg, self.n_c, self.input_len)
    }
}

/// Teacher accounting from its dimensions alone.
pub fn teacher_cost(cfg: &TeacherConfig, n_c: usize, input_len: usize) -> CostReport {
    let (nodes, k, stacks) = (cfg.nodes as u64, cfg.top_k as u64, cfg.stacks as u64);
    let mut params = 0u64;
    let mut flops = 0u64;
    let mut d_in = input_len as u64;
    for _ in 0..cfg.arma_layers {
        params += stacks * 2 * d_in * nodes + 2 * nodes;
        // per stack: X·W, F̃·(XW) over nnz, X·V, add, ReLU
        flops += stacks * (2 * d_in * nodes + 2 * k * nodes + 2 * d_in * nodes + 2 * nodes);
        flops += (stacks - 1) * nodes; // stack sum
        flops += 2 * nodes; // batch-norm and ReLU
        d_in = nodes;
    }
    for (a, b, act) in [
        (nodes, cfg.fc1 as u64, true),
        (cfg.fc1 as u64, cfg.fc2 as u64, true),
        (cfg.fc2 as u64, n_c as u64, false),
    ] {
        let (p, f) = linear_cost(a, b);
        params += p;
        flops += f + if act { b } else { 0 };
    }
    CostReport::new(params, flops)
}

#[derive(Debug, Clone, Copy)]
pub struct StudentOutput {
    pub fc4: Var,
    pub logits: Var,
}

pub const STUDENT_FC4: usize = 128;

#[derive(Debug, Clone)]
pub struct Student {
    pub n_c: usize,
    pub input_len: usize,
    pub store: ParamStore,
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    fc4: Linear,
    fc5: Linear,
}

impl Student {
    pub fn new<R: Rng + ?Sized>(n_c: usize, input_len: usize, rng: &mut R) -> Result<Self> {
        if n_c < 2 || input_len < 8 {
            return Err(Error::InvalidArgument(format!(
                "invalid student dimensions: n_c={n_c}, input_len={input_len}"
            )));
        }
        let mut store = ParamStore::new();
        let conv1 = Conv1d::new(&mut store, "conv1", 1, 16, 3, 2, 1, rng);
        let bn1 = BatchNorm::new(&mut store, "bn1", 16);
        let conv2 = Conv1d::new(&mut store, "conv2", 16, 32, 3, 2, 1, rng);
        let bn2 = BatchNorm::new(&mut store, "bn2", 32);
        let fc4 = Linear::new(&mut store, "fc4", 32, STUDENT_FC4, rng);
        let fc5 = Linear::new(&mut store, "fc5", STUDENT_FC4, n_c, rng);
        Ok(Self { n_c, input_len, store, conv1, bn1, conv2, bn2, fc4, fc5 })
    }

    pub fn forward(&mut self, tape: &mut Tape, p: &Binding, x: &Tensor, train: bool) -> Result<StudentOutput> {
        let (n, l) = x.dims2()?;
        if l != self.input_len {
            return Err(Error::shape("student", format!("input length {l}, expected {}", self.input_len)));
        }
        let x = tape.constant(&x.clone().reshape(vec![n, 1, l])?)?;
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.bn1.forward(tape, &mut self.store, p, h, train)?;
        let h = tape.relu(h)?;
        let h = tape.max_pool1d(h, 2, 2)?;
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.bn2.forward(tape, &mut self.store, p, h, train)?;
        let h = tape.relu(h)?;
        let h = tape.global_avg_pool(h)?;
        let f = self.fc4.forward(tape, p, h)?;
        let fc4 = tape.relu(f)?;
        let logits = self.fc5.forward(tape, p, fc4)?;
        Ok(StudentOutput { fc4, logits })
    }

    /// Inference-mode logits and FC4 features.
    pub fn infer(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, x, false)?;
        Ok((tape.tensor(out.logits), tape.tensor(out.fc4)))
    }

    pub fn cost_report(&self) -> CostReport {
        student_cost(self.n_c, self.input_len)
    }
}

/// Student accounting from its dimensions alone.
pub fn student_cost(n_c: usize, input_len: usize) -> CostReport {
    let conv = |c_in: u64, c_out: u64, l_out: u64| (c_out * c_in * 3 + c_out, 2 * c_in * 3 * c_out * l_out + c_out * l_out);
    let l1 = ((input_len + 2 - 3) / 2 + 1) as u64;
    let lp = l1 / 2;
    let l2 = ((lp as usize + 2 - 3) / 2 + 1) as u64;
    let (p1, f1) = conv(1, 16, l1);
    let (p2, f2) = conv(16, 32, l2);
    let (p4, f4) = linear_cost(32, STUDENT_FC4 as u64);
    let (p5, f5) = linear_cost(STUDENT_FC4 as u64, n_c as u64);
    let params = p1 + 2 * 16 + p2 + 2 * 32 + p4 + p5;
    let flops = f1 + 2 * 16 * l1 // batch-norm, ReLU
        + 16 * l1 // max-pool
        + f2 + 2 * 32 * l2
        + 32 * l2 // global average pool
        + f4 + STUDENT_FC4 as u64
        + f5;
    CostReport::new(params, flops)
}
