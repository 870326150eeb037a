//! Parameter storage, layer building blocks and the SGD update.
//!
//! A [`ParamStore`] owns every tensor of a model: trainable parameters and
//! non-trainable buffers (batch-norm running statistics). Each training step
//! binds the parameters onto a fresh tape, runs the forward pass against the
//! returned [`Binding`], and after `backward` hands the binding to
//! [`Sgd::step`].

use rand::Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    kind: EntryKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Tape handles for one bound [`ParamStore`]; buffers stay unbound.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is bound")
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: Tensor, kind: EntryKind) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate tensor name {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, EntryKind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, EntryKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(name, tensor, kind)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, EntryKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.kind))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    /// Places every parameter on the tape, as gradient-tracking leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            vars.push(match e.kind {
                EntryKind::Param if trainable => Some(tape.param(&e.value)?),
                EntryKind::Param => Some(tape.constant(&e.value)?),
                EntryKind::Buffer => None,
            });
        }
        Ok(Binding { vars, trainable })
    }

    /// Squared L2 norm of the gradients bound to this store.
    pub fn grad_norm_sq(&self, tape: &Tape, binding: &Binding) -> f64 {
        binding
            .vars
            .iter()
            .flatten()
            .filter_map(|v| tape.grad(*v))
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Whether any bound parameter received a gradient.
    pub fn has_grads(&self, tape: &Tape, binding: &Binding) -> bool {
        binding.vars.iter().flatten().any(|v| tape.grad(*v).is_some())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Replaces tensor values by name; every name must exist with the same
    /// shape and every entry must be covered.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let e = self
                .entries
                .iter_mut()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if e.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

/// Stochastic gradient descent, optionally with heavy-ball momentum
/// `v ← μ·v + ∇θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// Updates every bound parameter that received a gradient. Buffers and
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, binding: &Binding) -> Result<()> {
        if !binding.trainable {
            return Ok(());
        }
        self.velocity.resize(store.entries.len(), None);
        for ((e, v), vel) in store.entries.iter_mut().zip(&binding.vars).zip(&mut self.velocity) {
            let (EntryKind::Param, Some(v)) = (e.kind, v) else { continue };
            let Some(g) = tape.grad(*v) else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd" });
            }
            if self.momentum > 0.0 {
                let vel = vel.get_or_insert_with(|| vec![0.0; g.len()]);
                for ((w, vi), gi) in e.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                    *vi = self.momentum * *vi + gi;
                    *w -= self.lr * *vi;
                }
            } else {
                for (w, gi) in e.value.data_mut().iter_mut().zip(g) {
                    *w -= self.lr * gi;
                }
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Fully connected layer, weight `(in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_param(&format!("{name}.weight"), kaiming_uniform(&[d_in, d_out], d_in, rng));
        let b = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// 1-D convolution, weight `(c_out, c_in, k)`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel;
        let w = store.add_param(&format!("{name}.weight"), kaiming_uniform(&[c_out, c_in, kernel], fan_in, rng));
        let b = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out, kernel, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.conv1d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }

    pub fn out_len(&self, l_in: usize) -> usize {
        (l_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    /// Normalizes with batch statistics when `train` (and folds them into
    /// the running averages), with the running averages otherwise.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, p: &Binding, x: Var, train: bool) -> Result<Var> {
        let (g, b) = (p.var(self.gamma), p.var(self.beta));
        if train {
            let (y, stats) = tape.batch_norm(x, g, b, None, BN_EPS)?;
            let BatchStats { mean, var } = stats.expect("training mode returns statistics");
            for (r, m) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            Ok(y)
        } else {
            let rm = store.get(self.running_mean).data().to_vec();
            let rv = store.get(self.running_var).data().to_vec();
            Ok(tape.batch_norm(x, g, b, Some((&rm, &rv)), BN_EPS)?.0)
        }
    }
}
