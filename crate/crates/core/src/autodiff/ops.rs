//! Forward definitions of every primitive.

use super::kernels::{self, BnSaved, ConvGeom, ConvSaved};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::numel;

/// Per-channel batch statistics produced by a training-mode batch norm:
/// mean and unbiased variance.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Right-hand broadcasting: `rhs` must equal `lhs` in shape, be a trailing
/// suffix of it, or hold a single value.
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    let ok = lhs == rhs
        || numel(rhs) == 1
        || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")))
    }
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_broadcast(name, &sa, &sb)?;
        let (va, vb) = (self.value(a), self.value(b));
        let rn = vb.len();
        let out: Vec<f64> = va.iter().enumerate().map(|(i, &x)| f(x, vb[i % rn])).collect();
        self.push(name, sa, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::attr("log", "negative input"));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::attr("sqrt", "negative input"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::attr("sum_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &v[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("sum_axis", out_shape, out, Op::SumAxis { x: a, axis }, &[a])
    }

    fn last_axis(&self, name: &'static str, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape(name, "scalar input"))?;
        if c == 0 {
            return Err(Error::shape(name, "empty last axis"));
        }
        Ok((self.value(a).len() / c, c))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = self.last_axis("softmax", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let xs = &v[r * c..(r + 1) * c];
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (d, x) in dst.iter_mut().zip(xs) {
                *d = (x - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = self.last_axis("log_softmax", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let xs = &v[r * c..(r + 1) * c];
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (d, x) in out[r * c..(r + 1) * c].iter_mut().zip(xs) {
                *d = x - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = |s: &[usize]| -> Result<(usize, usize)> {
            match s {
                [r, c] => Ok((*r, *c)),
                _ => Err(Error::shape("matmul", format!("rank-2 operands required, got {s:?}"))),
            }
        };
        let (ar, ac) = dims(self.shape(a))?;
        let (br, bc) = dims(self.shape(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (ta={ta}, tb={tb})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a).transpose2()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let v = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), v, Op::Reshape(a), &[a])
    }

    /// Selects first-axis slices; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.tensor(a).select_rows(idx)?;
        let shape = t.shape().to_vec();
        self.push(
            "gather_rows",
            shape,
            t.into_data(),
            Op::GatherRows { x: a, idx: idx.to_vec() },
            &[a],
        )
    }

    /// 1-D convolution. `x` is `(n, c_in, l)`, `w` is `(c_out, c_in, k)`,
    /// optional bias `(c_out)`. Zero padding `pad` on both ends.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::attr("conv1d", "stride must be >= 1"));
        }
        let (n, c_in, l_in) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref s => return Err(Error::shape("conv1d", format!("input must be rank 3, got {s:?}"))),
        };
        let (c_out, c_w, k) = match *self.shape(w) {
            [o, c, k] => (o, c, k),
            ref s => return Err(Error::shape("conv1d", format!("weight must be rank 3, got {s:?}"))),
        };
        if c_w != c_in {
            return Err(Error::shape("conv1d", format!("weight expects {c_w} channels, input has {c_in}")));
        }
        if k == 0 || l_in + 2 * pad < k {
            return Err(Error::attr("conv1d", format!("kernel {k} too large for length {l_in} with pad {pad}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv1d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let l_out = (l_in + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c_in, l_in, c_out, k, stride, pad, l_out };
        let cols = kernels::im2col(self.value(x), &geom);
        let out = kernels::conv_forward(&cols, self.value(w), b.map(|b| self.value(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv1d",
            vec![n, c_out, l_out],
            out,
            Op::Conv1d(Box::new(ConvSaved { x, w, b, geom, cols })),
            &inputs,
        )
    }

    /// Batch normalization over every axis except axis 1 (channels) for
    /// rank-2 `(n, c)` or rank-3 `(n, c, l)` inputs.
    ///
    /// With `running = None` the batch statistics normalize the input and are
    /// returned (mean, unbiased variance) for the caller's running averages.
    /// With `running = Some((mean, var))` those frozen statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, l) = match *self.shape(x) {
            [n, c] => (n, c, 1),
            [n, c, l] => (n, c, l),
            ref s => return Err(Error::shape("batch_norm", format!("rank 2 or 3 required, got {s:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", "affine parameters must be (channels)"));
        }
        if eps <= 0.0 {
            return Err(Error::attr("batch_norm", "eps must be positive"));
        }
        let m = n * l;
        let train = running.is_none();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::attr("batch_norm", "training mode needs at least 2 values per channel"));
                }
                let (mean, var) = kernels::channel_stats(self.value(x), n, c, l);
                let unbiased = var.iter().map(|v| v * m as f64 / (m as f64 - 1.0)).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * l;
                for li in 0..l {
                    let h = (xv[base + li] - mean[ch]) * inv_std[ch];
                    xhat[base + li] = h;
                    out[base + li] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let saved = BnSaved { x, gamma, beta, xhat, inv_std, train, n, c, l };
        let v = self.push("batch_norm", shape, out, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Max-pooling along the last axis of a rank-3 `(n, c, l)` input.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 {
            return Err(Error::attr("max_pool1d", "kernel and stride must be >= 1"));
        }
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] => (n, c, l),
            ref s => return Err(Error::shape("max_pool1d", format!("rank 3 required, got {s:?}"))),
        };
        if l < kernel {
            return Err(Error::attr("max_pool1d", format!("kernel {kernel} exceeds length {l}")));
        }
        let l_out = (l - kernel) / stride + 1;
        let (out, argmax) = kernels::max_pool(self.value(x), n * c, l, kernel, stride, l_out);
        self.push("max_pool1d", vec![n, c, l_out], out, Op::MaxPool1d { x, argmax }, &[x])
    }

    /// Mean over the last axis of `(n, c, l)`, giving `(n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, l) = match *self.shape(x) {
            [n, c, l] if l > 0 => (n, c, l),
            ref s => return Err(Error::shape("global_avg_pool", format!("rank 3 required, got {s:?}"))),
        };
        let v = self.value(x);
        let out = (0..n * c)
            .map(|r| v[r * l..(r + 1) * l].iter().sum::<f64>() / l as f64)
            .collect();
        self.push("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool(x), &[x])
    }

    /// `D[i][j] = ‖x_i − y_j‖²` for row sets `x (m×d)`, `y (n×d)`, computed
    /// from explicit differences.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (m, d) = match *self.shape(x) {
            [m, d] => (m, d),
            ref s => return Err(Error::shape("pairwise_sq_dist", format!("rank 2 required, got {s:?}"))),
        };
        let n = match *self.shape(y) {
            [n, d2] if d2 == d => n,
            ref s => {
                return Err(Error::shape(
                    "pairwise_sq_dist",
                    format!("feature widths differ: {:?} vs {s:?}", self.shape(x)),
                ))
            }
        };
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xi = &xv[i * d..(i + 1) * d];
            for j in 0..n {
                let yj = &yv[j * d..(j + 1) * d];
                out[i * n + j] = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        self.push("pairwise_sq_dist", vec![m, n], out, Op::PairwiseSqDist(x, y), &[x, y])
    }
}
