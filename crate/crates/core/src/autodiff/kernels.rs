//! Numeric kernels for the structured primitives (convolution, batch norm,
//! pooling). Forward and backward live together so their index conventions
//! cannot drift apart.

use super::Var;
use crate::linalg::gemm;

#[derive(Debug)]
pub(crate) struct ConvSaved {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    pub geom: ConvGeom,
    /// im2col matrix, `(c_in·k) × (n·l_out)` row-major.
    pub cols: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub l_out: usize,
}

impl ConvGeom {
    fn nt(&self) -> usize {
        self.n * self.l_out
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let nt = g.nt();
    let mut cols = vec![0.0; g.c_in * g.k * nt];
    for c in 0..g.c_in {
        for kk in 0..g.k {
            let row = &mut cols[(c * g.k + kk) * nt..(c * g.k + kk + 1) * nt];
            for n in 0..g.n {
                let xs = &x[(n * g.c_in + c) * g.l_in..(n * g.c_in + c + 1) * g.l_in];
                let dst = &mut row[n * g.l_out..(n + 1) * g.l_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.l_in {
                        *d = xs[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Returns the `(n, c_out, l_out)` output.
pub(crate) fn conv_forward(cols: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let nt = g.nt();
    let ck = g.c_in * g.k;
    let mut y2 = vec![0.0; g.c_out * nt];
    gemm(g.c_out, ck, nt, w, false, cols, false, 0.0, &mut y2);
    let mut out = vec![0.0; g.n * g.c_out * g.l_out];
    for o in 0..g.c_out {
        let bias = b.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &y2[o * nt + n * g.l_out..o * nt + (n + 1) * g.l_out];
            let dst = &mut out[(n * g.c_out + o) * g.l_out..(n * g.c_out + o + 1) * g.l_out];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

/// Rearranges the upstream `(n, c_out, l_out)` gradient into `c_out × (n·l_out)`.
pub(crate) fn conv_grad_matrix(dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let nt = g.nt();
    let mut d2 = vec![0.0; g.c_out * nt];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let src = &dy[(n * g.c_out + o) * g.l_out..(n * g.c_out + o + 1) * g.l_out];
            d2[o * nt + n * g.l_out..o * nt + (n + 1) * g.l_out].copy_from_slice(src);
        }
    }
    d2
}

pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let nt = g.nt();
    for c in 0..g.c_in {
        for kk in 0..g.k {
            let row = &dcols[(c * g.k + kk) * nt..(c * g.k + kk + 1) * nt];
            for n in 0..g.n {
                let dst = &mut dx[(n * g.c_in + c) * g.l_in..(n * g.c_in + c + 1) * g.l_in];
                let src = &row[n * g.l_out..(n + 1) * g.l_out];
                for (t, s) in src.iter().enumerate() {
                    let pos = (t * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.l_in {
                        dst[pos as usize] += s;
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
    pub n: usize,
    pub c: usize,
    pub l: usize,
}

impl BnSaved {
    #[inline]
    pub fn idx(&self, ni: usize, ch: usize, li: usize) -> usize {
        (ni * self.c + ch) * self.l + li
    }
}

/// Batch statistics of `x` laid out `(n, c, l)`: per-channel mean and biased
/// variance over the `n·l` entries.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            for li in 0..l {
                s += x[(ni * c + ch) * l + li];
            }
        }
        let mu = s / m;
        let mut v = 0.0;
        for ni in 0..n {
            for li in 0..l {
                let d = x[(ni * c + ch) * l + li] - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Max over windows of the last axis. Ties resolve to the lowest index.
pub(crate) fn max_pool(
    x: &[f64],
    rows: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    l_out: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; rows * l_out];
    let mut arg = vec![0; rows * l_out];
    for r in 0..rows {
        let xs = &x[r * l_in..(r + 1) * l_in];
        for t in 0..l_out {
            let start = t * stride;
            let mut best = start;
            for j in start + 1..start + k {
                if xs[j] > xs[best] {
                    best = j;
                }
            }
            out[r * l_out + t] = xs[best];
            arg[r * l_out + t] = r * l_in + best;
        }
    }
    (out, arg)
}
