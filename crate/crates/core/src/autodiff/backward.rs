//! Backward rules, one arm per primitive.

use super::kernels;
use super::{accumulate, Node, Op, Var};
use crate::linalg::gemm;

fn val(nodes: &[Node], v: Var) -> &[f64] {
    &nodes[v.0].value
}

/// Pushes `g` (gradient of node `i`) into the gradient slots of its inputs.
pub(super) fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| reduce_into(gb, g, |gi, _| gi));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| reduce_into(gb, g, |gi, _| -gi));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let rn = vb.len();
            accumulate(nodes, grads, *a, |ga| {
                for (k, gk) in ga.iter_mut().enumerate() {
                    *gk += g[k] * vb[k % rn];
                }
            });
            accumulate(nodes, grads, *b, |gb| reduce_into(gb, g, |gi, k| gi * va[k]));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let rn = vb.len();
            accumulate(nodes, grads, *a, |ga| {
                for (k, gk) in ga.iter_mut().enumerate() {
                    *gk += g[k] / vb[k % rn];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                reduce_into(gb, g, |gi, k| {
                    let d = vb[k % rn];
                    -gi * va[k] / (d * d)
                })
            });
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::MulScalar(a, s) => accumulate(nodes, grads, *a, |ga| {
            for (gk, gi) in ga.iter_mut().zip(g) {
                *gk += gi * s;
            }
        }),
        Op::Exp(a) => accumulate(nodes, grads, *a, |ga| {
            for k in 0..ga.len() {
                ga[k] += g[k] * y[k];
            }
        }),
        Op::Log(a) => {
            let va = val(nodes, *a);
            accumulate(nodes, grads, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] / va[k];
                }
            })
        }
        Op::Sqrt(a) => accumulate(nodes, grads, *a, |ga| {
            for k in 0..ga.len() {
                ga[k] += g[k] / (2.0 * y[k]);
            }
        }),
        Op::Relu(a) => {
            let va = val(nodes, *a);
            accumulate(nodes, grads, *a, |ga| {
                for k in 0..ga.len() {
                    if va[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            })
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            for gk in ga.iter_mut() {
                *gk += g[0];
            }
        }),
        Op::Mean(a) => accumulate(nodes, grads, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            for gk in ga.iter_mut() {
                *gk += s;
            }
        }),
        Op::SumAxis { x, axis } => {
            let shape = &nodes[x.0].shape;
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        add_into(dst, &g[o * inner..(o + 1) * inner]);
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let c = *node.shape.last().unwrap();
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        ga[r * c + k] += ys[k] * (gs[k] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let c = *node.shape.last().unwrap();
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for k in 0..c {
                        ga[r * c + k] += gs[k] - ys[k].exp() * total;
                    }
                }
            })
        }
        Op::MatMul { a, b, ta, tb } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let k = va.len() / m;
            // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G.
            accumulate(nodes, grads, *a, |ga| {
                if *ta {
                    // dA (k×m) = op(B)·Gᵀ
                    gemm(k, n, m, vb, *tb, g, true, 1.0, ga);
                } else {
                    // dA (m×k) = G·op(B)ᵀ
                    gemm(m, n, k, g, false, vb, !*tb, 1.0, ga);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                if *tb {
                    // dB (n×k) = Gᵀ·op(A)
                    gemm(n, m, k, g, true, va, *ta, 1.0, gb);
                } else {
                    // dB (k×n) = op(A)ᵀ·G
                    gemm(k, m, n, va, !*ta, g, false, 1.0, gb);
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (node.shape[0], node.shape[1]);
            accumulate(nodes, grads, *a, |ga| {
                // output (r×c) is the transpose of input (c×r)
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            })
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::GatherRows { x, idx } => {
            let stride = if idx.is_empty() { 0 } else { g.len() / idx.len() };
            accumulate(nodes, grads, *x, |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut gx[src * stride..(src + 1) * stride],
                        &g[r * stride..(r + 1) * stride],
                    );
                }
            })
        }
        Op::Conv1d(s) => {
            let geom = &s.geom;
            let nt = geom.n * geom.l_out;
            let ck = geom.c_in * geom.k;
            let d2 = kernels::conv_grad_matrix(g, geom);
            accumulate(nodes, grads, s.w, |gw| {
                gemm(geom.c_out, nt, ck, &d2, false, &s.cols, true, 1.0, gw);
            });
            if let Some(b) = s.b {
                accumulate(nodes, grads, b, |gb| {
                    for o in 0..geom.c_out {
                        gb[o] += d2[o * nt..(o + 1) * nt].iter().sum::<f64>();
                    }
                });
            }
            if nodes[s.x.0].requires_grad {
                let mut dcols = vec![0.0; ck * nt];
                gemm(ck, geom.c_out, nt, val(nodes, s.w), true, &d2, false, 0.0, &mut dcols);
                accumulate(nodes, grads, s.x, |gx| kernels::col2im_add(&dcols, geom, gx));
            }
        }
        Op::BatchNorm(s) => {
            let gamma = val(nodes, s.gamma);
            let mut sum_g = vec![0.0; s.c];
            let mut sum_gx = vec![0.0; s.c];
            for ni in 0..s.n {
                for ch in 0..s.c {
                    for li in 0..s.l {
                        let k = s.idx(ni, ch, li);
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * s.xhat[k];
                    }
                }
            }
            accumulate(nodes, grads, s.gamma, |gg| add_into(gg, &sum_gx));
            accumulate(nodes, grads, s.beta, |gb| add_into(gb, &sum_g));
            accumulate(nodes, grads, s.x, |gx| {
                let m = (s.n * s.l) as f64;
                for ni in 0..s.n {
                    for ch in 0..s.c {
                        let scale = gamma[ch] * s.inv_std[ch];
                        for li in 0..s.l {
                            let k = s.idx(ni, ch, li);
                            gx[k] += if s.train {
                                scale / m * (m * g[k] - sum_g[ch] - s.xhat[k] * sum_gx[ch])
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
            });
        }
        Op::MaxPool1d { x, argmax } => accumulate(nodes, grads, *x, |gx| {
            for (gi, &src) in g.iter().zip(argmax) {
                gx[src] += gi;
            }
        }),
        Op::GlobalAvgPool(x) => {
            let l = nodes[x.0].shape[2];
            accumulate(nodes, grads, *x, |gx| {
                for (r, gi) in g.iter().enumerate() {
                    let s = gi / l as f64;
                    for v in &mut gx[r * l..(r + 1) * l] {
                        *v += s;
                    }
                }
            })
        }
        Op::PairwiseSqDist(x, yv) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let (xs, ys) = (val(nodes, *x), val(nodes, *yv));
            let d = xs.len() / m.max(1);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            gx[i * d + t] += gij * (xs[i * d + t] - ys[j * d + t]);
                        }
                    }
                }
            });
            accumulate(nodes, grads, *yv, |gy| {
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            gy[j * d + t] -= gij * (xs[i * d + t] - ys[j * d + t]);
                        }
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Folds a full-size gradient onto a (possibly broadcast) right operand:
/// element `k` of `g` lands on `k % dst.len()`.
fn reduce_into(dst: &mut [f64], g: &[f64], f: impl Fn(f64, usize) -> f64) {
    let rn = dst.len();
    for (k, &gk) in g.iter().enumerate() {
        dst[k % rn] += f(gk, k);
    }
}
