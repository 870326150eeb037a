//! Instance graphs over a minibatch and ARMA graph filters.
//!
//! A minibatch of `N` samples becomes an `N`-node graph: edge weights are
//! cosine similarities between sample feature rows, sparsified to the `k`
//! largest entries per row. Filtering happens either exactly in the spectral
//! domain (a dense eigendecomposition, used as a reference) or through the
//! first-order ARMA recursion `X̄ ← p·F·X̄ + q·X` with `F = I − L_sym`.
//!
//! Trainable ARMA convolutions live at the bottom of this module and run on
//! a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use std::fmt::Write as _;

/// Largest graph the dense spectral reference accepts.
pub const SPECTRAL_ORACLE_MAX_NODES: usize = 256;

/// Row-major sparse matrix stored as `(row, col, weight)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseAdjacency {
    pub fn row_nnz(&self, row: usize) -> usize {
        self.entries.iter().filter(|e| e.0 == row).count()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for &(i, j, w) in &self.entries {
            t.data_mut()[i * self.n + j] = w;
        }
        t
    }

    /// Column indices selected in `row`, in ascending order.
    pub fn support(&self, row: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.0 == row)
            .map(|e| e.1)
            .collect();
        s.sort_unstable();
        s
    }
}

#[derive(Debug, Clone)]
pub struct InstanceGraph {
    pub node_features: Tensor,
    /// Neighbors kept per row, when built by similarity sparsification.
    pub top_k: Option<usize>,
    /// The sparsified similarity matrix before symmetrization.
    pub adjacency: SparseAdjacency,
    pub sym_laplacian: Tensor,
    /// `I − L_sym = D^{-1/2} W D^{-1/2}`, the recursion's propagation matrix
    /// under the spectral bounds `λ_min = 0`, `λ_max = 2`.
    pub propagation: Tensor,
}

impl InstanceGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.n
    }

    /// Builds the graph from its sample features: cosine similarities, the
    /// `k` largest per row (self included, ties to the lowest column), then
    /// `W = max(Ã, Ãᵀ)` clamped at zero feeds the normalized Laplacian.
    pub fn from_features(features: &Tensor, k: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if k == 0 {
            return Err(Error::Graph("k must be at least 1".into()));
        }
        if k > n {
            return Err(Error::Graph(format!("k = {k} exceeds node count {n}")));
        }
        features.validate()?;
        let sim = cosine_similarity(features)?;
        let mut entries = Vec::with_capacity(n * k);
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let row = &sim[i * n..(i + 1) * n];
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = order[..k].to_vec();
            chosen.sort_unstable();
            entries.extend(chosen.into_iter().map(|j| (i, j, row[j])));
        }
        let adjacency = SparseAdjacency { n, entries };

        let mut w = vec![0.0f64; n * n];
        for &(i, j, v) in &adjacency.entries {
            let v = v.max(0.0);
            w[i * n + j] = w[i * n + j].max(v);
            w[j * n + i] = w[j * n + i].max(v);
        }
        let mut g = Self::from_symmetric_weights(n, w)?;
        g.node_features = features.clone();
        g.top_k = Some(k);
        g.adjacency = adjacency;
        Ok(g)
    }

    /// Builds a graph from an explicit symmetric, nonnegative weight matrix
    /// whose nodes all have positive degree.
    pub fn from_weights(weights: &Tensor) -> Result<Self> {
        let (n, m) = weights.dims2()?;
        if n != m {
            return Err(Error::Graph(format!("adjacency must be square, got {n}x{m}")));
        }
        let w = weights.data();
        for i in 0..n {
            for j in 0..n {
                if w[i * n + j] < 0.0 {
                    return Err(Error::Graph("negative edge weight".into()));
                }
                if (w[i * n + j] - w[j * n + i]).abs() > 1e-12 {
                    return Err(Error::Graph("adjacency is not symmetric".into()));
                }
            }
        }
        Self::from_symmetric_weights(n, w.to_vec())
    }

    fn from_symmetric_weights(n: usize, w: Vec<f64>) -> Result<Self> {
        let mut inv_sqrt_deg = vec![0.0; n];
        for i in 0..n {
            let deg: f64 = w[i * n..(i + 1) * n].iter().sum();
            if deg <= 0.0 {
                return Err(Error::Graph(format!("node {i} is isolated")));
            }
            inv_sqrt_deg[i] = 1.0 / deg.sqrt();
        }
        let mut prop = vec![0.0; n * n];
        let mut lap = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let a = inv_sqrt_deg[i] * w[i * n + j] * inv_sqrt_deg[j];
                prop[i * n + j] = a;
                lap[i * n + j] = if i == j { 1.0 - a } else { -a };
            }
        }
        let entries = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| w[i * n + j] != 0.0)
            .map(|(i, j)| (i, j, w[i * n + j]))
            .collect();
        Ok(Self {
            node_features: Tensor::zeros(&[n, 0]),
            top_k: None,
            adjacency: SparseAdjacency { n, entries },
            sym_laplacian: Tensor::new(vec![n, n], lap)?,
            propagation: Tensor::new(vec![n, n], prop)?,
        })
    }

    /// Eigenvalues of `L_sym` in ascending order.
    pub fn laplacian_eigenvalues(&self) -> Result<Vec<f64>> {
        let (vals, _) = self.eigen()?;
        Ok(vals)
    }

    fn eigen(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.num_nodes();
        if n > SPECTRAL_ORACLE_MAX_NODES {
            return Err(Error::Graph(format!(
                "dense eigendecomposition limited to {SPECTRAL_ORACLE_MAX_NODES} nodes, got {n}"
            )));
        }
        let l = self.sym_laplacian.data();
        for i in 0..n {
            for j in 0..i {
                if (l[i * n + j] - l[j * n + i]).abs() > 1e-10 {
                    return Err(Error::Graph("Laplacian is not symmetric".into()));
                }
            }
        }
        let m = DMatrix::from_row_slice(n, n, l);
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        Ok((vals, vecs))
    }

    /// Plain-text dump: node count, k, adjacency triplets, Laplacian spectrum.
    pub fn debug_dump(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "N {}", self.num_nodes()).unwrap();
        match self.top_k {
            Some(k) => writeln!(s, "K {k}").unwrap(),
            None => writeln!(s, "K -").unwrap(),
        }
        for &(i, j, w) in &self.adjacency.entries {
            writeln!(s, "{i} {j} {w:.12e}").unwrap();
        }
        let eig = self.laplacian_eigenvalues()?;
        let line: Vec<String> = eig.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(s, "eigenvalues {}", line.join(" ")).unwrap();
        Ok(s)
    }
}

/// `X̂X̂ᵀ` with every row of `X` scaled to unit L2 norm.
fn cosine_similarity(x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    let mut unit = x.data().to_vec();
    for i in 0..n {
        let row = &mut unit[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut sim = vec![0.0; n * n];
    gemm(n, d, n, &unit, false, &unit, true, 0.0, &mut sim);
    // A zero row is similar to nothing but itself.
    for i in 0..n {
        sim[i * n + i] = 1.0;
    }
    Ok(sim)
}

/// Exact spectral filtering `U·diag(h(λ))·Uᵀ·X` of `signal` (N × d).
pub fn spectral_filter_oracle(
    graph: &InstanceGraph,
    response: impl Fn(f64) -> f64,
    signal: &Tensor,
) -> Result<Tensor> {
    let n = graph.num_nodes();
    let (rows, d) = signal.dims2()?;
    if rows != n {
        return Err(Error::shape("spectral_filter_oracle", format!("{rows} rows for {n} nodes")));
    }
    let (vals, u) = graph.eigen()?;
    let x = DMatrix::from_row_slice(n, d, signal.data());
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        vals.iter().map(|&l| response(l)),
    ));
    let out = &u * h * u.transpose() * x;
    let data = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| out[(i, j)]).collect();
    Tensor::new(vec![n, d], data)
}

/// One recursion step `p·F·x̄ + q·x0`.
pub fn arma1_step(x_bar: &Tensor, x0: &Tensor, f: &Tensor, p: f64, q: f64) -> Result<Tensor> {
    if x_bar.shape() != x0.shape() {
        return Err(Error::shape(
            "arma1_step",
            format!("state {:?} vs input {:?}", x_bar.shape(), x0.shape()),
        ));
    }
    let fx = matmul(f, x_bar)?;
    let data = fx
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| p * a + q * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Iterates the ARMA₁ recursion from zero to its fixed point
/// `q·(I − pF)⁻¹·x0`. `L_sym` has spectrum in `[0, 2]`, so `F = I − L_sym`
/// has spectral radius at most 1 and `|p| < 1` guarantees convergence.
pub fn arma1_fixed_point(
    graph: &InstanceGraph,
    x0: &Tensor,
    p: f64,
    q: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Tensor> {
    const GAMMA_BOUND: f64 = 1.0;
    if p.abs() * GAMMA_BOUND >= 1.0 {
        return Err(Error::Convergence(format!(
            "|p|·max|γ| = {} >= 1",
            p.abs() * GAMMA_BOUND
        )));
    }
    let mut state = Tensor::zeros(x0.shape());
    for _ in 0..max_iter {
        let next = arma1_step(&state, x0, &graph.propagation, p, q)?;
        let delta = next.max_abs_diff(&state);
        state = next;
        if delta <= tol {
            return Ok(state);
        }
    }
    Err(Error::Convergence(format!(
        "no convergence to {tol} within {max_iter} iterations"
    )))
}

/// Sum of independent ARMA₁ fixed points, one per `(p_k, q_k)` stack: the
/// node-domain realization of `Σ_k q_k / (1 − p_k·γ)`.
pub fn armak_fixed_point(
    graph: &InstanceGraph,
    x0: &Tensor,
    coeffs: &[(f64, f64)],
    max_iter: usize,
    tol: f64,
) -> Result<Tensor> {
    let (first, rest) = coeffs
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("ARMA_K needs at least one stack".into()))?;
    let mut acc = arma1_fixed_point(graph, x0, first.0, first.1, max_iter, tol)?;
    for &(p, q) in rest {
        let s = arma1_fixed_point(graph, x0, p, q, max_iter, tol)?;
        for (a, b) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
    Ok(acc)
}

/// Frequency response of the summed ARMA₁ stacks at Laplacian eigenvalue
/// `lambda`, with `γ = 1 − λ`.
pub fn armak_response(coeffs: &[(f64, f64)], lambda: f64) -> f64 {
    let gamma = 1.0 - lambda;
    coeffs.iter().map(|&(p, q)| q / (1.0 - p * gamma)).sum()
}

/// Learnable weights of one ARMA₁ stack: `W` acts on the propagated state,
/// `V` on the skip input.
#[derive(Debug, Clone)]
pub struct ArmaLayerParams {
    pub w: Tensor,
    pub v: Tensor,
}

impl ArmaLayerParams {
    pub fn new(w: Tensor, v: Tensor) -> Result<Self> {
        if w.rank() != 2 || w.shape() != v.shape() {
            return Err(Error::shape(
                "ArmaLayerParams",
                format!("W {:?} and V {:?} must be equal rank-2", w.shape(), v.shape()),
            ));
        }
        Ok(Self { w, v })
    }
}

/// One trainable ARMA₁ convolution: `ReLU(F̃·X·W + X·V)`.
pub fn arma_layer_forward(tape: &mut Tape, propagation: Var, x: Var, w: Var, v: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let fxw = tape.matmul(propagation, xw)?;
    let xv = tape.matmul(x, v)?;
    let pre = tape.add(fxw, xv)?;
    tape.relu(pre)
}

/// `K` parallel ARMA₁ stacks on the same input, outputs summed.
pub fn armak_forward(tape: &mut Tape, propagation: Var, x: Var, stacks: &[(Var, Var)]) -> Result<Var> {
    let (first, rest) = stacks
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("ARMA_K needs at least one stack".into()))?;
    let mut acc = arma_layer_forward(tape, propagation, x, first.0, first.1)?;
    for &(w, v) in rest {
        let s = arma_layer_forward(tape, propagation, x, w, v)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> InstanceGraph {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n - 1 {
            w.data_mut()[i * n + i + 1] = 1.0;
            w.data_mut()[(i + 1) * n + i] = 1.0;
        }
        InstanceGraph::from_weights(&w).unwrap()
    }

    #[test]
    fn orthonormal_rows_keep_diagonal_and_lowest_tie() {
        let g = InstanceGraph::from_features(&Tensor::eye(4), 2).unwrap();
        assert_eq!(g.adjacency.support(0), vec![0, 1]);
        for i in 1..4 {
            assert_eq!(g.adjacency.support(i), vec![0, i]);
        }
        let dense = g.adjacency.to_dense();
        for i in 0..4 {
            assert!((dense.at2(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_rows_select_each_other() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![1.0, 2.0]]).unwrap();
        let g = InstanceGraph::from_features(&x, 2).unwrap();
        assert_eq!(g.adjacency.support(0), vec![0, 2]);
        assert_eq!(g.adjacency.support(2), vec![0, 2]);
        let d = g.adjacency.to_dense();
        assert!((d.at2(0, 2) - 1.0).abs() < 1e-12);
        assert!((d.at2(2, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_matches_bruteforce_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = Tensor::randn(&[8, 4], &mut rng);
            let g = InstanceGraph::from_features(&x, 2).unwrap();
            for i in 0..8 {
                let mut cos: Vec<(usize, f64)> = (0..8)
                    .map(|j| {
                        let (a, b) = (x.row(i), x.row(j));
                        let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                        let na = a.iter().map(|u| u * u).sum::<f64>().sqrt();
                        let nb = b.iter().map(|u| u * u).sum::<f64>().sqrt();
                        (j, dot / (na * nb))
                    })
                    .collect();
                cos.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                let mut expect = vec![cos[0].0, cos[1].0];
                expect.sort_unstable();
                assert_eq!(g.adjacency.support(i), expect);
                assert_eq!(g.adjacency.row_nnz(i), 2);
            }
        }
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(InstanceGraph::from_features(&Tensor::eye(3), 4), Err(Error::Graph(_))));
        assert!(InstanceGraph::from_features(&Tensor::eye(3), 0).is_err());
    }

    #[test]
    fn zero_rows_keep_only_a_self_loop() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g = InstanceGraph::from_features(&x, 1).unwrap();
        assert_eq!(g.adjacency.support(1), vec![1]);
        assert_eq!(g.propagation.at2(1, 1), 1.0);
        assert_eq!(g.propagation.at2(1, 0), 0.0);
    }

    #[test]
    fn identity_and_linear_responses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = InstanceGraph::from_features(&Tensor::randn(&[10, 3], &mut rng), 2).unwrap();
        let x = Tensor::randn(&[10, 4], &mut rng);
        let same = spectral_filter_oracle(&g, |_| 1.0, &x).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-10);
        let lx = spectral_filter_oracle(&g, |l| l, &x).unwrap();
        let direct = matmul(&g.sym_laplacian, &x).unwrap();
        assert!(lx.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn arma1_step_degenerate_coefficients() {
        let g = path_graph(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[5, 2], &mut rng);
        let xb = Tensor::randn(&[5, 2], &mut rng);
        let out = arma1_step(&xb, &x0, &g.propagation, 0.0, 0.7).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert_eq!(*a, 0.7 * b);
        }
        let zero = arma1_step(&Tensor::zeros(&[5, 2]), &x0, &g.propagation, 0.3, 0.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(arma1_step(&Tensor::zeros(&[4, 2]), &x0, &g.propagation, 0.3, 0.0).is_err());
    }

    #[test]
    fn path_graph_recursion_matches_closed_form() {
        let g = path_graph(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::randn(&[8, 3], &mut rng);
        let mut state = Tensor::zeros(&[8, 3]);
        for _ in 0..200 {
            state = arma1_step(&state, &x0, &g.propagation, 0.5, 0.5).unwrap();
        }
        let oracle = spectral_filter_oracle(&g, |l| 0.5 / (1.0 - 0.5 * (1.0 - l)), &x0).unwrap();
        assert!(state.max_abs_diff(&oracle) < 1e-8);
    }

    #[test]
    fn fixed_point_contract() {
        let g = path_graph(6);
        let x0 = Tensor::ones(&[6, 1]);
        let zero_p = arma1_fixed_point(&g, &x0, 0.0, 2.0, 10, 1e-12).unwrap();
        assert!(zero_p.data().iter().all(|&v| v == 2.0));
        assert!(matches!(
            arma1_fixed_point(&g, &x0, 1.0, 1.0, 1000, 1e-12),
            Err(Error::Convergence(_))
        ));
        assert!(matches!(
            arma1_fixed_point(&g, &x0, 0.99, 1.0, 3, 1e-12),
            Err(Error::Convergence(_))
        ));
    }

    #[test]
    fn armak_single_and_zeroed_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = InstanceGraph::from_features(&Tensor::randn(&[8, 5], &mut rng), 2).unwrap();
        let x0 = Tensor::randn(&[8, 2], &mut rng);
        let one = armak_fixed_point(&g, &x0, &[(0.4, 1.0)], 5000, 1e-13).unwrap();
        let single = arma1_fixed_point(&g, &x0, 0.4, 1.0, 5000, 1e-13).unwrap();
        assert_eq!(one, single);
        let two = armak_fixed_point(&g, &x0, &[(0.4, 1.0), (0.7, 0.0)], 5000, 1e-13).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-15);
        assert!(armak_fixed_point(&g, &x0, &[], 10, 1e-6).is_err());
    }

    #[test]
    fn laplacian_spectrum_in_unit_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let g = InstanceGraph::from_features(&Tensor::randn(&[16, 6], &mut rng), 2).unwrap();
            for l in g.laplacian_eigenvalues().unwrap() {
                assert!((-1e-8..=2.0 + 1e-8).contains(&l), "{l}");
            }
        }
    }

    #[test]
    fn edgeless_graph_layer_reduces_to_dense() {
        let n = 4;
        let g = InstanceGraph::from_weights(&Tensor::eye(n)).unwrap();
        assert!(g.propagation.max_abs_diff(&Tensor::eye(n)) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[n, 3], &mut rng);
        let w = Tensor::randn(&[3, 2], &mut rng);
        let v = Tensor::randn(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let (pv, xv, wv, vv) = (
            tape.constant(&g.propagation).unwrap(),
            tape.constant(&x).unwrap(),
            tape.constant(&w).unwrap(),
            tape.constant(&v).unwrap(),
        );
        let out = arma_layer_forward(&mut tape, pv, xv, wv, vv).unwrap();
        let xw = matmul(&x, &w).unwrap();
        let xvv = matmul(&x, &v).unwrap();
        for (k, o) in tape.value(out).iter().enumerate() {
            let e = (xw.data()[k] + xvv.data()[k]).max(0.0);
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_skip_passes_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = InstanceGraph::from_features(&Tensor::randn(&[6, 3], &mut rng), 2).unwrap();
        let x = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = tape.constant(&g.propagation).unwrap();
        let xv = tape.constant(&x).unwrap();
        let w = tape.constant(&Tensor::zeros(&[3, 3])).unwrap();
        let v = tape.constant(&Tensor::eye(3)).unwrap();
        let out = arma_layer_forward(&mut tape, pv, xv, w, v).unwrap();
        assert_eq!(tape.value(out), x.data());
    }

    #[test]
    fn debug_dump_lists_triplets_and_spectrum() {
        let g = InstanceGraph::from_features(&Tensor::eye(3), 2).unwrap();
        let dump = g.debug_dump().unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "N 3");
        assert_eq!(lines[1], "K 2");
        assert_eq!(lines.len(), 2 + 6 + 1);
        assert!(lines[8].starts_with("eigenvalues "));
    }
}
