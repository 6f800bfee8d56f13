//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! `rows × cols` matrices of `f64`; batch dimension is always the row index.
//! Parameters enter through [`Graph::param`], which caches one leaf per
//! parameter so that repeated use accumulates into a single gradient.
//!
//! Non-finite results are not reported op by op; the first offending node is
//! remembered and surfaced by [`Graph::check_finite`] and [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::objective::pixel_nll;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddConst(Var),
    Silu(Var),
    ConcatCols(Var, Var),
    WeightedRowSumSq(Var, Vec<f64>),
    Mean(Var),
    Sum(Var),
    /// Per-row categorical pixel negative log-likelihood; stores E_p[scale(v)]
    /// for each element.
    PixelNll {
        z: Var,
        alpha0: f64,
        sigma2: f64,
        targets: Vec<u8>,
        expected: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::AddConst(..) => "add_const",
            Op::Silu(..) => "silu",
            Op::ConcatCols(..) => "concat_cols",
            Op::WeightedRowSumSq(..) => "weighted_row_sum_sq",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::PixelNll { .. } => "pixel_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Gradients with respect to every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One buffer per parameter, aligned with the store; zero for parameters
    /// the loss does not reach.
    pub grads: Vec<Vec<f64>>,
    /// Names of parameters that never appeared in the recorded computation.
    pub unused: Vec<String>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.index()]
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.unused.retain(|n| other.unused.contains(n));
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    nonfinite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// The single value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    /// Error naming the first op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// A constant input.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push(value, rows, cols, Op::Leaf)
    }

    /// Leaf for a stored parameter; the same leaf is returned on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let (rows, cols) = t.matrix_dims();
        let v = self.push(t.data.clone(), rows, cols, Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        self.push(out, m, n, Op::MatMul(a, b))
    }

    /// `a + bias` with a `1 × cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape mismatch");
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(out, r, c, Op::AddBias(a, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "{}: shape mismatch", op.name());
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(out, r, c, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| k * x).collect();
        self.push(out, r, c, Op::Scale(a, k))
    }

    /// Multiplies row `i` by `k[i]`.
    pub fn scale_rows(&mut self, a: Var, k: Vec<f64>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r, "scale_rows length mismatch");
        let out = self
            .value(a)
            .chunks_exact(c)
            .zip(&k)
            .flat_map(|(row, s)| row.iter().map(move |x| s * x))
            .collect();
        self.push(out, r, c, Op::ScaleRows(a, k))
    }

    /// `a + k` for a constant matrix `k` of the same shape.
    pub fn add_const(&mut self, a: Var, k: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r * c, "add_const shape mismatch");
        let out = self.value(a).iter().zip(k).map(|(x, y)| x + y).collect();
        self.push(out, r, c, Op::AddConst(a))
    }

    /// `x · logistic(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| x * crate::schedule::logistic(x))
            .collect();
        self.push(out, r, c, Op::Silu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = self.shape(a);
        let (r2, cb) = self.shape(b);
        assert_eq!(r, r2, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        self.push(out, r, ca + cb, Op::ConcatCols(a, b))
    }

    /// Column vector with entry `i` equal to `w[i] · Σ_j a[i, j]²`.
    pub fn weighted_row_sum_sq(&mut self, a: Var, w: Vec<f64>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(w.len(), r, "weighted_row_sum_sq length mismatch");
        let out = self
            .value(a)
            .chunks_exact(c)
            .zip(&w)
            .map(|(row, wi)| wi * row.iter().map(|x| x * x).sum::<f64>())
            .collect();
        self.push(out, r, 1, Op::WeightedRowSumSq(a, w))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![m], 1, 1, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    /// Per-row negative log-likelihood of 8-bit targets under the discretized
    /// categorical built around `z`; output is `rows × 1`.
    pub fn pixel_nll(&mut self, z: Var, targets: Vec<u8>, alpha0: f64, sigma2: f64) -> Var {
        let (r, c) = self.shape(z);
        assert_eq!(targets.len(), r * c, "pixel_nll target count mismatch");
        let mut expected = Vec::with_capacity(r * c);
        let mut out = vec![0.0; r];
        for (i, row) in self.value(z).chunks_exact(c).enumerate() {
            for (j, &zv) in row.iter().enumerate() {
                let (nll, e) = pixel_nll(zv, targets[i * c + j], alpha0, sigma2);
                out[i] += nll;
                expected.push(e);
            }
        }
        self.push(
            out,
            r,
            1,
            Op::PixelNll {
                z,
                alpha0,
                sigma2,
                targets,
                expected,
            },
        )
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);

        let mut grads: Vec<Vec<f64>> = (0..store.len())
            .map(|i| vec![0.0; store.tensor(ParamId::from_index(i)).data.len()])
            .collect();

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => grads[p.index()] = g,
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, &g, (n as isize, 1), self.value(*b), (1, n as isize), 0.0, &mut da);
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a), (1, k as isize), &g, (n as isize, 1), 0.0, &mut db);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(&mut adj, *bias, gb);
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| k * x).collect());
                }
                Op::ScaleRows(a, k) => {
                    let ga = g
                        .chunks_exact(c)
                        .zip(k)
                        .flat_map(|(row, s)| row.iter().map(move |x| s * x))
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::Silu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gi, &x)| {
                            let s = crate::schedule::logistic(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    let mut ga = Vec::with_capacity(r * ca);
                    let mut gb = Vec::with_capacity(r * cb);
                    for row in g.chunks_exact(c) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::WeightedRowSumSq(a, w) => {
                    let ca = self.shape(*a).1;
                    let ga = self
                        .value(*a)
                        .chunks_exact(ca)
                        .enumerate()
                        .flat_map(|(i, row)| {
                            let k = 2.0 * w[i] * g[i];
                            row.iter().map(move |x| k * x)
                        })
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::PixelNll {
                    z,
                    alpha0,
                    sigma2,
                    targets,
                    expected,
                } => {
                    let cz = self.shape(*z).1;
                    let gz = targets
                        .iter()
                        .zip(expected)
                        .enumerate()
                        .map(|(k, (&x, e))| {
                            let sx = crate::data::scale_pixel_unchecked(x);
                            g[k / cz] * alpha0 * (e - sx) / sigma2
                        })
                        .collect();
                    accumulate(&mut adj, *z, gz);
                }
            }
        }

        let unused = (0..store.len())
            .map(ParamId::from_index)
            .filter(|p| !self.params.contains_key(p))
            .map(|p| store.name(p).to_string())
            .collect();
        Ok(Gradients { grads, unused })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `C = alpha · A B + beta · C` with explicit (row, col) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches given
    // the dense strides passed by the callers in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Tensor;

    fn store_with(w: Vec<f64>, shape: Vec<usize>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(shape, w).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn quadratic_loss_gradient_is_analytic() {
        // L = ‖W x - y‖², dL/dW = 2 (W x - y) xᵀ
        let (store, wid) = store_with(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], vec![2, 3]);
        let x = [0.3, -0.2, 0.9];
        let y = [1.0, -0.5];
        let mut g = Graph::new();
        let w = g.param(&store, wid);
        let xcol = g.constant(x.to_vec(), 3, 1);
        let wx = g.matmul(w, xcol);
        let yv = g.constant(y.to_vec(), 2, 1);
        let r = g.sub(wx, yv);
        let l = g.weighted_row_sum_sq(r, vec![1.0, 1.0]);
        let loss = g.sum(l);
        let grads = g.backward(loss, &store).unwrap();
        let wd = &store.tensor(wid).data;
        for i in 0..2 {
            let wxi: f64 = (0..3).map(|j| wd[i * 3 + j] * x[j]).sum();
            for j in 0..3 {
                let expected = 2.0 * (wxi - y[i]) * x[j];
                assert!((grads.get(wid)[i * 3 + j] - expected).abs() < 1e-12);
            }
        }
        assert!(grads.unused.is_empty());
    }

    #[test]
    fn unused_parameter_is_reported_with_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let b = store.insert("b", Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let sq = g.mul(av, av);
        let loss = g.sum(sq);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(a), &[4.0]);
        assert_eq!(grads.get(b), &[0.0]);
        assert_eq!(grads.unused, vec!["b".to_string()]);
    }

    #[test]
    fn nonfinite_is_reported_with_op_name() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.constant(vec![1e308, 1.0], 1, 2);
        let b = g.scale(a, 10.0);
        let l = g.sum(b);
        match g.backward(l, &store) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "scale");
                assert_eq!(node, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::new(vec![3, 2], vec![0.3, -0.4, 0.8, 0.1, -0.6, 0.5]).unwrap())
            .unwrap();
        let b = store.insert("b", Tensor::new(vec![1, 2], vec![0.05, -0.1]).unwrap()).unwrap();
        let build = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(vec![0.2, -0.7, 1.1, 0.4, 0.3, -0.9], 2, 3);
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let h = g.matmul(x, wv);
            let h = g.add_bias(h, bv);
            let h = g.silu(h);
            let h2 = g.scale_rows(h, vec![0.5, 2.0]);
            let c = g.concat_cols(h, h2);
            let m = g.mul(c, c);
            let m = g.add_const(m, &[0.1; 8]);
            let s = g.sub(m, c);
            let r = g.weighted_row_sum_sq(s, vec![1.5, 0.25]);
            let l = g.mean(r);
            (g, l)
        };
        let (g, l) = build(&store);
        let grads = g.backward(l, &store).unwrap();
        let h = 1e-6;
        for id in [w, b] {
            for k in 0..store.tensor(id).data.len() {
                let mut plus = store.clone();
                plus.tensor_mut(id).data[k] += h;
                let mut minus = store.clone();
                minus.tensor_mut(id).data[k] -= h;
                let (gp, lp) = build(&plus);
                let (gm, lm) = build(&minus);
                let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                let an = grads.get(id)[k];
                assert!((fd - an).abs() < 1e-7, "param {id:?}[{k}]: fd {fd} vs {an}");
            }
        }
    }
}
