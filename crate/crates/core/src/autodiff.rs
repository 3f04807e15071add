//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Leaves created
//! with [`Tape::leaf`] are tracked; constants from [`Tape::constant`] (and
//! anything computed only from constants) are not, and backward skips them.
//! Gradients can be requested for any tracked leaf, which covers both
//! parameter gradients (training) and input gradients (perturbation crafting
//! and trajectory attacks).
//!
//! Tapes are cheap and meant to be thrown away after one backward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    BroadcastRows(Var),
    Concat(Var, Var),
    L2NormSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive operations. Node inputs always precede
/// the node itself, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the current value of `v` into an untracked constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.is_tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.is_tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Mean(a), tracked)
    }

    /// Sum of squared elements.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).norm_sq());
        let tracked = self.is_tracked(a);
        self.push(value, Op::L2NormSq(a), tracked)
    }

    /// Repeats a vector `[n]` into a `[rows × n]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows],
            });
        }
        let n = t.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(value, Op::BroadcastRows(a), tracked))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::Shape {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::matrix(rows, ca + cb, data)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(value, Op::Concat(a, b), tracked))
    }

    /// Matrix product. 1-D operands act as a row (lhs) or column (rhs) vector
    /// and the corresponding output dimension is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, shape) = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(shape, out)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// Returns `∂root/∂w` for each `w` in `wrt`.
    ///
    /// `root` must hold a single element. Every `w` must be a tracked leaf;
    /// leaves that do not influence `root` get a zero gradient.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        for &w in wrt {
            if !matches!(self.nodes[w.0].op, Op::Leaf) {
                return Err(Error::Detached(w.0));
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if self.is_tracked(root) {
            grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            // Keep leaf gradients for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.0)
                    .and_then(Option::clone)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*w).shape()))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.is_tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.is_tracked(a) {
                    let ga = g.zip_map(self.value(b), "mul", |g, y| g * y).expect("shape checked in forward");
                    self.accumulate(grads, a, ga);
                }
                if self.is_tracked(b) {
                    let gb = g.zip_map(self.value(a), "mul", |g, x| g * x).expect("shape checked in forward");
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.value()));
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let fill = g.value() / t.numel() as f64;
                self.accumulate(grads, a, Tensor::full(t.shape(), fill));
            }
            Op::L2NormSq(a) => {
                let s = 2.0 * g.value();
                self.accumulate(grads, a, self.value(a).scale(s));
            }
            Op::Silu(a) => {
                let ga = g
                    .zip_map(self.value(a), "silu", |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("same shape");
                self.accumulate(grads, a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("same shape");
                self.accumulate(grads, a, ga);
            }
            Op::Sin(a) => {
                let ga = g.zip_map(self.value(a), "sin", |g, x| g * x.cos()).expect("same shape");
                self.accumulate(grads, a, ga);
            }
            Op::Cos(a) => {
                let ga = g.zip_map(self.value(a), "cos", |g, x| -g * x.sin()).expect("same shape");
                self.accumulate(grads, a, ga);
            }
            Op::BroadcastRows(a) => {
                let n = self.value(a).numel();
                let mut ga = vec![0.0; n];
                for i in 0..g.rows() {
                    for (acc, v) in ga.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, a, Tensor::vector(ga));
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let rows = g.rows();
                if self.is_tracked(a) {
                    let data = (0..rows).flat_map(|i| g.row(i)[..ca].to_vec()).collect();
                    self.accumulate(grads, a, Tensor::matrix(rows, ca, data).expect("concat split"));
                }
                if self.is_tracked(b) {
                    let data = (0..rows).flat_map(|i| g.row(i)[ca..].to_vec()).collect();
                    self.accumulate(grads, b, Tensor::matrix(rows, cb, data).expect("concat split"));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n, _) = matmul_dims(ta.shape(), tb.shape()).expect("checked in forward");
                if self.is_tracked(a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    let ga = Tensor::new(ta.shape().to_vec(), ga).expect("shape of lhs");
                    self.accumulate(grads, a, ga);
                }
                if self.is_tracked(b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    let gb = Tensor::new(tb.shape().to_vec(), gb).expect("shape of rhs");
                    self.accumulate(grads, b, gb);
                }
            }
        }
    }
}

/// Resolves `(m, k, n, output shape)` for a matmul of the given operand shapes.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (m, k, a_vec) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return Err(err()),
    };
    let (k2, n, b_vec) = match b {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    let shape = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => vec![],
    };
    Ok((m, k, n, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_vector() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let v = tape.constant(Tensor::vector(vec![3.0, -4.0]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out), &Tensor::vector(vec![3.0, -4.0]));
    }

    #[test]
    fn l2_norm_sq_of_3_4() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.l2_norm_sq(v);
        assert_eq!(tape.value(n).value(), 25.0);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_map_adjoint() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let y = tape.matmul(wv, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s, &[x]).unwrap();
        // Wᵀ·1 = column sums
        assert_eq!(g[0].data(), &[0.0, 2.5, 7.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(&[2, 3]));
        let s = tape.l2_norm_sq(x);
        let g = tape.backward(s, &[x, unused]).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y, &[x]), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constant_in_wrt_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        assert!(matches!(tape.backward(s, &[c]), Err(Error::Detached(_))));
        let d = tape.detach(x);
        assert!(matches!(tape.backward(s, &[d]), Err(Error::Detached(_))));
    }

    #[test]
    fn shape_mismatch_names_operands() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn broadcast_and_concat_backward() {
        let mut tape = Tape::new();
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let m = tape.leaf(Tensor::zeros(&[3, 1]));
        let rows = tape.broadcast_rows(b, 3).unwrap();
        let cat = tape.concat(rows, m).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 3]);
        let w = tape.constant(Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 3]).unwrap());
        let prod = tape.mul(cat, w).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s, &[b, m]).unwrap();
        assert_eq!(g[0].data(), &[3.0, 6.0]);
        assert_eq!(g[1].data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn elementwise_derivatives() {
        let xs = [-1.3, -0.1, 0.4, 2.2];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.to_vec()));
        let s = tape.sin(x);
        let c = tape.cos(x);
        let a = tape.silu(x);
        let r = tape.relu(x);
        let t1 = tape.add(s, c).unwrap();
        let t2 = tape.add(a, r).unwrap();
        let t3 = tape.sub(t1, t2).unwrap();
        let m = tape.mean(t3);
        let g = tape.backward(m, &[x]).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let sg = sigmoid(x);
            let d_silu = sg * (1.0 + x * (1.0 - sg));
            let d_relu = if x > 0.0 { 1.0 } else { 0.0 };
            let expected = (x.cos() - x.sin() - d_silu - d_relu) / xs.len() as f64;
            assert!((g[0].data()[i] - expected).abs() < 1e-15);
        }
    }
}
