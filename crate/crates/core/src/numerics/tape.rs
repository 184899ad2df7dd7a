//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value. A node requires a
//! gradient when it is a parameter leaf or when any of its inputs does;
//! constants and everything computed purely from constants never get a
//! gradient slot. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because inputs always
//! precede their consumers.
//!
//! Leaf gradients persist across calls to `backward` and accumulate until
//! [`Tape::zero_grad`].

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    ConcatCols(Var, Var),
    RowSumSq(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    LogSoftmaxRows(Var),
    Transpose(Var),
    Diag(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of allocated gradient buffers (leaf accumulators).
    pub fn allocated_grads(&self) -> usize {
        self.leaf_grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let shape = self.value(v).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::contract(format!(
                "{context}: expected a matrix, got shape {shape:?}"
            ))),
        }
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension {
                context: "matmul inner extent".into(),
                expected: k,
                found: kb,
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            trans_b,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_bias")?;
        let bl = self.value(bias).len();
        if bl != n {
            return Err(Error::Dimension {
                context: "bias length".into(),
                expected: n,
                found: bl,
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(y, &bj)| *y = *y + bj);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Sigmoid-weighted linear unit `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    fn zip_with(&self, a: Var, b: Var, context: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, context)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a, "concat_cols lhs")?;
        let (mb, q) = self.matrix_dims(b, "concat_cols rhs")?;
        if m != mb {
            return Err(Error::Dimension {
                context: "concat_cols rows".into(),
                expected: m,
                found: mb,
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&va[i * p..(i + 1) * p]);
            data.extend_from_slice(&vb[i * q..(i + 1) * q]);
        }
        let value = Tensor::matrix(m, p + q, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Per-row squared L2 norm: `[m, n] -> [m]`.
    pub fn row_sum_sq(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "row_sum_sq")?;
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&x| x * x).sum())
            .collect();
        let value = Tensor::new(vec![m], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::RowSumSq(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Scales every row to unit L2 norm; a zero row is a degenerate-embedding error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "l2_normalize_rows")?;
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in value.data_mut().chunks_mut(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding(format!(
                    "row {i} has norm {norm:?} before normalization"
                )));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Row-wise `x - logsumexp(x)`, max-shifted.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "log_softmax_rows")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let value = Tensor::matrix(n, m, transposed(self.value(x).data(), m, n))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "diag")?;
        if m != n {
            return Err(Error::Dimension {
                context: "diag of non-square matrix".into(),
                expected: m,
                found: n,
            });
        }
        let d = self.value(x).data();
        let value = Tensor::vector((0..n).map(|i| d[i * n + i]).collect());
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Diag(x), rg))
    }

    /// Propagates `d loss / d node` back to every parameter leaf, adding into
    /// the leaf accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract("loss does not depend on any parameter"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                if self.leaf_grads.len() < self.nodes.len() {
                    self.leaf_grads.resize_with(self.nodes.len(), || None);
                }
                accumulate(&mut self.leaf_grads[idx], g);
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            &Op::MatMul { a, b, trans_b } => {
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if wants(a) {
                    // dA = dC · op(B)ᵀ: [m,n]·[n,k]
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, !trans_b, m, n, k, g.data(), vb.data(), &mut da, false);
                    send(a, Tensor::matrix(m, k, da).unwrap());
                }
                if wants(b) {
                    if trans_b {
                        // B is [n,k]; dB = dCᵀ · A
                        let mut db = vec![T::zero(); n * k];
                        gemm(true, false, n, m, k, g.data(), va.data(), &mut db, false);
                        send(b, Tensor::matrix(n, k, db).unwrap());
                    } else {
                        // B is [k,n]; dB = Aᵀ · dC
                        let mut db = vec![T::zero(); k * n];
                        gemm(true, false, k, m, n, va.data(), g.data(), &mut db, false);
                        send(b, Tensor::matrix(k, n, db).unwrap());
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(bias) {
                    let n = g.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                    }
                    send(bias, Tensor::new(self.value(bias).shape().to_vec(), db).unwrap());
                }
                if wants(x) {
                    send(x, g);
                }
            }
            &Op::Silu(x) => {
                let vx = self.value(x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * silu_grad(xv))
                    .collect();
                send(x, Tensor::new(vx.shape().to_vec(), data).unwrap());
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    send(a, g.clone());
                }
                send(b, g);
            }
            &Op::Sub(a, b) => {
                if wants(b) {
                    send(b, g.map(|v| -v));
                }
                send(a, g);
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    send(a, hadamard(&g, self.value(b)));
                }
                if wants(b) {
                    send(b, hadamard(&g, self.value(a)));
                }
            }
            &Op::Scale(a, f) => send(a, g.map(|v| v * f)),
            &Op::Square(a) => {
                let two = T::of(2.0);
                send(a, hadamard(&g, self.value(a)).map(|v| v * two));
            }
            &Op::ConcatCols(a, b) => {
                let p = self.value(a).last_dim();
                let q = self.value(b).last_dim();
                let m = g.rows();
                let (mut ga, mut gb) = (Vec::with_capacity(m * p), Vec::with_capacity(m * q));
                for row in g.data().chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                if wants(a) {
                    send(a, Tensor::matrix(m, p, ga).unwrap());
                }
                if wants(b) {
                    send(b, Tensor::matrix(m, q, gb).unwrap());
                }
            }
            &Op::RowSumSq(a) => {
                let va = self.value(a);
                let n = va.last_dim();
                let two = T::of(2.0);
                let mut data = Vec::with_capacity(va.len());
                for (row, &gi) in va.data().chunks(n).zip(g.data()) {
                    data.extend(row.iter().map(|&x| two * x * gi));
                }
                send(a, Tensor::new(va.shape().to_vec(), data).unwrap());
            }
            &Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                send(a, Tensor::full(&shape, g.item()));
            }
            &Op::Mean(a) => {
                let va = self.value(a);
                let each = g.item() / T::of(va.len() as f64);
                send(a, Tensor::full(va.shape(), each));
            }
            Op::L2NormalizeRows { x, norms } => {
                // y = x/|x|; dx = (dy - y (y·dy)) / |x|
                let y = &node.value;
                let n = y.last_dim();
                let mut data = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.data().chunks(n).zip(g.data().chunks(n)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                send(*x, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            &Op::LogSoftmaxRows(x) => {
                // dx = dy - softmax · Σ dy
                let y = &node.value;
                let n = y.last_dim();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let total: T = gr.iter().copied().sum();
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * total));
                }
                send(x, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            &Op::Transpose(x) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                send(x, Tensor::matrix(n, m, transposed(g.data(), m, n)).unwrap());
            }
            &Op::Diag(x) => {
                let n = g.len();
                let mut data = vec![T::zero(); n * n];
                for (i, &gv) in g.data().iter().enumerate() {
                    data[i * n + i] = gv;
                }
                send(x, Tensor::matrix(n, n, data).unwrap());
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn transposed<T: Scalar>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
