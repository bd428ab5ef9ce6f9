//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants, free variables, or parameters bound by name from a
//! [`ParamSet`]; binding the same name twice returns the same node, so a
//! module applied to several inputs shares its weights. After
//! [`Graph::backward`] the graph is spent and gradients can be read per node
//! or written into parameter sets with [`Graph::write_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ClampMin(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute0213 {
        a: Var,
        dims: [usize; 4],
    },
    ConcatLast(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MinLast {
        a: Var,
        argmin: Vec<usize>,
    },
    MeanRows(Var),
    RowNorm {
        a: Var,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    PairwiseSqDist(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    grads: Vec<Option<Vec<T>>>,
    spent: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.detached(), false)
    }

    /// Free differentiable leaf, not tied to any parameter set.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value.detached(), true)
    }

    /// Binds a named parameter. Repeated binds of one name share a node.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.detached();
        let v = self.leaf(t, true)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`, or `[B,m,k] x [B,n,k]^T` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            let asl = &da[i * m * k..(i + 1) * m * k];
            let bsl = &db[i * k * n..(i + 1) * k * n];
            let csl = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, asl, bsl, csl);
            } else {
                gemm_nn(m, k, n, asl, bsl, csl);
            }
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        self.push(
            "batch_matmul",
            t,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        )
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional table).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_bcast", a, b)?;
        let nb = self.value(b).len();
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push("add_bcast", t, Op::AddBcast(a, b), &[a, b])
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_bcast", a, b)?;
        let nb = self.value(b).len();
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % nb])
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push("mul_bcast", t, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.tanh());
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.exp());
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.ln());
        self.push("ln", t, Op::Ln(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * x);
        self.push("square", t, Op::Square(a), &[a])
    }

    /// `max(a, floor)` elementwise; gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", t, Op::ClampMin(a, floor), &[a])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let t = Tensor::new(self.shape(a), data)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let nt = T::lit(n as f64);
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).detached().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// `[p,q,r,s] -> [p,r,q,s]`; splits and merges attention heads.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "permute_0213",
                lhs: s.to_vec(),
                rhs: vec![4],
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let [p, q, r, w] = dims;
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for i in 0..p {
            for j in 0..q {
                for k in 0..r {
                    let from = ((i * q + j) * r + k) * w;
                    let to = ((i * r + k) * q + j) * w;
                    out[to..to + w].copy_from_slice(&src[from..from + w]);
                }
            }
        }
        let t = Tensor::new(&[p, r, q, w], out)?;
        self.push("permute_0213", t, Op::Permute0213 { a, dims }, &[a])
    }

    /// `[n,p] ++ [n,q] -> [n,p+q]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("concat_last", a, b));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.data(a)[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.data(b)[i * q..(i + 1) * q]);
        }
        let t = Tensor::new(&[n, p + q], out)?;
        self.push("concat_last", t, Op::ConcatLast(a, b), &[a, b])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean_all"));
        }
        let s = self.data(a).iter().copied().sum::<T>() / T::lit(n as f64);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = last_dim(&s);
        let data = self
            .data(a)
            .chunks(n)
            .map(|r| r.iter().copied().sum())
            .collect();
        let t = Tensor::new(&s[..s.len().saturating_sub(1)], data)?;
        self.push("sum_last", t, Op::SumLast(a), &[a])
    }

    /// Minimum over the last axis; the gradient routes to the first argmin.
    pub fn min_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = last_dim(&s);
        if n == 0 {
            return Err(Error::Empty("min_last"));
        }
        let mut argmin = Vec::new();
        let mut data = Vec::new();
        for row in self.data(a).chunks(n) {
            let mut best = 0;
            for j in 1..n {
                if row[j] < row[best] {
                    best = j;
                }
            }
            argmin.push(best);
            data.push(row[best]);
        }
        let t = Tensor::new(&s[..s.len().saturating_sub(1)], data)?;
        self.push("min_last", t, Op::MinLast { a, argmin }, &[a])
    }

    /// Mean over rows: `[n,k] -> [k]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::invalid(format!(
                "mean_rows expects non-empty [n,k], got {s:?}"
            )));
        }
        let (n, k) = (s[0], s[1]);
        let mut out = vec![T::zero(); k];
        for row in self.data(a).chunks(k) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push("mean_rows", Tensor::from_vec(out), Op::MeanRows(a), &[a])
    }

    /// Euclidean norm of each row: `[n,d] -> [n]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let data = self
            .data(a)
            .chunks(d)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let t = Tensor::new(&s[..s.len().saturating_sub(1)], data)?;
        self.push("row_norm", t, Op::RowNorm { a }, &[a])
    }

    /// Projects each row onto the unit sphere. Zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let mut out = self.data(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(nrm);
            if nrm > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / nrm);
            }
        }
        let t = Tensor::new(&s, out)?;
        self.push("normalize_rows", t, Op::NormalizeRows { a, norms }, &[a])
    }

    /// Squared distances between rows: `[n,d], [k,d] -> [n,k]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.mismatch("pairwise_sq_dist", a, b));
        }
        let (n, k, d) = (sa[0], sb[0], sa[1]);
        let (za, cb) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let zi = &za[i * d..(i + 1) * d];
            for j in 0..k {
                let cj = &cb[j * d..(j + 1) * d];
                out[i * k + j] = zi.iter().zip(cj).map(|(&x, &y)| (x - y) * (x - y)).sum();
            }
        }
        let t = Tensor::new(&[n, k], out)?;
        self.push("pairwise_sq_dist", t, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::GraphSpent);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| gemm_nt(m, n, k, g, bd, ga));
                acc(b, &mut |gb| gemm_tn(k, m, n, ad, g, gb));
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for i in 0..bs {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bsl = &bd[i * k * n..(i + 1) * k * n];
                        let gas = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, gs, bsl, gas);
                        } else {
                            gemm_nt(m, n, k, gs, bsl, gas);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..bs {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let asl = &ad[i * m * k..(i + 1) * m * k];
                        let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn(n, m, k, gs, asl, gbs);
                        } else {
                            gemm_tn(k, m, n, asl, gs, gbs);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y)
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
            &Op::AddBcast(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    let nb = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + gi;
                    }
                });
            }
            &Op::MulBcast(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                let nb = bd.len();
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bd[i % nb];
                    }
                });
                acc(b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + gi * ad[i];
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + c * y);
            }),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Relu(a) => {
                let ad = self.data(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            &Op::ClampMin(a, floor) => {
                let ad = self.data(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > floor {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            &Op::Tanh(a) => acc(a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * (T::one() - out[i] * out[i]);
                }
            }),
            &Op::Sigmoid(a) => acc(a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * out[i] * (T::one() - out[i]);
                }
            }),
            &Op::Exp(a) => acc(a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * out[i];
                }
            }),
            &Op::Ln(a) => {
                let ad = self.data(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] / ad[i];
                    }
                });
            }
            &Op::Square(a) => {
                let ad = self.data(a);
                let two = T::lit(2.0);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + two * ad[i] * g[i];
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = last_dim(node.value.shape());
                acc(a, &mut |ga| {
                    for ((gr, yr), gar) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for j in 0..n {
                            gar[j] = gar[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = last_dim(node.value.shape());
                let nt = T::lit(n as f64);
                let gd = self.data(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((gr, hr), gxr)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gd[j];
                            sum_d = sum_d + d;
                            sum_dh = sum_dh + d * hr[j];
                        }
                        let scale = rstd[r] / nt;
                        for j in 0..n {
                            let d = gr[j] * gd[j];
                            gxr[j] = gxr[j] + scale * (nt * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
            }
            &Op::Permute0213 { a, dims } => {
                let [p, q, r, w] = dims;
                acc(a, &mut |ga| {
                    for i in 0..p {
                        for j in 0..q {
                            for k in 0..r {
                                let src = ((i * q + j) * r + k) * w;
                                let dst = ((i * r + k) * q + j) * w;
                                add_into(&mut ga[src..src + w], &g[dst..dst + w]);
                            }
                        }
                    }
                });
            }
            &Op::ConcatLast(a, b) => {
                let (n, p) = (self.shape(a)[0], self.shape(a)[1]);
                let q = self.shape(b)[1];
                acc(a, &mut |ga| {
                    for i in 0..n {
                        add_into(
                            &mut ga[i * p..(i + 1) * p],
                            &g[i * (p + q)..i * (p + q) + p],
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..n {
                        add_into(
                            &mut gb[i * q..(i + 1) * q],
                            &g[i * (p + q) + p..(i + 1) * (p + q)],
                        );
                    }
                });
            }
            &Op::SumAll(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g[0])),
            &Op::MeanAll(a) => {
                let n = T::lit(self.value(a).len() as f64);
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g[0] / n));
            }
            &Op::SumLast(a) => {
                let n = last_dim(self.shape(a));
                acc(a, &mut |ga| {
                    for (row, &gi) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x = *x + gi);
                    }
                });
            }
            Op::MinLast { a, argmin } => {
                let n = last_dim(self.shape(*a));
                acc(*a, &mut |ga| {
                    for (r, (&j, &gi)) in argmin.iter().zip(g).enumerate() {
                        ga[r * n + j] = ga[r * n + j] + gi;
                    }
                });
            }
            &Op::MeanRows(a) => {
                let s = self.shape(a);
                let (n, k) = (s[0], s[1]);
                let inv = T::one() / T::lit(n as f64);
                acc(a, &mut |ga| {
                    for row in ga.chunks_mut(k) {
                        for j in 0..k {
                            row[j] = row[j] + g[j] * inv;
                        }
                    }
                });
            }
            &Op::RowNorm { a } => {
                let d = last_dim(self.shape(a));
                let ad = self.data(a);
                acc(a, &mut |ga| {
                    for (r, &nrm) in out.iter().enumerate() {
                        if nrm > T::zero() {
                            for j in 0..d {
                                ga[r * d + j] = ga[r * d + j] + g[r] * ad[r * d + j] / nrm;
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows { a, norms } => {
                let d = last_dim(self.shape(*a));
                acc(*a, &mut |ga| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm <= T::zero() {
                            continue;
                        }
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = gr.iter().zip(y).map(|(&x, &v)| x * v).sum();
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + (gr[j] - y[j] * dot) / nrm;
                        }
                    }
                });
            }
            &Op::PairwiseSqDist(a, b) => {
                let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
                let k = self.shape(b)[0];
                let (ad, bd) = (self.data(a), self.data(b));
                let two = T::lit(2.0);
                if needs(a) {
                    acc(a, &mut |ga| {
                        for i in 0..n {
                            for j in 0..k {
                                let w = two * g[i * k + j];
                                for t in 0..d {
                                    ga[i * d + t] =
                                        ga[i * d + t] + w * (ad[i * d + t] - bd[j * d + t]);
                                }
                            }
                        }
                    });
                }
                if needs(b) {
                    acc(b, &mut |gb| {
                        for i in 0..n {
                            for j in 0..k {
                                let w = two * g[i * k + j];
                                for t in 0..d {
                                    gb[j * d + t] =
                                        gb[j * d + t] - w * (ad[i * d + t] - bd[j * d + t]);
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Nodes the loss does not depend on report `None`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes gradients into every parameter of `params`: bound and reached
    /// parameters get their gradient, all others get zeros.
    pub fn write_grads(&self, params: &mut ParamSet<T>) -> Result<()> {
        if !self.spent {
            return Err(Error::invalid("write_grads called before backward"));
        }
        for (name, t) in params.iter_mut() {
            let g = self
                .bound
                .get(name)
                .and_then(|&v| self.grad(v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); t.len()]);
            t.set_grad(g)?;
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1], &[2.0])).unwrap();
        let b = g.constant(t(&[1, 1], &[3.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_and_power_rule() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(2.0)).unwrap();
        let x = g.constant(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(w, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0]);

        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.square(w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_gradient_matches_finite_difference() {
        // d/dŷ (ŷ - y)^2 at ŷ=1, y=0
        let f = |yhat: f64| {
            let mut g = Graph::new();
            let p = g.variable(Tensor::scalar(yhat)).unwrap();
            let y = g.constant(Tensor::scalar(0.0)).unwrap();
            let d = g.sub(p, y).unwrap();
            let l = g.square(d).unwrap();
            let l = g.mean_all(l).unwrap();
            let v = g.value(l).item().unwrap();
            g.backward(l).unwrap();
            (v, g.grad(p).unwrap()[0])
        };
        let h = 1e-5;
        let fd = (f(1.0 + h).0 - f(1.0 - h).0) / (2.0 * h);
        let (_, analytic) = f(1.0);
        assert!((fd - 2.0).abs() < 1e-8);
        assert!((analytic - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(1.0)).unwrap();
        let y = g.square(w).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphSpent)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.ln(a), Err(Error::NonFinite("ln"))));
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut params = ParamSet::new();
        params.register("a", Tensor::scalar(2.0)).unwrap();
        params.register("b", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&params, "a").unwrap();
        let _b = g.param(&params, "b").unwrap();
        let y = g.square(a).unwrap();
        g.backward(y).unwrap();
        g.write_grads(&mut params).unwrap();
        assert_eq!(params.get("a").unwrap().grad().unwrap(), &[4.0]);
        assert_eq!(params.get("b").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut params = ParamSet::new();
        params.register("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&params, "w").unwrap();
        let w2 = g.param(&params, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w1).unwrap(), &[6.0]);
    }
}
