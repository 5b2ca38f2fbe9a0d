//! Reverse-mode differentiation over a computation recorded per forward pass.
//!
//! A [`Graph`] is an append-only tape of tensor operations. Parameters enter
//! the tape through [`Graph::bind`]; whether a bound parameter is trainable
//! is decided by the graph's trainability predicate, so model code never has
//! to know what is frozen. Nodes that do not depend on a trainable parameter
//! are skipped entirely during the backward sweep.
//!
//! Shape errors inside the tape are programming errors and panic. Non-finite
//! values are recorded (first offending op) and surface as
//! [`Error::NonFinite`] from [`Graph::check`] and [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamSet};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Select {
        sources: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    MeanGroups {
        x: Var,
        groups: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        rows: Vec<usize>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Select { .. } => "select_rows",
            Op::MeanGroups { .. } => "mean_groups",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::MaskedMse { .. } => "masked_mse",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

type Trainable = Box<dyn Fn(&str) -> bool + Send>;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    trainable_params: Vec<(String, Var)>,
    trainable: Trainable,
    nonfinite: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Every bound parameter is trainable.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            trainable_params: Vec::new(),
            trainable: Box::new(|_| true),
            nonfinite: None,
        }
    }

    /// Only parameters for which `pred(name)` holds receive gradients; the
    /// rest enter the tape as constants.
    pub fn with_trainable(pred: impl Fn(&str) -> bool + Send + 'static) -> Self {
        Graph {
            trainable: Box::new(pred),
            ..Self::new()
        }
    }

    /// A graph in which nothing is trainable (pure inference).
    pub fn inference() -> Self {
        Self::with_trainable(|_| false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node, or the recorded non-finite error.
    pub fn scalar(&self, v: Var) -> Result<T> {
        self.check()?;
        Ok(self.value(v).item())
    }

    pub fn check(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds parameter `name` of `params`. Binding the same name twice returns
    /// the same node.
    pub fn bind(&mut self, params: &ParamSet<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = params.expect(name).clone();
        let train = (self.trainable)(name);
        let v = self.push(t, Op::Leaf, train);
        self.bound.insert(name.to_string(), v);
        if train {
            self.trainable_params.push((name.to_string(), v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        let out = self.value(a).matmul(self.value(b)).expect("checked shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x[r, :] + bias` for every row of a `[rows, n]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(x).cols();
        assert_eq!(self.value(bias).len(), n, "bias length");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{}: {e}", op.name()));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Normalizes each row of `x` over its last axis, then applies the affine
    /// map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xt = self.value(x);
        let n = xt.cols();
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta");
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_n = T::one() / T::lit(n as f64);
        let rows = xt.rows();
        let mut xhat = Vec::with_capacity(xt.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xt.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks_exact(n) {
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &gv), &bv)| h * gv + bv));
        }
        let out = Tensor::from_vec_unchecked(xt.shape(), out).expect("same shape");
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·seq, 3·dim]` holding the query, key and value
    /// projections side by side; the result is `[batch·seq, dim]` with heads
    /// concatenated. Each group of `seq` consecutive rows is one sequence.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qt = self.value(qkv);
        assert_eq!(qt.rows(), batch * seq, "attention rows");
        let width = qt.cols();
        assert_eq!(width % 3, 0, "attention qkv width");
        let dim = width / 3;
        assert_eq!(dim % heads, 0, "attention heads");
        let dh = dim / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let data = qt.data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * dim];
        let mut logits = vec![T::zero(); seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, dim + h * dh, 2 * dim + h * dh);
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &data[(base + i) * width + qo..][..dh];
                    let mut max = T::neg_infinity();
                    for (j, l) in logits.iter_mut().enumerate() {
                        let k = &data[(base + j) * width + ko..][..dh];
                        *l = crate::tensor::dot(q, k) * scale;
                        max = max.max(*l);
                    }
                    let mut z = T::zero();
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let prow = &mut probs[p_base + i * seq..][..seq];
                    for (p, &l) in prow.iter_mut().zip(&logits) {
                        *p = l / z;
                    }
                    let orow = &mut out[(base + i) * dim + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let v = &data[(base + j) * width + vo..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec_unchecked(&[batch * seq, dim], out).expect("shape");
        let ng = self.ng(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Gathers rows: output row `i` is row `index[i].1` of `sources[index[i].0]`.
    /// All sources must share the same column count.
    pub fn select_rows(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Var {
        let cols = self.value(sources[0]).cols();
        for &s in sources {
            assert_eq!(self.value(s).cols(), cols, "select_rows column mismatch");
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            out.extend_from_slice(self.value(sources[s as usize]).row(r as usize));
        }
        let out = Tensor::from_vec_unchecked(&[index.len(), cols], out).expect("shape");
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(
            out,
            Op::Select {
                sources: sources.to_vec(),
                index,
            },
            ng,
        )
    }

    /// Averages each of `groups` consecutive row blocks: `[groups·n, d] → [groups, d]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Var {
        let xt = self.value(x);
        let (rows, d) = (xt.rows(), xt.cols());
        assert!(groups > 0 && rows % groups == 0, "mean_groups rows");
        let n = rows / groups;
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); groups * d];
        for (r, row) in xt.data().chunks_exact(d).enumerate() {
            let o = &mut out[(r / n) * d..][..d];
            for (a, &v) in o.iter_mut().zip(row) {
                *a += v * inv;
            }
        }
        let out = Tensor::from_vec_unchecked(&[groups, d], out).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::MeanGroups { x, groups }, ng)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lt = self.value(logits);
        let (b, k) = (lt.rows(), lt.cols());
        assert_eq!(labels.len(), b, "one label per row");
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for (row, &y) in lt.data().chunks_exact(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} classes");
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lz = z.ln() + max;
            loss += lz - row[y];
            probs.extend(row.iter().map(|&v| (v - lz).exp()));
        }
        let out = Tensor::scalar(loss / T::lit(b as f64));
        let ng = self.ng(logits);
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean squared error over the listed rows of `pred` against a constant
    /// target of the same shape.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<T>, rows: Vec<usize>) -> Var {
        let pt = self.value(pred);
        assert_eq!(pt.len(), target.len(), "masked_mse target size");
        assert!(!rows.is_empty(), "masked_mse needs at least one row");
        let c = pt.cols();
        let mut acc = T::zero();
        for &r in &rows {
            for (&p, &t) in pt.row(r).iter().zip(&target[r * c..(r + 1) * c]) {
                acc += (p - t) * (p - t);
            }
        }
        let out = Tensor::scalar(acc / T::lit((rows.len() * c) as f64));
        let ng = self.ng(pred);
        self.push(out, Op::MaskedMse { pred, target, rows }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Exact reverse-mode gradients of scalar `loss` with respect to every
    /// trainable bound parameter. Parameters that `loss` does not depend on
    /// get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.check()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (node {i})",
                    node.op.name()
                )));
            }
            self.backprop(i, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.trainable_params {
            let shape = self.shape(*v);
            let t = match grads[v.0].take() {
                Some(g) => Tensor::from_vec_unchecked(shape, g).expect("grad shape"),
                None => Tensor::zeros(shape),
            };
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
            }
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    // ga += g · bᵀ
                    gemm(m, n, k, T::one(), View::rows(g, n), View::rows(bv.data(), n).t(), T::one(), ga, 0, k, 1);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb += aᵀ · g
                    gemm(k, m, n, T::one(), View::rows(av.data(), k).t(), View::rows(g, n), T::one(), gb, 0, n, 1);
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (row_g, row_h) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(row_g).zip(row_h) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_n = T::one() / T::lit(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (row_g, row_h)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = row_g[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * row_h[j];
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] * (dxhat[j] - s1 - row_h[j] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let Some(gq) = self.acc(grads, *qkv) else { return };
                let data = self.value(*qkv).data();
                let width = self.value(*qkv).cols();
                let dim = width / 3;
                let dh = dim / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let seq = *seq;
                let mut dp = vec![T::zero(); seq];
                for b in 0..*batch {
                    let base = b * seq;
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, dim + h * dh, 2 * dim + h * dh);
                        let p_base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &g[(base + i) * dim + h * dh..][..dh];
                            let prow = &probs[p_base + i * seq..][..seq];
                            // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                            let mut s = T::zero();
                            for j in 0..seq {
                                let vrow = (base + j) * width + vo;
                                dp[j] = crate::tensor::dot(go, &data[vrow..vrow + dh]);
                                s += dp[j] * prow[j];
                                let p = prow[j];
                                for (o, &gv) in gq[vrow..vrow + dh].iter_mut().zip(go) {
                                    *o += p * gv;
                                }
                            }
                            // dS_ij = p_ij (dP_ij - Σ_k p_ik dP_ik), then through the scaled dot
                            let qrow = (base + i) * width + qo;
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = (base + j) * width + ko;
                                for d in 0..dh {
                                    let kv = data[krow + d];
                                    let qv = data[qrow + d];
                                    gq[qrow + d] += ds * kv;
                                    gq[krow + d] += ds * qv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Select { sources, index } => {
                let cols = node.value.cols();
                for (si, &src) in sources.iter().enumerate() {
                    let Some(gs) = self.acc(grads, src) else { continue };
                    for (out_row, &(s, r)) in index.iter().enumerate() {
                        if s as usize == si {
                            let r = r as usize;
                            add_into(&mut gs[r * cols..(r + 1) * cols], &g[out_row * cols..(out_row + 1) * cols]);
                        }
                    }
                }
            }
            Op::MeanGroups { x, groups } => {
                let xt = self.value(*x);
                let (rows, d) = (xt.rows(), xt.cols());
                let n = rows / groups;
                let inv = T::one() / T::lit(n as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let src = &g[(r / n) * d..][..d];
                        for (o, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let w = g[0] / T::lit(labels.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            gl[r * k + j] += w * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let pt = self.value(*pred);
                let c = pt.cols();
                let w = g[0] * T::lit(2.0) / T::lit((rows.len() * c) as f64);
                if let Some(gp) = self.acc(grads, *pred) {
                    for &r in rows {
                        for j in r * c..(r + 1) * c {
                            gp[j] += w * (pt.data()[j] - target[j]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh u) = σ(2u), and exp is much cheaper than tanh.
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    x / (T::one() + (-u2).exp())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let s = T::one() / (T::one() + (-u2).exp());
    let du2 = T::lit(2.0 * GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * du2
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// ‖g_ad − g_fd‖₂ / max(‖g_fd‖₂, tiny) over all coordinates.
    pub rel_l2: f64,
    /// Largest per-coordinate |g_ad − g_fd| / max(|g_fd|, floor).
    pub max_rel_coord: f64,
    pub coords: usize,
}

/// Central finite-difference oracle for a scalar loss built by `build`.
///
/// `build` must record the loss on the provided graph from the given
/// parameters and return the loss node. Only forward values are used for the
/// finite differences, so the oracle is independent of [`Graph::backward`].
/// `coord_floor` keeps the per-coordinate ratio meaningful for gradients
/// close to zero.
pub fn check_gradients<T: Scalar>(
    params: &ParamSet<T>,
    h: f64,
    coord_floor: f64,
    build: impl Fn(&mut Graph<T>, &ParamSet<T>) -> Var,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let ad = g.backward(loss)?;
    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = build(&mut g, p);
        Ok(g.scalar(l)?.as_f64())
    };
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut coords = 0;
    let mut work = params.clone();
    for (name, grad) in ad.iter() {
        for i in 0..grad.len() {
            let orig = work.expect(name).data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + T::lit(h);
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - T::lit(h);
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i].as_f64();
            diff2 += (a - fd).powi(2);
            ref2 += fd * fd;
            max_rel = max_rel.max((a - fd).abs() / fd.abs().max(coord_floor));
            coords += 1;
        }
    }
    Ok(GradCheck {
        rel_l2: diff2.sqrt() / ref2.sqrt().max(1e-300),
        max_rel_coord: max_rel,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1(name: &str, data: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let n = data.len();
        p.insert(name, Tensor::new(&[n], data).unwrap());
        p
    }

    #[test]
    fn sum_gradient_is_ones() {
        let p = p1("p", vec![0.3, -1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.bind(&p, "p");
        let l = g.sum(v);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let p = p1("p", vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.bind(&p, "p");
        let sq = g.mul(v, v);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut p = p1("a", vec![1.0, 2.0]);
        p.insert("b", Tensor::new(&[3], vec![1.0; 3]).unwrap());
        let mut g = Graph::new();
        let a = g.bind(&p, "a");
        let _b = g.bind(&p, "b");
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient_entry() {
        let mut p = p1("enc.w", vec![1.0, 2.0]);
        p.insert("head.w", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let mut g = Graph::with_trainable(|n| n.starts_with("head."));
        let a = g.bind(&p, "enc.w");
        let b = g.bind(&p, "head.w");
        let m = g.mul(a, b);
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get("enc.w").is_none());
        assert_eq!(grads.get("head.w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = p1("p", vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.bind(&p, "p");
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_in_forward_is_reported() {
        let p = p1("p", vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.bind(&p, "p");
        let bad = g.constant(Tensor::from_vec_unchecked(&[2], vec![f64::NAN, 0.0]).unwrap());
        let m = g.mul(v, bad);
        let l = g.sum(m);
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
        assert!(g.scalar(l).is_err());
    }

    #[test]
    fn softmax_cross_entropy_value() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(&[1, 4], vec![0.0; 4]).unwrap());
        let ce = g.softmax_cross_entropy(l, &[2]);
        assert!((g.scalar(ce).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_fwd(x + h) - gelu_fwd(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
