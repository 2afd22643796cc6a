use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, permute};
use super::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Subgradient at 0 is 0.
    Relu,
    /// Tanh approximation.
    Gelu,
    Tanh,
    Sigmoid,
}

pub(super) enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    /// `b` is broadcast over the leading axes of `a`.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Softmax {
        a: Var,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Activation {
        a: Var,
        kind: Activation,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        inverse: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Select {
        a: Var,
        offset: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    BceWithLogits {
        logit: Var,
        target: F,
    },
}

impl<F> Op<F> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::Scale { a, .. }
            | Op::Softmax { a, .. }
            | Op::Activation { a, .. }
            | Op::Dropout { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Select { a, .. }
            | Op::Sum { a } => vec![*a],
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_COEFF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_SCALE) * (x + F::lit(GELU_COEFF) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_SCALE) * (x + F::lit(GELU_COEFF) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_SCALE) * (F::one() + F::lit(3.0 * GELU_COEFF) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

impl<F: Scalar> Tape<F> {
    fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor<F>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let values: Vec<&Tensor<F>> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&values)
    }

    /// Matrix product `[m×k]·[k×n]`, batched `[B×m×k]·[B×k×n]`, or a batched
    /// left operand against a shared `[k×n]` right operand.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, op) = self.with_values(&[a, b], |v| {
            let (sa, sb) = (v[0].shape(), v[1].shape());
            let mismatch = || Error::shape("matmul", sa, sb);
            let (batch, m, k, b_batched) = match sa.len() {
                2 => (1, sa[0], sa[1], false),
                3 => (sa[0], sa[1], sa[2], sb.len() == 3),
                _ => return Err(mismatch()),
            };
            let n = match (sa.len(), sb.len()) {
                (_, 2) if sb[0] == k => sb[1],
                (3, 3) if sb[0] == batch && sb[1] == k => sb[2],
                _ => return Err(mismatch()),
            };
            let (ad, bd) = (v[0].data(), v[1].data());
            let mut out = vec![F::zero(); batch * m * n];
            for t in 0..batch {
                let b_off = if b_batched { t * k * n } else { 0 };
                gemm_nn(
                    &ad[t * m * k..(t + 1) * m * k],
                    &bd[b_off..b_off + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let shape = if sa.len() == 2 {
                vec![m, n]
            } else {
                vec![batch, m, n]
            };
            Ok((
                Tensor::new(shape, out)?,
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    b_batched,
                },
            ))
        })?;
        Ok(self.record(value, op))
    }

    /// Elementwise sum. `b` may have the shape of a trailing suffix of `a`'s
    /// shape, in which case it is repeated over `a`'s leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| {
            let (sa, sb) = (v[0].shape(), v[1].shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::shape("add", sa, sb));
            }
            let bd = v[1].data();
            let data = v[0]
                .data()
                .chunks(bd.len())
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect();
            Tensor::new(sa.to_vec(), data)
        })?;
        Ok(self.record(value, Op::Add { a, b }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(&[a, b], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(Error::shape("mul", v[0].shape(), v[1].shape()));
            }
            let data = v[0]
                .data()
                .iter()
                .zip(v[1].data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(v[0].shape().to_vec(), data)
        })?;
        Ok(self.record(value, Op::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, factor: F) -> Var {
        let value = self.with_values(&[a], |v| v[0].map(|x| x * factor));
        self.record(value, Op::Scale { a, factor })
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, axis_len, inner) = self.with_values(&[a], |v| {
            let shape = v[0].shape();
            if axis >= shape.len() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: shape.len(),
                });
            }
            let axis_len = shape[axis];
            let inner = numel(&shape[axis + 1..]);
            let outer = numel(&shape[..axis]);
            let x = v[0].data();
            let mut out = vec![F::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let idx = |j: usize| base + j * inner;
                    let max = (0..axis_len)
                        .map(|j| x[idx(j)])
                        .fold(F::neg_infinity(), F::max);
                    let mut total = F::zero();
                    for j in 0..axis_len {
                        let e = (x[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total = total + e;
                    }
                    for j in 0..axis_len {
                        out[idx(j)] = out[idx(j)] / total;
                    }
                }
            }
            Ok((Tensor::new(shape.to_vec(), out)?, axis_len, inner))
        })?;
        Ok(self.record(value, Op::Softmax { a, axis_len, inner }))
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd) = self.with_values(&[x, gamma, beta], |v| {
            let shape = v[0].shape();
            let width = *shape.last().ok_or_else(|| Error::shape("layer_norm", shape, &[]))?;
            for p in [v[1], v[2]] {
                if p.shape() != [width] {
                    return Err(Error::shape("layer_norm", shape, p.shape()));
                }
            }
            let (g, b) = (v[1].data(), v[2].data());
            let n = F::lit(width as f64);
            let eps = F::lit(eps);
            let mut out = Vec::with_capacity(v[0].len());
            let mut xhat = Vec::with_capacity(v[0].len());
            let mut rstd = Vec::with_capacity(v[0].len() / width);
            for row in v[0].data().chunks(width) {
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<F>() / n;
                let rs = F::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (j, &r) in row.iter().enumerate() {
                    let h = (r - mean) * rs;
                    xhat.push(h);
                    out.push(g[j] * h + b[j]);
                }
            }
            Ok((Tensor::new(shape.to_vec(), out)?, xhat, rstd))
        })?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Var {
        let value = self.with_values(&[a], |v| {
            v[0].map(|x| match kind {
                Activation::Relu => {
                    if x > F::zero() {
                        x
                    } else {
                        F::zero()
                    }
                }
                Activation::Gelu => gelu(x),
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => sigmoid(x),
            })
        });
        self.record(value, Op::Activation { a, kind })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Outside training, or with
    /// `p == 0`, returns `a` unchanged and draws nothing from `rng`.
    pub fn dropout(&self, a: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let (value, mask) = self.with_values(&[a], |v| {
            let mask: Vec<F> = (0..v[0].len())
                .map(|_| {
                    if rng.random::<f64>() < p {
                        F::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let data = v[0].data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::new(v[0].shape().to_vec(), data).expect("same shape"), mask)
        });
        Ok(self.record(value, Op::Dropout { a, mask }))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_values(&[a], |v| {
            Tensor::new(shape.to_vec(), v[0].data().to_vec())
                .map_err(|_| Error::shape("reshape", v[0].shape(), shape))
        })?;
        Ok(self.record(value, Op::Reshape { a }))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.with_values(&[a], |v| {
            let shape = v[0].shape();
            let mut seen = vec![false; shape.len()];
            if axes.len() != shape.len() {
                return Err(Error::shape("permute", shape, axes));
            }
            for &ax in axes {
                if ax >= shape.len() || seen[ax] {
                    return Err(Error::shape("permute", shape, axes));
                }
                seen[ax] = true;
            }
            let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
            Tensor::new(out_shape, permute(v[0].data(), shape, axes))
        })?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.record(value, Op::Permute { a, inverse }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Concatenates along axis 0; all other extents must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = self.with_values(parts, |v| {
            let first = v.first().ok_or(Error::Empty("concat input"))?;
            let tail = &first.shape()[1..];
            if first.rank() == 0 {
                return Err(Error::InvalidAxis { axis: 0, rank: 0 });
            }
            let mut rows = 0;
            let mut data = Vec::new();
            for t in v {
                if t.rank() == 0 || t.shape()[1..] != *tail {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)
        })?;
        Ok(self.record(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Entry `index` along axis 0, dropping that axis.
    pub fn select(&self, a: Var, index: usize) -> Result<Var> {
        let (value, offset) = self.with_values(&[a], |v| {
            let t = v[0].row(index)?;
            let offset = index * t.len();
            Ok::<_, Error>((t, offset))
        })?;
        Ok(self.record(value, Op::Select { a, offset }))
    }

    /// Rows of a `[V×D]` table, one per id, giving `[ids.len()×D]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.with_values(&[table], |v| {
            let shape = v[0].shape();
            if shape.len() != 2 {
                return Err(Error::shape("gather", shape, &[ids.len()]));
            }
            let (rows, width) = (shape[0], shape[1]);
            if ids.is_empty() {
                return Err(Error::Empty("gather ids"));
            }
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab_size: rows,
                    });
                }
                data.extend_from_slice(&v[0].data()[id * width..(id + 1) * width]);
            }
            Tensor::new(vec![ids.len(), width], data)
        })?;
        Ok(self.record(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = self.with_values(&[a], |v| Tensor::scalar(v[0].data().iter().copied().sum()));
        self.record(value, Op::Sum { a })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_values(&[a], |v| v[0].len());
        let total = self.sum(a);
        self.scale(total, F::one() / F::lit(n as f64))
    }

    /// Binary cross-entropy on `sigmoid(logit)` in the overflow-free form
    /// `max(z, 0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&self, logit: Var, target: F) -> Result<Var> {
        let z = self.item(logit)?;
        let loss = z.max(F::zero()) - z * target + (-z.abs()).exp().ln_1p();
        Ok(self.record(Tensor::scalar(loss), Op::BceWithLogits { logit, target }))
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], var: Var, contrib: Vec<F>) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// Pushes `g` (the gradient of node `idx`) into the node's inputs.
pub(super) fn backprop<F: Scalar>(
    nodes: &[Node<F>],
    node: &Node<F>,
    g: &[F],
    grads: &mut [Option<Vec<F>>],
) {
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if needs(a) {
                let mut da = vec![F::zero(); ad.len()];
                for t in 0..*batch {
                    let b_off = if *b_batched { t * k * n } else { 0 };
                    gemm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bd[b_off..b_off + k * n],
                        &mut da[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, nodes, *a, da);
            }
            if needs(b) {
                let mut db = vec![F::zero(); bd.len()];
                for t in 0..*batch {
                    let b_off = if *b_batched { t * k * n } else { 0 };
                    gemm_tn(
                        &ad[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut db[b_off..b_off + k * n],
                        k,
                        m,
                        n,
                    );
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add { a, b } => {
            if needs(a) {
                accumulate(grads, nodes, *a, g.to_vec());
            }
            if needs(b) {
                let len = nodes[b.0].value.len();
                let mut db = vec![F::zero(); len];
                for chunk in g.chunks(len) {
                    for (d, &x) in db.iter_mut().zip(chunk) {
                        *d = *d + x;
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if needs(a) {
                accumulate(grads, nodes, *a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect());
            }
            if needs(b) {
                accumulate(grads, nodes, *b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect());
            }
        }
        Op::Scale { a, factor } => {
            accumulate(grads, nodes, *a, g.iter().map(|&x| x * *factor).collect());
        }
        Op::Softmax { a, axis_len, inner } => {
            let y = out.data();
            let (axis_len, inner) = (*axis_len, *inner);
            let outer = y.len() / (axis_len * inner);
            let mut da = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let dot: F = (0..axis_len)
                        .map(|j| g[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..axis_len {
                        let p = base + j * inner;
                        da[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = nodes[gamma.0].value.data();
            let width = gam.len();
            let n = F::lit(width as f64);
            if needs(x) {
                let mut dx = Vec::with_capacity(g.len());
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * width..(r + 1) * width];
                    let hr = &xhat[r * width..(r + 1) * width];
                    let dh: Vec<F> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<F>() / n;
                    let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for j in 0..width {
                        dx.push(*rs * (dh[j] - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            if needs(gamma) {
                let mut dg = vec![F::zero(); width];
                for (gc, hc) in g.chunks(width).zip(xhat.chunks(width)) {
                    for j in 0..width {
                        dg[j] = dg[j] + gc[j] * hc[j];
                    }
                }
                accumulate(grads, nodes, *gamma, dg);
            }
            if needs(beta) {
                let mut db = vec![F::zero(); width];
                for gc in g.chunks(width) {
                    for j in 0..width {
                        db[j] = db[j] + gc[j];
                    }
                }
                accumulate(grads, nodes, *beta, db);
            }
        }
        Op::Activation { a, kind } => {
            let x = nodes[a.0].value.data();
            let y = out.data();
            let da = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| {
                    g * match kind {
                        Activation::Relu => {
                            if x > F::zero() {
                                F::one()
                            } else {
                                F::zero()
                            }
                        }
                        Activation::Gelu => gelu_grad(x),
                        Activation::Tanh => F::one() - y * y,
                        Activation::Sigmoid => y * (F::one() - y),
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, da);
        }
        Op::Dropout { a, mask } => {
            accumulate(grads, nodes, *a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect());
        }
        Op::Reshape { a } => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute { a, inverse } => {
            accumulate(grads, nodes, *a, permute(g, out.shape(), inverse));
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if needs(p) {
                    accumulate(grads, nodes, *p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::Select { a, offset } => {
            let mut da = vec![F::zero(); nodes[a.0].value.len()];
            da[*offset..*offset + g.len()].copy_from_slice(g);
            accumulate(grads, nodes, *a, da);
        }
        Op::Gather { table, ids } => {
            let t = &nodes[table.0].value;
            let width = t.shape()[1];
            let mut dt = vec![F::zero(); t.len()];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..width {
                    dt[id * width + j] = dt[id * width + j] + g[row * width + j];
                }
            }
            accumulate(grads, nodes, *table, dt);
        }
        Op::Sum { a } => {
            let len = nodes[a.0].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; len]);
        }
        Op::BceWithLogits { logit, target } => {
            let z = nodes[logit.0].value.data()[0];
            accumulate(grads, nodes, *logit, vec![g[0] * (sigmoid(z) - *target)]);
        }
    }
}
