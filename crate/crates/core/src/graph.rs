//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! enter as leaves bound to a [`ParamStore`]; constants enter through
//! [`Graph::input`] and never receive gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom, ConvShape};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Scale,
    MulConst,
    Silu,
    Conv2d,
    LayerNorm,
    GlobalAvgPool,
    Linear,
    Gather,
    Concat,
    Reshape,
    InfoNce,
    CrossEntropy,
    Sum,
}

/// Scales the gradients emitted by one op kind. Only used to check that the
/// gradient checker notices a broken backward rule.
#[derive(Clone, Copy, Debug)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    InfoNce {
        pred: Var,
        cand: Var,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Input | Op::Param(_) => return None,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Silu(_) => OpKind::Silu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::InfoNce { .. } => OpKind::InfoNce,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        })
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

/// Gradients of a scalar root with respect to every bound parameter.
pub struct Gradients<T: Real> {
    pub by_param: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu_parts<T: Real>(x: T) -> (T, T) {
    let s = T::one() / (T::one() + (-x).exp());
    (x * s, s * (T::one() + x * (T::one() - s)))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Binds a parameter as a trainable leaf; repeated calls reuse the leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Geometry, "add: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<T>>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            bail!(Geometry, "mul_const: {} vs {}", c.len(), self.value(a).len());
        }
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(c.iter()).for_each(|(v, m)| *v *= *m);
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = silu_parts(*v).0);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let Some(shape) = ConvShape::new(self.shape(x), self.shape(w), geom) else {
            bail!(
                Config,
                "conv2d: incompatible input {:?} / weight {:?} / {:?}",
                self.shape(x),
                self.shape(w),
                geom
            );
        };
        if let Some(b) = b {
            if self.shape(b) != [shape.o] {
                bail!(Config, "conv2d: bias shape {:?}", self.shape(b));
            }
        }
        let data = kernels::conv2d_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[shape.n, shape.o, shape.ho, shape.wo], data)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, shape }, ng))
    }

    /// Layer normalization over all non-batch axes with per-channel affine.
    /// Accepts `(N, C)` or `(N, C, H, W)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            bail!(Geometry, "layer_norm: rank {} input", s.len());
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Config, "layer_norm: affine shape mismatch for {c} channels");
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            n,
            c,
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::from_vec(&s, y)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            bail!(Geometry, "global_avg_pool: expected NCHW, got {:?}", s);
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[s[0], s[1]], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    /// `x: (N, in)`, `w: (out, in)`, `b: (out)` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            bail!(Config, "linear: input {:?} vs weight {:?}", xs, ws);
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        matmul(self.value(x).data(), false, self.value(w).data(), true, &mut out, n, k, m, false);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                bail!(Config, "linear: bias shape {:?}", self.shape(b));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += *b);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_vec(&[n, m], out)?, Op::Linear { x, w, b }, ng))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Arc<Vec<usize>>) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            bail!(Geometry, "gather: shape {:?} vs {} indices", shape, index.len());
        }
        let src = self.value(x).data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            bail!(Geometry, "gather: index {bad} out of range {}", src.len());
        }
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Gather { x, index }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail!(Geometry, "concat of nothing");
        };
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            bail!(Geometry, "concat axis {axis} on rank {}", base.len());
        }
        let outer: usize = base[..axis].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                bail!(Geometry, "concat: {:?} vs {:?}", s, base);
            }
            total += s[axis];
        }
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean InfoNCE over targets. `pred: (T, D)`, `cand: (T, K, D)` with the
    /// positive candidate at index 0 of each row.
    pub fn info_nce(&mut self, pred: Var, cand: Var) -> Result<Var> {
        let (ps, cs) = (self.shape(pred).to_vec(), self.shape(cand).to_vec());
        if ps.len() != 2 || cs.len() != 3 || ps[0] != cs[0] || ps[1] != cs[2] {
            bail!(Geometry, "info_nce: predictions {:?} vs candidates {:?}", ps, cs);
        }
        let (t, k) = (cs[0], cs[1]);
        if t == 0 || k == 0 {
            bail!(Geometry, "info_nce: empty candidate set {:?}", cs);
        }
        let (loss, probs) = info_nce_value(self.value(pred).data(), self.value(cand).data(), t, k, ps[1])?;
        let ng = self.ng(pred) || self.ng(cand);
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { pred, cand, probs }, ng))
    }

    /// Mean softmax cross-entropy of `logits: (N, C)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            bail!(Geometry, "cross_entropy: logits {:?} vs {} labels", s, labels.len());
        }
        let (n, c) = (s[0], s[1]);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss = loss / T::from_usize(n).unwrap();
        if !loss.is_finite() {
            bail!(Numeric, "cross_entropy: non-finite loss");
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            bail!(Geometry, "backward root must be scalar, got {:?}", self.shape(root));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut by_param = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                by_param.push((id, Tensor::from_vec(node.value.shape(), g)?));
                continue;
            }
            let factor = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f.op == k => Some(T::lit(f.factor)),
                _ => None,
            };
            for (v, mut contrib) in self.local_backward(node, &g)? {
                if !self.ng(v) {
                    continue;
                }
                if let Some(f) = factor {
                    contrib.iter_mut().for_each(|c| *c *= f);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        by_param.sort_by_key(|(id, _)| *id);
        Ok(Gradients { by_param })
    }

    fn local_backward(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| self.nodes[v.0].value.data();
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| *v * *s).collect())],
            Op::MulConst(a, c) => vec![(*a, g.iter().zip(c.iter()).map(|(v, m)| *v * *m).collect())],
            Op::Silu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(gv, x)| *gv * silu_parts(*x).1)
                    .collect(),
            )],
            Op::Conv2d { x, w, b, shape } => {
                let (dx, dw, db) = kernels::conv2d_backward(shape, val(*x), val(*w), g, self.ng(*x));
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let hw: usize = s[2..].iter().product();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(g, xhat, inv_std, s[0], s[1], hw, val(*gamma));
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(s.iter().product());
                for gv in g {
                    dx.extend(std::iter::repeat_n(*gv * inv, hw));
                }
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, k, m) = (xs[0], xs[1], ws[0]);
                let mut out = Vec::new();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    matmul(g, false, val(*w), false, &mut dx, n, m, k, false);
                    out.push((*x, dx));
                }
                let mut dw = vec![T::zero(); m * k];
                matmul(g, true, val(*x), false, &mut dw, m, n, k, false);
                out.push((*w, dw));
                if let Some(b) = b {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += *r);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gv, &i) in g.iter().zip(index.iter()) {
                    dx[i] += *gv;
                }
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let base = self.shape(parts[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total: usize = parts.iter().map(|p| self.shape(*p)[*axis]).sum();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        dp.extend_from_slice(&g[start..start + len]);
                    }
                    offset += len;
                    out.push((*p, dp));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::InfoNce { pred, cand, probs } => {
                let cs = self.shape(*cand);
                let (t, k, d) = (cs[0], cs[1], cs[2]);
                let scale = g[0] / T::from_usize(t).unwrap();
                let (pv, cv) = (val(*pred), val(*cand));
                let mut dpred = vec![T::zero(); t * d];
                let mut dcand = vec![T::zero(); t * k * d];
                for ti in 0..t {
                    let p = &pv[ti * d..(ti + 1) * d];
                    let dp = &mut dpred[ti * d..(ti + 1) * d];
                    for j in 0..k {
                        let w = probs[ti * k + j] - if j == 0 { T::one() } else { T::zero() };
                        let c = &cv[(ti * k + j) * d..(ti * k + j + 1) * d];
                        let dc = &mut dcand[(ti * k + j) * d..(ti * k + j + 1) * d];
                        for e in 0..d {
                            dp[e] += scale * w * c[e];
                            dc[e] = scale * w * p[e];
                        }
                    }
                }
                vec![(*pred, dpred), (*cand, dcand)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = d[i * c + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, d)]
            }
        })
    }
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (*v - m).exp()).sum::<T>().ln()
}

/// Forward InfoNCE: mean over targets of `logsumexp(scores) - score[0]`,
/// where `score[j] = <pred, cand[j]>`. Returns the loss and the softmax
/// probabilities per target.
pub fn info_nce_value<T: Real>(pred: &[T], cand: &[T], t: usize, k: usize, d: usize) -> Result<(T, Vec<T>)> {
    let mut probs = vec![T::zero(); t * k];
    let mut scores = vec![T::zero(); k];
    let mut total = T::zero();
    for ti in 0..t {
        let p = &pred[ti * d..(ti + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            let c = &cand[(ti * k + j) * d..(ti * k + j + 1) * d];
            *s = p.iter().zip(c).map(|(a, b)| *a * *b).sum::<T>();
        }
        if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
            bail!(Numeric, "info_nce: non-finite score at target {ti}, candidate {j}");
        }
        let lse = log_sum_exp(&scores);
        for j in 0..k {
            probs[ti * k + j] = (scores[j] - lse).exp();
        }
        total += lse - scores[0];
    }
    Ok((total / T::from_usize(t).unwrap(), probs))
}
