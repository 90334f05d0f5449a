//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every op appends one node, so
//! insertion order is a topological order and [`Graph::backward`] simply walks
//! the list in reverse, visiting each node once. Gradients reaching a node
//! from several consumers are summed.
//!
//! Nodes built only from non-trainable inputs do not track gradients, which
//! is how frozen weights and detached branches are expressed.

use crate::error::{Error, Result};
use crate::quantize::{self, QuantRange};
use crate::tensor::{self, dims2, dims3, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f32> },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Narrow { input: Var, axis: usize, start: usize },
    Patchify { input: Var, patch: usize },
    Resize { input: Var },
    FakeQuant { x: Var, delta: Var, zero: Var, range: QuantRange },
    StraightThrough(Var),
    GradPath { main: Var, side: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Multiply-accumulates performed by the matrix products recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::MatMul(a, _) => {
                    let s = self.shape(a);
                    (s[0] * s[1] * n.value.shape()[1]) as u64
                }
                Op::BatchMatMul(a, _) => {
                    let s = self.shape(a);
                    (s[0] * s[1] * s[2] * n.value.shape()[2]) as u64
                }
                _ => 0,
            })
            .sum()
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[batch, m, k] @ [batch, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = dims3(self.value(a), "bmm lhs")?;
        let (bb, k2, n) = dims3(self.value(b), "bmm rhs")?;
        if ba != bb || k != k2 {
            return Err(Error::shape(format!(
                "bmm mismatch: {:?} @ {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            tensor::gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![ba, m, n], out)?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may have a trailing sub-shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product; `b` may have a trailing sub-shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.tracks(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::gelu);
        let rg = self.tracks(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.tracks(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = *t.shape().last().ok_or_else(|| Error::shape("softmax on rank-0 tensor"))?;
        if cols == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let value = Tensor::new(t.shape().to_vec(), tensor::softmax_rows(t.data(), cols))?;
        let rg = self.tracks(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layernorm on rank-0 tensor"))?;
        if d == 0 {
            return Err(Error::shape("layernorm over a zero-length feature axis"));
        }
        let mut out = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.numel() / d);
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.tracks(&[a]);
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.tracks(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let rg = self.tracks(&[a]);
        Ok(self.push(
            value,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        dims2(self.value(a), "transpose")?;
        self.permute(a, &[1, 0])
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let rg = self.tracks(&[a]);
        Ok(self.push(value, Op::Narrow { input: a, axis, start }, rg))
    }

    /// Patch extraction used by the patch embedding: `[b,h,w,c] → [b·t, p·p·c]`.
    pub fn patchify(&mut self, images: Var, patch: usize) -> Result<Var> {
        let value = tensor::patchify(self.value(images), patch)?;
        let rg = self.tracks(&[images]);
        Ok(self.push(value, Op::Patchify { input: images, patch }, rg))
    }

    /// Differentiable align-corners bilinear resize of an `h×w×c` grid.
    pub fn bilinear_resize(&mut self, grid: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let value = tensor::bilinear_resize(self.value(grid), new_h, new_w)?;
        let rg = self.tracks(&[grid]);
        Ok(self.push(value, Op::Resize { input: grid }, rg))
    }

    /// Learnable fake quantization with straight-through gradients.
    /// `delta` and `zero` are single-element tensors.
    pub fn fake_quantize(&mut self, x: Var, delta: Var, zero: Var, range: QuantRange) -> Result<Var> {
        let (d, z) = (self.scalar_of(delta)?, self.scalar_of(zero)?);
        let value = self.value(x).map(|v| quantize::fake_quant_value(v, d, z, range));
        let rg = self.tracks(&[x, delta, zero]);
        Ok(self.push(value, Op::FakeQuant { x, delta, zero, range }, rg))
    }

    /// Applies a value transform whose gradient is treated as identity.
    pub fn straight_through(&mut self, x: Var, f: impl FnOnce(&Tensor) -> Tensor) -> Result<Var> {
        let value = f(self.value(x));
        if value.shape() != self.shape(x) {
            return Err(Error::shape("straight-through transform changed the shape"));
        }
        let rg = self.tracks(&[x]);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Value of `main` with the upstream gradient routed to both `main` and `side`.
    pub fn with_grad_path(&mut self, main: Var, side: Var) -> Result<Var> {
        if self.shape(main) != self.shape(side) {
            return Err(Error::shape(format!(
                "gradient path shape {:?} differs from {:?}",
                self.shape(side),
                self.shape(main)
            )));
        }
        let value = self.value(main).clone();
        let rg = self.tracks(&[main, side]);
        Ok(self.push(value, Op::GradPath { main, side }, rg))
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.value(logits), "cross_entropy logits")?;
        if labels.len() != n || n == 0 {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Range(format!("label {bad} outside {c} classes")));
        }
        let probs = tensor::softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * c + l].max(f32::MIN_POSITIVE)).ln())
            .sum::<f32>()
            / n as f32;
        let rg = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.tracks(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    fn scalar_of(&self, v: Var) -> Result<f32> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::shape(format!("expected a single value, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward needs a single-element root"));
        }
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(root, seed)
    }

    /// Backpropagates an explicit upstream gradient from `root`.
    pub fn backward_with(&mut self, root: Var, upstream: Tensor) -> Result<()> {
        if upstream.shape() != self.shape(root) {
            return Err(Error::shape("upstream gradient shape differs from root"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(upstream);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(up) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &up)?;
            self.grads[idx] = Some(up);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a), "matmul")?;
                let n = val(*b).shape()[1];
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_nt(up.data(), val(*b).data(), &mut da, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_tn(val(*a).data(), up.data(), &mut db, k, m, n);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = dims3(val(*a), "bmm")?;
                let n = val(*b).shape()[2];
                let (ad, bd, ud) = (val(*a).data(), val(*b).data(), up.data());
                if rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        tensor::gemm_nt(
                            &ud[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, Tensor::new(vec![bs, m, k], da)?));
                }
                if rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        tensor::gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &ud[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, Tensor::new(vec![bs, k, n], db)?));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    out.push((*a, up.clone()));
                }
                if rg(*b) {
                    out.push((*b, reduce_to_suffix(up, val(*b).shape(), sign)));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, up.mul(val(*b))?));
                }
                if rg(*b) {
                    let prod = Tensor::new(
                        up.shape().to_vec(),
                        up.data().iter().zip(val(*a).data()).map(|(u, x)| u * x).collect(),
                    )?;
                    out.push((*b, reduce_to_suffix(&prod, val(*b).shape(), 1.0)));
                }
            }
            Op::Scale(a, s) => out.push((*a, up.scale(*s))),
            Op::Gelu(a) => out.push((*a, zip_map(up, val(*a), |u, x| u * tensor::gelu_grad(x)))),
            Op::Relu(a) => out.push((*a, zip_map(up, val(*a), |u, x| if x > 0.0 { u } else { 0.0 }))),
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let mut g = Vec::with_capacity(y.numel());
                for (yr, ur) in y.data().chunks(cols).zip(up.data().chunks(cols)) {
                    let dot: f32 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                    g.extend(yr.iter().zip(ur).map(|(y, u)| y * (u - dot)));
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), g)?));
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut g = Vec::with_capacity(y.numel());
                for ((yr, ur), is) in y.data().chunks(d).zip(up.data().chunks(d)).zip(inv_std) {
                    let mean_u = ur.iter().sum::<f32>() / d as f32;
                    let mean_uy = ur.iter().zip(yr).map(|(u, y)| u * y).sum::<f32>() / d as f32;
                    g.extend(yr.iter().zip(ur).map(|(y, u)| is * (u - mean_u - y * mean_uy)));
                }
                out.push((*input, Tensor::new(y.shape().to_vec(), g)?));
            }
            Op::Reshape(a) => out.push((*a, up.reshape(val(*a).shape())?)),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((*input, up.permute(&inverse)?));
            }
            Op::Narrow { input, axis, start } => {
                let full = val(*input).shape();
                let outer: usize = full[..*axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let len = up.shape()[*axis];
                let mut g = Tensor::zeros(full);
                let gd = g.data_mut();
                for o in 0..outer {
                    let dst = (o * full[*axis] + start) * inner;
                    let src = o * len * inner;
                    gd[dst..dst + len * inner].copy_from_slice(&up.data()[src..src + len * inner]);
                }
                out.push((*input, g));
            }
            Op::Patchify { input, patch } => {
                let s = val(*input).shape();
                out.push((*input, tensor::unpatchify(up, s[0], s[1], s[2], s[3], *patch)));
            }
            Op::Resize { input } => {
                let s = val(*input).shape();
                out.push((*input, tensor::bilinear_resize_adjoint(up, s[0], s[1])));
            }
            Op::FakeQuant { x, delta, zero, range } => {
                let (d, z) = (val(*delta).item(), val(*zero).item());
                let g = quantize::fake_quant_grads(val(*x), up, d, z, *range);
                if rg(*x) {
                    out.push((*x, g.dx));
                }
                if rg(*delta) {
                    out.push((*delta, Tensor::scalar(g.d_delta)));
                }
                if rg(*zero) {
                    out.push((*zero, Tensor::scalar(g.d_zero)));
                }
            }
            Op::StraightThrough(a) => out.push((*a, up.clone())),
            Op::GradPath { main, side } => {
                out.push((*main, up.clone()));
                out.push((*side, up.clone()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c) = dims2(val(*logits), "cross_entropy")?;
                let scale = up.item() / n as f32;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * c + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(vec![n, c], g)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), up.item()))),
        }
        Ok(out)
    }
}

fn zip_map(up: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = up.data().iter().zip(x.data()).map(|(&u, &x)| f(u, x)).collect();
    Tensor::new(up.shape().to_vec(), data).expect("same shape")
}

/// Sums `g` over the leading axes so it matches the trailing `shape`.
fn reduce_to_suffix(g: &Tensor, shape: &[usize], sign: f32) -> Tensor {
    let inner: usize = shape.iter().product();
    let mut acc = vec![0.0; inner];
    for row in g.data().chunks(inner) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += sign * v;
        }
    }
    Tensor::new(shape.to_vec(), acc).expect("suffix shape")
}
