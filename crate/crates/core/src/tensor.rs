//! Dense row-major `f32` tensors and the kernels the autodiff graph is built on.
//!
//! Only the shapes the supernet needs are supported: no general broadcasting.
//! Binary elementwise kernels accept a right operand whose shape is a suffix
//! of the left operand's shape (bias rows, positional grids, affine
//! layernorm parameters).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_suffix(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_suffix(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_suffix(other, "mul", |a, b| a * b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn zip_suffix(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        check_suffix(&self.shape, &other.shape, op)?;
        let inner = other.numel();
        let data = self
            .data
            .chunks(inner)
            .flat_map(|row| row.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul lhs")?;
        let (k2, n) = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} @ {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose expects rank 2, got {:?}", self.shape)));
        }
        self.permute(&[1, 0])
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        if self.numel() > 0 {
            let mut idx = vec![0usize; rank];
            let mut offset = 0usize;
            loop {
                data.push(self.data[offset]);
                let mut axis = rank;
                loop {
                    if axis == 0 {
                        return Tensor::new(out_shape, data);
                    }
                    axis -= 1;
                    idx[axis] += 1;
                    offset += src_strides[axis];
                    if idx[axis] < out_shape[axis] {
                        break;
                    }
                    offset -= src_strides[axis] * idx[axis];
                    idx[axis] = 0;
                }
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }
}

pub(crate) fn check_suffix(lhs: &[usize], rhs: &[usize], op: &str) -> Result<()> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::shape(format!(
            "{op}: {rhs:?} is not a trailing sub-shape of {lhs:?}"
        )));
    }
    Ok(())
}

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

pub(crate) fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(format!("{what} must be rank 3, got {s:?}"))),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f32 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_rows(data: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

/// Align-corners sample positions: `(lower index, upper index, upper weight)`.
pub(crate) fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Align-corners bilinear resize of an `h×w×c` grid.
pub fn bilinear_resize(grid: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(grid, "bilinear_resize grid")?;
    if h == 0 || w == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::Range(format!(
            "bilinear_resize needs positive sizes, got {h}x{w} -> {new_h}x{new_w}"
        )));
    }
    let rows = interp_axis(h, new_h);
    let cols = interp_axis(w, new_w);
    let src = grid.data();
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}

/// Adjoint of [`bilinear_resize`]: scatters an `new_h×new_w×c` gradient back to `h×w×c`.
pub(crate) fn bilinear_resize_adjoint(up: &Tensor, h: usize, w: usize) -> Tensor {
    let (new_h, new_w, c) = (up.shape()[0], up.shape()[1], up.shape()[2]);
    let rows = interp_axis(h, new_h);
    let cols = interp_axis(w, new_w);
    let mut out = vec![0.0f32; h * w * c];
    let g = up.data();
    for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let v = g[(i * new_w + j) * c + ch];
                out[(y0 * w + x0) * c + ch] += v * (1.0 - fy) * (1.0 - fx);
                out[(y0 * w + x1) * c + ch] += v * (1.0 - fy) * fx;
                out[(y1 * w + x0) * c + ch] += v * fy * (1.0 - fx);
                out[(y1 * w + x1) * c + ch] += v * fy * fx;
            }
        }
    }
    Tensor {
        shape: vec![h, w, c],
        data: out,
    }
}

/// `[b, h, w, c]` images to `[b·(h/p)·(w/p), p·p·c]` patch rows (row-major patch order).
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = match images.shape() {
        [b, h, w, c] => (*b, *h, *w, *c),
        s => return Err(Error::shape(format!("patchify expects [b,h,w,c], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(images.numel());
    let src = images.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((bi * h + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, patch * patch * c], out)
}

pub(crate) fn unpatchify(rows: &Tensor, b: usize, h: usize, w: usize, c: usize, patch: usize) -> Tensor {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0; b * h * w * c];
    let src = rows.data();
    let mut k = 0;
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((bi * h + y) * w + px * patch) * c;
                    out[start..start + patch * c].copy_from_slice(&src[k..k + patch * c]);
                    k += patch * c;
                }
            }
        }
    }
    Tensor {
        shape: vec![b, h, w, c],
        data: out,
    }
}
