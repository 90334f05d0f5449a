//! Finite-difference checks of every graph primitive against f64 reference
//! forwards written independently of the crate.

use qsnet::graph::{Graph, Var};
use qsnet::quantize::{fake_quantize_backward, BitWidth, QuantRange, QuantizerParams, TensorKind};
use qsnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;
type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    /// Values are rounded through f32 so graph and reference see the same point.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        Input {
            shape: shape.to_vec(),
            data: data.into_iter().map(|v| v as f32 as f64).collect(),
        }
    }

    pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Input::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-9 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Largest relative gradient error over the inputs listed in `check`, each
/// with its own tolerance. Fails if the forward values disagree.
pub fn fd_check(
    inputs: &[Input],
    build: &Build,
    reference: &Reference,
    check: &[(usize, f64)],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<f64, String> {
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let ref_out = reference(&base);
    let weights: Vec<f64> = (0..ref_out.len())
        .map(|_| rng.random_range(-1.0..1.0f32) as f64)
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.param(Tensor::new(i.shape.clone(), i.data.iter().map(|&v| v as f32).collect()).unwrap()))
        .collect();
    let out = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let got = g.value(out).data().to_vec();
    if got.len() != ref_out.len() {
        return Err(format!("output has {} elements, reference {}", got.len(), ref_out.len()));
    }
    for (a, b) in got.iter().zip(&ref_out) {
        if (*a as f64 - b).abs() > 1e-4 * (1.0 + b.abs()) {
            return Err(format!("forward value {a} differs from reference {b}"));
        }
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::new(shape, weights.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(out, w).map_err(|e| e.to_string())?;
    let loss = g.sum(prod);
    g.backward(loss).map_err(|e| e.to_string())?;

    let objective = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&weights).map(|(o, w)| o * w).sum() };
    let mut worst = 0.0f64;
    for &(i, tol) in check {
        let analytic: Vec<f64> = match g.grad(vars[i]) {
            Some(t) => t.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; base[i].len()],
        };
        let mut numeric = Vec::with_capacity(base[i].len());
        for j in 0..base[i].len() {
            let h = 1e-6 * base[i][j].abs().max(1.0);
            let mut xs = base.clone();
            xs[i][j] = base[i][j] + h;
            let up = objective(&xs);
            xs[i][j] = base[i][j] - h;
            let down = objective(&xs);
            numeric.push((up - down) / (2.0 * h));
        }
        let e = rel_err(&analytic, &numeric);
        if e >= tol {
            return Err(format!("input {i}: relative gradient error {e:.3e} ≥ {tol:.0e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

// ---- f64 reference forwards ----

fn r_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn r_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn r_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn r_index(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, s)| acc * s + i)
}

fn r_unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

fn r_permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    (0..x.len())
        .map(|flat| {
            let oi = r_unravel(flat, &out_shape);
            let mut si = vec![0; shape.len()];
            for (d, &p) in perm.iter().enumerate() {
                si[p] = oi[d];
            }
            x[r_index(shape, &si)]
        })
        .collect()
}

fn r_resize(x: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f64> {
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = pos.floor() as usize;
        let lo = lo.min(src - 1);
        ((lo), (lo + 1).min(src - 1), pos - lo as f64)
    };
    let mut out = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        let (y0, y1, fy) = coord(y, h, nh);
        for xx in 0..nw {
            let (x0, x1, fx) = coord(xx, w, nw);
            for ch in 0..c {
                let at = |yy: usize, xv: usize| x[(yy * w + xv) * c + ch];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out.push(v);
            }
        }
    }
    out
}

/// LSQ+ surrogate: rounding residual and clamp region frozen at the base point,
/// so the derivative equals the straight-through estimator.
struct Surrogate {
    residual: Vec<f64>,
    region: Vec<i8>,
    range: QuantRange,
}

impl Surrogate {
    fn at(x: &[f64], delta: f64, zero: f64, range: QuantRange) -> Self {
        let (n, p) = (range.n as f64, range.p as f64);
        let mut residual = Vec::new();
        let mut region = Vec::new();
        for &xv in x {
            let v = xv / delta + zero;
            region.push(if v < n { -1 } else if v > p { 1 } else { 0 });
            residual.push(v.round() - v);
        }
        Surrogate { residual, region, range }
    }

    fn eval(&self, x: &[f64], delta: f64, zero: f64) -> Vec<f64> {
        let (n, p) = (self.range.n as f64, self.range.p as f64);
        x.iter()
            .zip(&self.residual)
            .zip(&self.region)
            .map(|((&xv, &r), &reg)| match reg {
                -1 => (n - zero) * delta,
                1 => (p - zero) * delta,
                _ => (xv / delta + zero + r - zero) * delta,
            })
            .collect()
    }
}

/// Draws `count` values whose quantizer input sits clear of the clamp edges
/// and of rounding ties.
fn quant_points(count: usize, delta: f64, zero: f64, range: QuantRange, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, p) = (range.n as f64, range.p as f64);
    let mut out = Vec::new();
    while out.len() < count {
        let v: f64 = rng.random_range(n - 3.0..p + 3.0);
        let x = ((v - zero) * delta) as f32 as f64;
        let vv = x / delta + zero;
        let frac = vv - vv.floor();
        if (vv - n).abs() < 0.05 || (vv - p).abs() < 0.05 || (frac - 0.5).abs() < 0.02 {
            continue;
        }
        out.push(x);
    }
    out
}

const BITS: [BitWidth; 4] = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8];

/// Names of the checked primitives, in suite order.
pub const PRIMITIVES: [&str; 22] = [
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "relu",
    "softmax",
    "layernorm",
    "reshape",
    "permute",
    "transpose",
    "narrow",
    "patchify",
    "bilinear_resize",
    "cross_entropy",
    "sum",
    "detach",
    "straight_through",
    "with_grad_path",
    "fake_quantize",
];

/// One seeded case of `primitive`; returns the worst relative error.
pub fn primitive_case(primitive: &str, seed: u64) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..5usize);
    const T: f64 = 1e-3;
    match primitive {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            let a = Input::random(&[m, k], 1.0, rng);
            let b = Input::random(&[k, n], 1.0, rng);
            fd_check(
                &[a, b],
                &|g, v| g.matmul(v[0], v[1]),
                &move |x| r_matmul(&x[0], &x[1], m, k, n),
                &[(0, T), (1, T)],
                rng,
            )
        }
        "bmm" => {
            let (bt, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            let a = Input::random(&[bt, m, k], 1.0, rng);
            let b = Input::random(&[bt, k, n], 1.0, rng);
            fd_check(
                &[a, b],
                &|g, v| g.bmm(v[0], v[1]),
                &move |x| {
                    (0..bt)
                        .flat_map(|i| r_matmul(&x[0][i * m * k..(i + 1) * m * k], &x[1][i * k * n..(i + 1) * k * n], m, k, n))
                        .collect()
                },
                &[(0, T), (1, T)],
                rng,
            )
        }
        "add" | "sub" | "mul" => {
            let (m, n) = (dim(rng), dim(rng));
            // the second operand is either full-shape or a broadcast row
            let broadcast = rng.random_bool(0.5);
            let a = Input::random(&[m, n], 1.0, rng);
            let b = if broadcast {
                Input::random(&[n], 1.0, rng)
            } else {
                Input::random(&[m, n], 1.0, rng)
            };
            let op = primitive.to_string();
            let op2 = op.clone();
            fd_check(
                &[a, b],
                &move |g, v| match op.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                },
                &move |x| {
                    let bl = x[1].len();
                    x[0].iter()
                        .enumerate()
                        .map(|(i, &a)| {
                            let b = x[1][i % bl];
                            match op2.as_str() {
                                "add" => a + b,
                                "sub" => a - b,
                                _ => a * b,
                            }
                        })
                        .collect()
                },
                &[(0, T), (1, T)],
                rng,
            )
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0f32);
            let a = Input::random(&[dim(rng), dim(rng)], 1.0, rng);
            fd_check(
                &[a],
                &move |g, v| Ok(g.scale(v[0], s)),
                &move |x| x[0].iter().map(|v| v * s as f64).collect(),
                &[(0, T)],
                rng,
            )
        }
        "gelu" => {
            let a = Input::random(&[dim(rng), dim(rng)], 3.0, rng);
            fd_check(
                &[a],
                &|g, v| Ok(g.gelu(v[0])),
                &|x| x[0].iter().map(|&v| r_gelu(v)).collect(),
                &[(0, T)],
                rng,
            )
        }
        "relu" => {
            let shape = [dim(rng), dim(rng)];
            let n = shape[0] * shape[1];
            // keep clear of the kink
            let data = (0..n)
                .map(|_| {
                    let m = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            fd_check(
                &[Input::new(&shape, data)],
                &|g, v| Ok(g.relu(v[0])),
                &|x| x[0].iter().map(|&v| v.max(0.0)).collect(),
                &[(0, T)],
                rng,
            )
        }
        "softmax" => {
            let (m, n) = (dim(rng), dim(rng) + 1);
            let a = Input::random(&[m, n], 2.0, rng);
            fd_check(&[a], &|g, v| g.softmax(v[0]), &move |x| r_softmax(&x[0], n), &[(0, T)], rng)
        }
        "layernorm" => {
            let (m, n) = (dim(rng), dim(rng) + 2);
            let a = Input::random(&[m, n], 2.0, rng);
            let eps = 1e-5;
            fd_check(
                &[a],
                &move |g, v| g.layernorm(v[0], eps),
                &move |x| {
                    x[0].chunks(n)
                        .flat_map(|row| {
                            let mean = row.iter().sum::<f64>() / n as f64;
                            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                            let is = 1.0 / (var + eps as f64).sqrt();
                            row.iter().map(move |v| (v - mean) * is).collect::<Vec<_>>()
                        })
                        .collect()
                },
                &[(0, T)],
                rng,
            )
        }
        "reshape" => {
            let (m, n) = (dim(rng), dim(rng));
            let a = Input::random(&[m, n], 1.0, rng);
            fd_check(
                &[a],
                &move |g, v| g.reshape(v[0], &[n, m]),
                &|x| x[0].clone(),
                &[(0, T)],
                rng,
            )
        }
        "permute" => {
            let shape = [dim(rng), dim(rng), dim(rng)];
            let mut perm = vec![0, 1, 2];
            for i in (1..3).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let a = Input::random(&shape, 1.0, rng);
            let p2 = perm.clone();
            fd_check(
                &[a],
                &move |g, v| g.permute(v[0], &perm),
                &move |x| r_permute(&x[0], &shape, &p2),
                &[(0, T)],
                rng,
            )
        }
        "transpose" => {
            let shape = [dim(rng), dim(rng)];
            let a = Input::random(&shape, 1.0, rng);
            fd_check(
                &[a],
                &|g, v| g.transpose(v[0]),
                &move |x| r_permute(&x[0], &shape, &[1, 0]),
                &[(0, T)],
                rng,
            )
        }
        "narrow" => {
            let shape = [dim(rng), dim(rng) + 2, dim(rng)];
            let axis = rng.random_range(0..3usize);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            let a = Input::random(&shape, 1.0, rng);
            fd_check(
                &[a],
                &move |g, v| g.narrow(v[0], axis, start, len),
                &move |x| {
                    (0..x[0].len())
                        .filter_map(|flat| {
                            let idx = r_unravel(flat, &shape);
                            (idx[axis] >= start && idx[axis] < start + len).then(|| x[0][flat])
                        })
                        .collect()
                },
                &[(0, T)],
                rng,
            )
        }
        "patchify" => {
            let p = rng.random_range(1..3usize);
            let (b, gh, gw, c) = (dim(rng).min(2), dim(rng).min(3), dim(rng).min(3), dim(rng).min(2));
            let (h, w) = (gh * p, gw * p);
            let a = Input::random(&[b, h, w, c], 1.0, rng);
            fd_check(
                &[a],
                &move |g, v| g.patchify(v[0], p),
                &move |x| {
                    let mut out = Vec::new();
                    for bi in 0..b {
                        for py in 0..gh {
                            for px in 0..gw {
                                for dy in 0..p {
                                    for dx in 0..p {
                                        for ch in 0..c {
                                            let (y, xx) = (py * p + dy, px * p + dx);
                                            out.push(x[0][((bi * h + y) * w + xx) * c + ch]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out
                },
                &[(0, T)],
                rng,
            )
        }
        "bilinear_resize" => {
            let (h, w, c) = (dim(rng), dim(rng), dim(rng).min(2));
            let (nh, nw) = (dim(rng) + 1, dim(rng) + 2);
            let a = Input::random(&[h, w, c], 1.0, rng);
            fd_check(
                &[a],
                &move |g, v| g.bilinear_resize(v[0], nh, nw),
                &move |x| r_resize(&x[0], h, w, c, nh, nw),
                &[(0, T)],
                rng,
            )
        }
        "cross_entropy" => {
            let (n, c) = (dim(rng), dim(rng) + 1);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let a = Input::random(&[n, c], 3.0, rng);
            let l2 = labels.clone();
            fd_check(
                &[a],
                &move |g, v| g.cross_entropy(v[0], &labels),
                &move |x| {
                    let total: f64 = x[0]
                        .chunks(c)
                        .zip(&l2)
                        .map(|(row, &l)| {
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
                        })
                        .sum();
                    vec![total / n as f64]
                },
                &[(0, T)],
                rng,
            )
        }
        "sum" => {
            let a = Input::random(&[dim(rng), dim(rng)], 1.0, rng);
            fd_check(&[a], &|g, v| Ok(g.sum(v[0])), &|x| vec![x[0].iter().sum()], &[(0, T)], rng)
        }
        "detach" => {
            // y = a ⊙ detach(b): no gradient may reach b
            let shape = [dim(rng), dim(rng)];
            let a = Input::random(&shape, 1.0, rng);
            let b = Input::random(&shape, 1.0, rng);
            let b0 = b.data.clone();
            fd_check(
                &[a, b],
                &|g, v| {
                    let d = g.detach(v[1]);
                    g.mul(v[0], d)
                },
                &move |x| x[0].iter().zip(&b0).map(|(a, b)| a * b).collect(),
                &[(0, T), (1, T)],
                rng,
            )
        }
        "straight_through" => {
            let a = Input::random(&[dim(rng), dim(rng)], 3.0, rng);
            let a0 = a.data.clone();
            fd_check(
                &[a],
                &|g, v| g.straight_through(v[0], |t| t.map(|x| x.round_ties_even())),
                &move |x| {
                    x[0].iter()
                        .zip(&a0)
                        .map(|(v, v0)| v + (v0.round_ties_even() - v0))
                        .collect()
                },
                &[(0, T)],
                rng,
            )
        }
        "with_grad_path" => {
            let shape = [dim(rng), dim(rng)];
            let main = Input::random(&shape, 1.0, rng);
            let side = Input::random(&shape, 1.0, rng);
            let s0 = side.data.clone();
            fd_check(
                &[main, side],
                &|g, v| {
                    let m = g.gelu(v[0]);
                    let s = g.scale(v[1], 3.0);
                    g.with_grad_path(m, s)
                },
                &move |x| {
                    x[0].iter()
                        .zip(&x[1])
                        .zip(&s0)
                        .map(|((m, s), s0)| r_gelu(*m) + 3.0 * (s - s0))
                        .collect()
                },
                &[(0, T), (1, T)],
                rng,
            )
        }
        "fake_quantize" => {
            let bits = BITS[rng.random_range(0..BITS.len())];
            let range = bits.range().unwrap();
            let delta = (rng.random_range(-6.0..1.0f64).exp()) as f32 as f64;
            let zero = (rng.random_range(range.n..=range.p) as f64) as f32 as f64;
            let count = rng.random_range(3..12usize);
            let x = quant_points(count, delta, zero, range, rng);
            let sur = Surrogate::at(&x, delta, zero, range);
            fd_check(
                &[Input::new(&[count], x), Input::new(&[1], vec![delta]), Input::new(&[1], vec![zero])],
                &move |g, v| g.fake_quantize(v[0], v[1], v[2], range),
                &move |xs| sur.eval(&xs[0], xs[1][0], xs[2][0]),
                &[(0, 1e-3), (1, 1e-2), (2, 1e-2)],
                rng,
            )
        }
        other => Err(format!("unknown primitive {other}")),
    }
}

/// The standalone LSQ+ backward against the surrogate, for both tensor kinds.
pub fn lsq_backward_case(seed: u64) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = BITS[rng.random_range(0..BITS.len())];
    let range = bits.range().unwrap();
    let kind = if rng.random_bool(0.5) {
        TensorKind::Weight
    } else {
        TensorKind::Activation
    };
    let delta = rng.random_range(-6.0..1.0f64).exp() as f32;
    let zero = rng.random_range(range.n..=range.p) as f32;
    let q = QuantizerParams {
        bits,
        delta,
        zero_point: zero,
        kind,
        initialized: true,
    };
    let count = rng.random_range(3..12usize);
    let x = quant_points(count, delta as f64, zero as f64, range, &mut rng);
    let up: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0f32) as f64).collect();
    let xt = Tensor::new(vec![count], x.iter().map(|&v| v as f32).collect()).unwrap();
    let ut = Tensor::new(vec![count], up.iter().map(|&v| v as f32).collect()).unwrap();
    let grads = fake_quantize_backward(&ut, &xt, &q);

    let sur = Surrogate::at(&x, delta as f64, zero as f64, range);
    let obj = |x: &[f64], d: f64, z: f64| -> f64 { sur.eval(x, d, z).iter().zip(&up).map(|(a, b)| a * b).sum() };
    let h = 1e-6;
    let (d, z) = (delta as f64, zero as f64);
    let fd_d = (obj(&x, d + h * d, z) - obj(&x, d - h * d, z)) / (2.0 * h * d);
    let fd_z = (obj(&x, d, z + h) - obj(&x, d, z - h)) / (2.0 * h);
    let fd_x: Vec<f64> = (0..count)
        .map(|j| {
            let mut p = x.clone();
            let mut m = x.clone();
            let hj = h * x[j].abs().max(1.0);
            p[j] += hj;
            m[j] -= hj;
            (obj(&p, d, z) - obj(&m, d, z)) / (2.0 * hj)
        })
        .collect();
    let dx: Vec<f64> = grads.dx.data().iter().map(|&v| v as f64).collect();
    let ex = rel_err(&dx, &fd_x);
    let ed = rel_err(&[grads.d_delta as f64], &[fd_d]);
    let ez = match kind {
        TensorKind::Activation => rel_err(&[grads.d_zero as f64], &[fd_z]),
        TensorKind::Weight => {
            if grads.d_zero != 0.0 {
                return Err("weight quantizer reported a zero-point gradient".into());
            }
            0.0
        }
    };
    if ex >= 1e-3 || ed >= 1e-2 || ez >= 1e-2 {
        return Err(format!("LSQ+ backward errors dx {ex:.3e} dΔ {ed:.3e} dz {ez:.3e}"));
    }
    Ok(ex.max(ed).max(ez))
}

/// Runs `cases` seeded cases of every primitive and of the LSQ+ backward.
pub fn gradient_suite(cases: u64) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for p in PRIMITIVES {
        for s in 0..cases {
            let e = primitive_case(p, 1000 + s).map_err(|e| format!("{p} case {s}: {e}"))?;
            worst = worst.max(e);
        }
    }
    for s in 0..cases {
        let e = lsq_backward_case(5000 + s).map_err(|e| format!("lsq backward case {s}: {e}"))?;
        worst = worst.max(e);
    }
    Ok(format!(
        "{} primitives + LSQ+ backward × {cases} cases, worst rel err {worst:.2e}",
        PRIMITIVES.len()
    ))
}
