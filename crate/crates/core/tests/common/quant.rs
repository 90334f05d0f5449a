//! Quantizer invariants over random (x, Δ, z, b) draws.

use qsnet::quantize::{dequant, fake_quantize, fake_quantize_backward, BitWidth, QuantizerParams, TensorKind};
use qsnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: [BitWidth; 4] = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8];

pub struct Draw {
    pub q: QuantizerParams,
    pub x: Vec<f32>,
}

pub fn draw(rng: &mut ChaCha8Rng) -> Draw {
    let bits = BITS[rng.random_range(0..BITS.len())];
    let r = bits.range().unwrap();
    let kind = if rng.random_bool(0.5) {
        TensorKind::Weight
    } else {
        TensorKind::Activation
    };
    let delta = rng.random_range(-7.0..2.5f64).exp() as f32;
    // learned zero-points are real-valued; calibrated ones are integers
    let zero = if rng.random_bool(0.5) {
        rng.random_range(r.n..=r.p).round()
    } else {
        rng.random_range(r.n..=r.p)
    };
    let (lo, hi) = ((r.n - zero) * delta, (r.p - zero) * delta);
    let span = (hi - lo).max(delta);
    let x = (0..16)
        .map(|_| rng.random_range(lo - 0.5 * span..hi + 0.5 * span))
        .collect();
    Draw {
        q: QuantizerParams {
            bits,
            delta,
            zero_point: zero,
            kind,
            initialized: true,
        },
        x,
    }
}

/// Checks grid membership, idempotence, monotonicity, the Δ/2 error bound
/// inside the representable range and the weight zero-point freeze.
pub fn check_draw(d: &Draw) -> std::result::Result<(), String> {
    let q = &d.q;
    let r = q.range().unwrap();
    let (delta, zero) = (q.delta as f64, q.zero_point as f64);
    let mut xs = d.x.clone();
    xs.sort_by(f32::total_cmp);
    let t = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
    let y = fake_quantize(&t, q);
    let yy = fake_quantize(&y, q);
    if y.data() != yy.data() {
        return Err(format!("not idempotent for {q:?}"));
    }
    let (lo, hi) = ((r.n as f64 - zero) * delta, (r.p as f64 - zero) * delta);
    for (i, (&x, &v)) in xs.iter().zip(y.data()).enumerate() {
        let k = (v as f64 / delta + zero).round();
        if k < r.n as f64 || k > r.p as f64 || dequant(k, delta, zero) != v {
            return Err(format!("{v} (from {x}) is off the grid of {q:?}"));
        }
        if i > 0 && v < y.data()[i - 1] {
            return Err(format!("not monotone at {x} for {q:?}"));
        }
        let xd = x as f64;
        if xd >= lo && xd <= hi {
            let err = (v as f64 - xd).abs();
            if err > delta / 2.0 * (1.0 + 1e-6) + 1e-6 * xd.abs() {
                return Err(format!("|fq({x}) − x| = {err} exceeds Δ/2 = {}", delta / 2.0));
            }
        }
    }
    let up = Tensor::new(vec![xs.len()], vec![1.0; xs.len()]).unwrap();
    let g = fake_quantize_backward(&up, &t, q);
    if q.kind == TensorKind::Weight && g.d_zero != 0.0 {
        return Err("weight quantizer produced a zero-point gradient".into());
    }
    Ok(())
}

pub fn quantizer_suite(cases: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let mut saturated_activations = 0;
    for i in 0..cases {
        let d = draw(&mut rng);
        check_draw(&d).map_err(|e| format!("case {i}: {e}"))?;
        if d.q.kind == TensorKind::Activation {
            let t = Tensor::new(vec![d.x.len()], d.x.clone()).unwrap();
            let up = Tensor::new(vec![d.x.len()], vec![1.0; d.x.len()]).unwrap();
            if fake_quantize_backward(&up, &t, &d.q).d_zero != 0.0 {
                saturated_activations += 1;
            }
        }
    }
    // the freeze must be specific to weights
    if saturated_activations == 0 {
        return Err("activation quantizers never produced a zero-point gradient".into());
    }
    Ok(format!("{cases} random cases"))
}
