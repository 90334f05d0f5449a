//! Learnable asymmetric fake quantization (LSQ+ style) and static min-max
//! quantization.
//!
//! A quantizer maps a real `x` to the integer code
//! `x_q = clamp(round(x/Δ + z), n, p)` with `[n, p] = [0, 2^b − 1]` and
//! reconstructs `x̂ = (x_q − z)·Δ`. Rounding is round-half-to-even. The
//! quotient is formed in `f64` so that exact ties (for example `0.5 / (1/3)`)
//! are not pushed off the tie by `f32` rounding of the step size.
//!
//! Gradients use the straight-through estimator: `round` is treated as the
//! identity inside the clamp range.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Candidate bit-width. `Full` is the 32-bit bypass (no quantization).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B2,
    B3,
    B4,
    B8,
    Full,
}

impl BitWidth {
    pub const ALL: [BitWidth; 5] = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8, BitWidth::Full];

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B3 => 3,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::Full => 32,
        }
    }

    pub fn is_full(self) -> bool {
        self == BitWidth::Full
    }

    /// Integer range `[n, p]`; `None` for the bypass.
    pub fn range(self) -> Option<QuantRange> {
        (!self.is_full()).then(|| QuantRange::for_bits(self.bits()))
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        Ok(match bits {
            2 => BitWidth::B2,
            3 => BitWidth::B3,
            4 => BitWidth::B4,
            8 => BitWidth::B8,
            32 => BitWidth::Full,
            other => return Err(Error::config(format!("unsupported bit-width {other}"))),
        })
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl FromStr for BitWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(BitWidth::Full);
        }
        let bits: u32 = s
            .parse()
            .map_err(|_| Error::config(format!("bad bit-width '{s}'")))?;
        BitWidth::try_from(bits)
    }
}

/// (weight, activation) bit-widths of one quantized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerBits {
    pub weight: BitWidth,
    pub act: BitWidth,
}

impl LayerBits {
    pub fn new(weight: BitWidth, act: BitWidth) -> Self {
        LayerBits { weight, act }
    }

    pub fn uniform(bits: BitWidth) -> Self {
        LayerBits::new(bits, bits)
    }
}

impl fmt::Display for LayerBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}a{}", self.weight, self.act)
    }
}

impl FromStr for LayerBits {
    type Err = Error;

    /// Parses `w8a4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad layer bits '{s}', expected e.g. w8a4"));
        let rest = s.strip_prefix('w').ok_or_else(bad)?;
        let (w, a) = rest.split_once('a').ok_or_else(bad)?;
        Ok(LayerBits::new(w.parse()?, a.parse()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantRange {
    pub n: f32,
    pub p: f32,
}

impl QuantRange {
    pub fn for_bits(bits: u32) -> Self {
        QuantRange {
            n: 0.0,
            p: ((1u64 << bits) - 1) as f32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Activation,
}

impl TensorKind {
    pub fn tag(self) -> &'static str {
        match self {
            TensorKind::Weight => "w",
            TensorKind::Activation => "a",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    pub bits: BitWidth,
    pub delta: f32,
    pub zero_point: f32,
    pub kind: TensorKind,
    /// False until calibrated from data or weights.
    pub initialized: bool,
}

impl QuantizerParams {
    /// Placeholder awaiting min/max calibration.
    pub fn uncalibrated(bits: BitWidth, kind: TensorKind) -> Self {
        QuantizerParams {
            bits,
            delta: 1.0,
            zero_point: 0.0,
            kind,
            initialized: false,
        }
    }

    pub fn range(&self) -> Option<QuantRange> {
        self.bits.range()
    }

    /// LSQ+ trains the zero-point only for activations.
    pub fn zero_point_trainable(&self) -> bool {
        self.kind == TensorKind::Activation
    }

    /// Restores `Δ > 0` and `n ≤ z ≤ p` after an optimizer step.
    pub fn clamp_in_place(&mut self) {
        self.delta = self.delta.max(MIN_DELTA);
        if let Some(r) = self.range() {
            self.zero_point = self.zero_point.clamp(r.n, r.p);
        }
    }

    pub fn grid_code(&self, x: f32) -> Option<f64> {
        self.range()
            .map(|r| quant_code(x, self.delta as f64, self.zero_point as f64, r))
    }
}

pub const MIN_DELTA: f32 = 1e-8;

/// Scale and zero-point covering `[x_min, x_max]` at `bits`.
pub fn init_quantizer(x_min: f32, x_max: f32, bits: BitWidth, kind: TensorKind) -> Result<QuantizerParams> {
    let range = bits
        .range()
        .ok_or_else(|| Error::config("the 32-bit bypass has no quantizer parameters"))?;
    if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
        return Err(Error::Range(format!(
            "degenerate quantizer range [{x_min}, {x_max}]"
        )));
    }
    let delta = (x_max - x_min) / (range.p - range.n);
    let zero_point = (-x_min / delta).round_ties_even().clamp(range.n, range.p);
    Ok(QuantizerParams {
        bits,
        delta,
        zero_point,
        kind,
        initialized: true,
    })
}

/// [`init_quantizer`] on a tensor's min/max, widening constant tensors slightly.
pub fn calibrate(x: &Tensor, bits: BitWidth, kind: TensorKind) -> Result<QuantizerParams> {
    let (mut lo, mut hi) = (x.min(), x.max());
    if hi - lo <= f32::EPSILON * lo.abs().max(1.0) {
        lo -= 1e-3;
        hi += 1e-3;
    }
    init_quantizer(lo, hi, bits, kind)
}

/// Integer code `clamp(round(x/Δ + z), n, p)`.
pub fn quant_code(x: f32, delta: f64, zero: f64, range: QuantRange) -> f64 {
    (x as f64 / delta + zero)
        .round_ties_even()
        .clamp(range.n as f64, range.p as f64)
}

pub fn dequant(code: f64, delta: f64, zero: f64) -> f32 {
    ((code - zero) * delta) as f32
}

pub(crate) fn fake_quant_value(x: f32, delta: f32, zero: f32, range: QuantRange) -> f32 {
    let (d, z) = (delta as f64, zero as f64);
    dequant(quant_code(x, d, z, range), d, z)
}

/// Quantize-dequantize; identity for the 32-bit bypass.
pub fn fake_quantize(x: &Tensor, q: &QuantizerParams) -> Tensor {
    match q.range() {
        Some(r) => x.map(|v| fake_quant_value(v, q.delta, q.zero_point, r)),
        None => x.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct FakeQuantGrads {
    pub dx: Tensor,
    pub d_delta: f32,
    pub d_zero: f32,
}

pub(crate) fn fake_quant_grads(x: &Tensor, up: &Tensor, delta: f32, zero: f32, range: QuantRange) -> FakeQuantGrads {
    let (d, z) = (delta as f64, zero as f64);
    let (n, p) = (range.n as f64, range.p as f64);
    let mut dx = Vec::with_capacity(x.numel());
    let (mut d_delta, mut d_zero) = (0.0f64, 0.0f64);
    for (&xv, &u) in x.data().iter().zip(up.data()) {
        let scaled = xv as f64 / d;
        let v = scaled + z;
        let u = u as f64;
        if v < n {
            dx.push(0.0);
            d_delta += u * (n - z);
            d_zero -= u * d;
        } else if v > p {
            dx.push(0.0);
            d_delta += u * (p - z);
            d_zero -= u * d;
        } else {
            dx.push(u as f32);
            d_delta += u * (v.round_ties_even() - z - scaled);
        }
    }
    FakeQuantGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).expect("same shape"),
        d_delta: d_delta as f32,
        d_zero: d_zero as f32,
    }
}

/// Straight-through gradients of [`fake_quantize`] with respect to `x`, `Δ` and `z`.
/// Weight quantizers never report a zero-point gradient.
pub fn fake_quantize_backward(upstream: &Tensor, x: &Tensor, q: &QuantizerParams) -> FakeQuantGrads {
    match q.range() {
        None => FakeQuantGrads {
            dx: upstream.clone(),
            d_delta: 0.0,
            d_zero: 0.0,
        },
        Some(r) => {
            let mut g = fake_quant_grads(x, upstream, q.delta, q.zero_point, r);
            if !q.zero_point_trainable() {
                g.d_zero = 0.0;
            }
            g
        }
    }
}

/// One-shot min-max quantization with no trainable state. Constant tensors
/// pass through unchanged.
pub fn minmax_quantize_static(x: &Tensor, bits: BitWidth) -> Tensor {
    let Some(range) = bits.range() else {
        return x.clone();
    };
    let (lo, hi) = (x.min() as f64, x.max() as f64);
    if x.numel() == 0 || !(hi > lo) {
        return x.clone();
    }
    let delta = (hi - lo) / (range.p - range.n) as f64;
    let zero = (-lo / delta).round_ties_even().clamp(range.n as f64, range.p as f64);
    x.map(|v| dequant(quant_code(v, delta, zero, range), delta, zero))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuantKey {
    pub layer: String,
    pub kind: TensorKind,
    pub bits: BitWidth,
}

impl QuantKey {
    pub fn new(layer: impl Into<String>, kind: TensorKind, bits: BitWidth) -> Self {
        QuantKey {
            layer: layer.into(),
            kind,
            bits,
        }
    }

    /// Stable name used for parameters, gradients and checkpoints.
    pub fn name(&self) -> String {
        format!("quant.{}.{}{}", self.layer, self.kind.tag(), self.bits)
    }
}

/// One quantizer per (layer, tensor kind, bit-width). The 32-bit bypass has no entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantizerBank {
    entries: BTreeMap<QuantKey, QuantizerParams>,
}

impl QuantizerBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: QuantKey, params: QuantizerParams) -> Result<()> {
        if key.bits.is_full() {
            return Err(Error::config(format!("{} is a bypass and takes no quantizer", key.name())));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::config(format!("duplicate quantizer {}", key.name())));
        }
        self.entries.insert(key, params);
        Ok(())
    }

    pub fn get(&self, key: &QuantKey) -> Option<&QuantizerParams> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &QuantKey) -> Option<&mut QuantizerParams> {
        self.entries.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&QuantKey, &QuantizerParams)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&QuantKey, &mut QuantizerParams)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
