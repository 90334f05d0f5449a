//! Low-rank adapter banks switched by layer bit-width, with quantization-aware
//! forward and inference-time merging.
//!
//! Base weights are stored input-major (`y = x·W`, `W: k×d`). An adapter
//! keeps `A: r×k` and `B: d×r`, so its contribution in that orientation is
//! `s·(B·A)ᵀ = s·Aᵀ·Bᵀ` and the low-rank path is `s·(x·Aᵀ)·Bᵀ`. The scale `s`
//! is folded into the adapter delta before quantization, which keeps the
//! merged weight on the quantizer grid for any `s`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::quantize::{fake_quantize, BitWidth, LayerBits, QuantRange, QuantizerParams};
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_SCALING: f32 = 2.0;
pub const A_INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraMode {
    Regular,
    Selective,
    Multiplex,
}

/// Which of the layer's bit-widths selects the adapter module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchKey {
    Weight,
    Activation,
}

impl SwitchKey {
    pub fn pick(self, bits: LayerBits) -> BitWidth {
        match self {
            SwitchKey::Weight => bits.weight,
            SwitchKey::Activation => bits.act,
        }
    }
}

/// Bit-width → module assignments for 3, 4 and 5 modules: the largest
/// widths share the base module, lower widths get their own.
pub fn bit_groups(modules: usize) -> Result<Vec<Vec<BitWidth>>> {
    use BitWidth::*;
    Ok(match modules {
        3 => vec![vec![B2], vec![B3], vec![B4, B8, Full]],
        4 => vec![vec![B2], vec![B3], vec![B4], vec![B8, Full]],
        5 => vec![vec![B2], vec![B3], vec![B4], vec![B8], vec![Full]],
        n => return Err(Error::config(format!("no bit-width assignment for {n} modules"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    /// `r×k`
    pub a: Tensor,
    /// `d×r`
    pub b: Tensor,
    pub rank: usize,
    pub scaling: f32,
}

impl LoraModule {
    /// Gaussian `A`, zero `B`: the module starts as an exact no-op.
    pub fn init(d: usize, k: usize, rank: usize, scaling: f32, rng: &mut ChaCha8Rng) -> Self {
        LoraModule {
            a: Tensor::randn(&[rank, k], A_INIT_STD, rng),
            b: Tensor::zeros(&[d, rank]),
            rank,
            scaling,
        }
    }

    /// `s·(B·A)ᵀ` as a `k×d` tensor.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.a.transpose()?.matmul(&self.b.transpose()?)?.scale(self.scaling))
    }
}

/// An adapter module selected for one forward, and whether its gradient is cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveModule {
    pub index: usize,
    pub detached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplexBank {
    pub mode: LoraMode,
    /// Partition of the candidate bit-widths; `modules[i]` serves `groups[i]`.
    pub groups: Vec<Vec<BitWidth>>,
    pub modules: Vec<LoraModule>,
    /// Group holding the 32-bit bypass (multiplex only).
    pub base: Option<usize>,
    /// Multiplex only: freeze the base module on layers outside the base group.
    pub detach: bool,
    pub switch: SwitchKey,
}

/// Creates a bank for a `k → d` linear layer.
pub fn lora_init(
    d: usize,
    k: usize,
    rank: usize,
    scaling: f32,
    mode: LoraMode,
    groups: &[Vec<BitWidth>],
    seed: u64,
) -> Result<MultiplexBank> {
    if rank == 0 || scaling <= 0.0 || !scaling.is_finite() {
        return Err(Error::config(format!("invalid adapter rank {rank} / scaling {scaling}")));
    }
    let groups = match mode {
        LoraMode::Regular => vec![BitWidth::ALL.to_vec()],
        _ => {
            check_partition(groups)?;
            groups.to_vec()
        }
    };
    let base = match mode {
        LoraMode::Multiplex => Some(
            groups
                .iter()
                .position(|g| g.contains(&BitWidth::Full))
                .expect("partition covers the bypass"),
        ),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modules = groups
        .iter()
        .map(|_| LoraModule::init(d, k, rank, scaling, &mut rng))
        .collect();
    Ok(MultiplexBank {
        mode,
        groups,
        modules,
        base,
        detach: false,
        switch: SwitchKey::Weight,
    })
}

fn check_partition(groups: &[Vec<BitWidth>]) -> Result<()> {
    let mut seen = Vec::new();
    for g in groups {
        if g.is_empty() {
            return Err(Error::config("empty bit-width group"));
        }
        for b in g {
            if seen.contains(b) {
                return Err(Error::config(format!("bit-width {b} assigned to two adapter groups")));
            }
            seen.push(*b);
        }
    }
    if let Some(missing) = BitWidth::ALL.iter().find(|b| !seen.contains(b)) {
        return Err(Error::config(format!("bit-width {missing} has no adapter group")));
    }
    Ok(())
}

impl MultiplexBank {
    pub fn with_detach(mut self, detach: bool) -> Self {
        self.detach = detach;
        self
    }

    pub fn with_switch(mut self, switch: SwitchKey) -> Self {
        self.switch = switch;
        self
    }

    fn group_of(&self, bits: BitWidth) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.contains(&bits))
            .ok_or_else(|| Error::config(format!("no adapter module serves {bits}-bit layers")))
    }

    /// Modules participating in a forward for a layer at `bits`.
    pub fn active(&self, bits: LayerBits) -> Result<Vec<ActiveModule>> {
        let key = self.switch.pick(bits);
        let group = self.group_of(key)?;
        let live = |index| ActiveModule { index, detached: false };
        Ok(match (self.mode, self.base) {
            (LoraMode::Multiplex, Some(base)) if group != base => vec![
                ActiveModule {
                    index: base,
                    detached: self.detach,
                },
                live(group),
            ],
            (LoraMode::Multiplex, Some(base)) => vec![live(base)],
            _ => vec![live(group)],
        })
    }

    pub fn active_modules(&self, bits: LayerBits) -> Result<Vec<&LoraModule>> {
        Ok(self.active(bits)?.into_iter().map(|m| &self.modules[m.index]).collect())
    }

    /// Merged inference weight for a layer running at `bits`.
    pub fn merge(&self, w0: &Tensor, bits: LayerBits, q: Option<&QuantizerParams>) -> Result<Tensor> {
        merge(w0, &self.active_modules(bits)?, q)
    }

    /// Quantization-aware forward for a layer at `bits`. `bind` turns each
    /// active module into graph leaves; a detached module must be bound as
    /// constants.
    pub fn forward_with<F>(
        &self,
        g: &mut Graph,
        x: Var,
        w0: Var,
        bits: LayerBits,
        quant: Option<QuantVars>,
        mut bind: F,
    ) -> Result<Var>
    where
        F: FnMut(&mut Graph, ActiveModule, &LoraModule) -> Result<AdapterVars>,
    {
        let mut adapters = Vec::new();
        for m in self.active(bits)? {
            adapters.push(bind(g, m, &self.modules[m.index])?);
        }
        qalora_forward(g, x, w0, &adapters, quant)
    }
}

/// Sum of `s·(B·A)ᵀ` over the given modules, in order.
pub fn adapter_delta(modules: &[&LoraModule]) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    for m in modules {
        let d = m.delta()?;
        acc = Some(match acc {
            Some(a) => a.add(&d)?,
            None => d,
        });
    }
    Ok(acc)
}

fn check_delta(w0: &Tensor, delta: &Tensor) -> Result<()> {
    if w0.shape() != delta.shape() {
        return Err(Error::shape(format!(
            "adapter delta {:?} does not match base weight {:?}",
            delta.shape(),
            w0.shape()
        )));
    }
    Ok(())
}

/// `W̃ = quantize(W0 + ΔW) − ΔW`, with no gradient tracking. The bypass returns `W0`.
pub fn pre_quantization(w0: &Tensor, modules: &[&LoraModule], q: Option<&QuantizerParams>) -> Result<Tensor> {
    let q = match q {
        Some(q) if !q.bits.is_full() => q,
        _ => return Ok(w0.clone()),
    };
    match adapter_delta(modules)? {
        None => Ok(fake_quantize(w0, q)),
        Some(delta) => {
            check_delta(w0, &delta)?;
            fake_quantize(&w0.add(&delta)?, q).sub(&delta)
        }
    }
}

/// `quantize(W0 + ΔW)`; without a quantizer, `W0 + ΔW`.
pub fn merge(w0: &Tensor, modules: &[&LoraModule], q: Option<&QuantizerParams>) -> Result<Tensor> {
    let merged = match adapter_delta(modules)? {
        None => w0.clone(),
        Some(delta) => {
            check_delta(w0, &delta)?;
            w0.add(&delta)?
        }
    };
    Ok(match q {
        Some(q) => fake_quantize(&merged, q),
        None => merged,
    })
}

/// Graph handles of one adapter module (possibly narrowed for elastic width).
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub scaling: f32,
}

/// Graph handles of a weight quantizer.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub delta: Var,
    pub zero: Var,
    pub range: QuantRange,
}

/// Quantization-aware adapter forward.
///
/// The output value is `x·quantize(W0 + ΔW)` exactly, i.e. bit-identical to
/// running the merged weight. Gradients are those of `x·W̃ + Σ s·(x·Aᵀ)·Bᵀ`
/// with `W̃` detached: adapters learn through the low-rank path only, the
/// quantizer step size through the fake-quantized weight, and `x` sees the
/// merged weight.
pub fn qalora_forward(
    g: &mut Graph,
    x: Var,
    w0: Var,
    adapters: &[AdapterVars],
    quant: Option<QuantVars>,
) -> Result<Var> {
    let mut delta: Option<Tensor> = None;
    for ad in adapters {
        let d = g.value(ad.a).transpose()?.matmul(&g.value(ad.b).transpose()?)?.scale(ad.scaling);
        delta = Some(match delta {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
    }
    let target = match delta {
        Some(d) => {
            check_delta(g.value(w0), &d)?;
            let dv = g.constant(d);
            g.add(w0, dv)?
        }
        None => w0,
    };
    let w_hat = match quant {
        Some(q) => g.fake_quantize(target, q.delta, q.zero, q.range)?,
        None => target,
    };
    let y = g.matmul(x, w_hat)?;

    let trainable: Vec<&AdapterVars> = adapters
        .iter()
        .filter(|ad| g.requires_grad(ad.a) || g.requires_grad(ad.b))
        .collect();
    if trainable.is_empty() {
        return Ok(y);
    }
    let xs = g.detach(x);
    let mut side: Option<Var> = None;
    for ad in trainable {
        let at = g.transpose(ad.a)?;
        let bt = g.transpose(ad.b)?;
        let xa = g.matmul(xs, at)?;
        let xab = g.matmul(xa, bt)?;
        let l = g.scale(xab, ad.scaling);
        side = Some(match side {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    g.with_grad_path(y, side.expect("non-empty"))
}
