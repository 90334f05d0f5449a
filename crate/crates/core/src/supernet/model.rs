use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::space::{validate_config, SearchSpace, SubnetConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lora::{self, AdapterVars, LoraMode, MultiplexBank, QuantVars, SwitchKey};
use crate::quantize::{
    calibrate, minmax_quantize_static, BitWidth, LayerBits, QuantKey, QuantizerBank, QuantizerParams, TensorKind,
};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
pub const HEAD_BITS: BitWidth = BitWidth::B8;

/// Adapter configuration applied when LoRA banks are attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    pub scaling: f32,
    pub mode: LoraMode,
    /// Number of modules per bank (3, 4 or 5); ignored in regular mode.
    pub modules: usize,
    pub detach: bool,
    pub switch: SwitchKey,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            rank: lora::DEFAULT_RANK,
            scaling: lora::DEFAULT_SCALING,
            mode: LoraMode::Multiplex,
            modules: 5,
            detach: false,
            switch: SwitchKey::Weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Base,
    Lora,
    Quant,
}

/// Which parameter groups become trainable graph leaves in a forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub base: bool,
    pub lora: bool,
    pub quant: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        base: false,
        lora: false,
        quant: false,
    };
    pub const ALL: Trainable = Trainable {
        base: true,
        lora: true,
        quant: true,
    };

    fn has(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Base => self.base,
            ParamGroup::Lora => self.lora,
            ParamGroup::Quant => self.quant,
        }
    }
}

/// Dense layer `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[din, dout], (1.0 / din as f32).sqrt(), rng),
            bias: Tensor::zeros(&[dout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Norm {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// How a linear layer's stored weight is cut for the active MLP width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    Full,
    /// Leading output units (columns of `W`, entries of `b`).
    Out(usize),
    /// Leading input units (rows of `W`).
    In(usize),
}

pub fn block_id(stage: usize, layer: usize) -> String {
    format!("s{stage}.l{layer}")
}

/// Elastic ViT supernet with a per-pixel linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticViT {
    pub space: SearchSpace,
    pub patch_embed: Linear,
    /// `G×G×D` grid for the largest resolution.
    pub pos_embed: Tensor,
    pub stages: Vec<Vec<Block>>,
    pub norm: Norm,
    pub neck: Linear,
    pub head: Linear,
    pub quant: QuantizerBank,
    /// Adapter banks keyed by layer id, present once attached.
    pub lora: Option<BTreeMap<String, MultiplexBank>>,
    /// Base weights (including the head) are frozen.
    pub frozen: bool,
}

/// A recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    /// `[batch·res·res, classes]` pixel logits, row-major over (image, y, x).
    pub logits: Var,
    /// `[batch·tokens, dim]` neck output feeding the head.
    pub features: Var,
    /// Trainable leaves bound in this pass.
    pub params: Vec<BoundParam>,
    /// Quantizers calibrated on first use during this pass.
    pub calibrations: Vec<(QuantKey, QuantizerParams)>,
}

#[derive(Clone, Debug)]
pub struct BoundParam {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

struct Ctx<'m> {
    model: &'m ElasticViT,
    g: Graph,
    trainable: Trainable,
    params: Vec<BoundParam>,
    calibrations: Vec<(QuantKey, QuantizerParams)>,
}

impl Ctx<'_> {
    fn bind(&mut self, name: String, group: ParamGroup, value: &Tensor) -> Var {
        if self.trainable.has(group) {
            let var = self.g.param(value.clone());
            self.params.push(BoundParam { name, group, var });
            var
        } else {
            self.g.constant(value.clone())
        }
    }

    fn base(&mut self, name: String, value: &Tensor) -> Var {
        let group = ParamGroup::Base;
        if self.model.frozen {
            self.g.constant(value.clone())
        } else {
            self.bind(name, group, value)
        }
    }

    /// Quantizer for `key`, calibrating from `x` on first use.
    fn quantizer(&mut self, key: QuantKey, x: &Tensor) -> Result<Option<QuantVars>> {
        let Some(range) = key.bits.range() else {
            return Ok(None);
        };
        let stored = self
            .model
            .quant
            .get(&key)
            .ok_or_else(|| Error::config(format!("no quantizer {}", key.name())))?;
        let q = if stored.initialized {
            stored.clone()
        } else {
            let q = calibrate(x, key.bits, key.kind)?;
            self.calibrations.push((key.clone(), q.clone()));
            q
        };
        let name = key.name();
        let delta = self.bind(format!("{name}.delta"), ParamGroup::Quant, &Tensor::scalar(q.delta));
        let zero = if q.zero_point_trainable() {
            self.bind(format!("{name}.zero"), ParamGroup::Quant, &Tensor::scalar(q.zero_point))
        } else {
            self.g.constant(Tensor::scalar(q.zero_point))
        };
        Ok(Some(QuantVars { delta, zero, range }))
    }

    fn slice(&mut self, v: Var, axis: usize, len: usize) -> Result<Var> {
        if self.g.shape(v)[axis] == len {
            Ok(v)
        } else {
            self.g.narrow(v, axis, 0, len)
        }
    }

    /// Quantized linear layer with optional adapters.
    fn qlinear(&mut self, id: &str, x: Var, lin: &Linear, slice: Slice, bits: LayerBits) -> Result<Var> {
        let w_full = self.base(format!("{id}.weight"), &lin.weight);
        let b_full = self.base(format!("{id}.bias"), &lin.bias);
        let (w, b) = match slice {
            Slice::Full => (w_full, b_full),
            Slice::Out(n) => (self.slice(w_full, 1, n)?, self.slice(b_full, 0, n)?),
            Slice::In(n) => (self.slice(w_full, 0, n)?, b_full),
        };

        let xv = self.g.value(x).clone();
        let xq = match self.quantizer(QuantKey::new(id, TensorKind::Activation, bits.act), &xv)? {
            Some(q) => self.g.fake_quantize(x, q.delta, q.zero, q.range)?,
            None => x,
        };
        let wv = self.g.value(w).clone();
        let wq = self.quantizer(QuantKey::new(id, TensorKind::Weight, bits.weight), &wv)?;

        let bank = self.model.lora.as_ref().and_then(|l| l.get(id));
        let y = match bank {
            Some(bank) => {
                let trainable = self.trainable.lora;
                bank.forward_with(&mut self.g, xq, w, bits, wq, |g, active, module| {
                    let prefix = format!("lora.{id}.m{}", active.index);
                    let (a, b) = if trainable && !active.detached {
                        let a = g.param(module.a.clone());
                        let b = g.param(module.b.clone());
                        self.params.push(BoundParam {
                            name: format!("{prefix}.a"),
                            group: ParamGroup::Lora,
                            var: a,
                        });
                        self.params.push(BoundParam {
                            name: format!("{prefix}.b"),
                            group: ParamGroup::Lora,
                            var: b,
                        });
                        (a, b)
                    } else {
                        (g.constant(module.a.clone()), g.constant(module.b.clone()))
                    };
                    let (a, b) = match slice {
                        Slice::Full => (a, b),
                        Slice::Out(n) => (a, narrow_if(g, b, 0, n)?),
                        Slice::In(n) => (narrow_if(g, a, 1, n)?, b),
                    };
                    Ok(AdapterVars {
                        a,
                        b,
                        scaling: module.scaling,
                    })
                })?
            }
            None => {
                let w_hat = match wq {
                    Some(q) => self.g.fake_quantize(w, q.delta, q.zero, q.range)?,
                    None => w,
                };
                self.g.matmul(xq, w_hat)?
            }
        };
        self.g.add(y, b)
    }

    fn norm(&mut self, id: &str, x: Var, n: &Norm) -> Result<Var> {
        let gamma = self.base(format!("{id}.gamma"), &n.gamma);
        let beta = self.base(format!("{id}.beta"), &n.beta);
        affine_norm(&mut self.g, x, gamma, beta)
    }

    fn block(&mut self, id: &str, x: Var, blk: &Block, ratio: f32, bits: LayerBits, dims: (usize, usize)) -> Result<Var> {
        let hidden = self.model.space.hidden_dim(ratio);
        let h = self.norm(&format!("{id}.ln1"), x, &blk.ln1)?;
        let qkv = self.qlinear(&format!("{id}.qkv"), h, &blk.qkv, Slice::Full, bits)?;
        let space = &self.model.space;
        let att = attention(&mut self.g, qkv, dims.0, dims.1, space.num_heads, space.head_dim())?;
        let att = self.qlinear(&format!("{id}.proj"), att, &blk.proj, Slice::Full, bits)?;
        let x = self.g.add(x, att)?;
        let h = self.norm(&format!("{id}.ln2"), x, &blk.ln2)?;
        let h = self.qlinear(&format!("{id}.fc1"), h, &blk.fc1, Slice::Out(hidden), bits)?;
        let h = self.g.gelu(h);
        let h = self.qlinear(&format!("{id}.fc2"), h, &blk.fc2, Slice::In(hidden), bits)?;
        self.g.add(x, h)
    }
}

/// Multi-head self-attention over a fused `[batch·tokens, 3·dim]` projection.
pub(crate) fn attention(g: &mut Graph, qkv: Var, batch: usize, tokens: usize, heads: usize, hd: usize) -> Result<Var> {
    let t = g.reshape(qkv, &[batch, tokens, 3, heads, hd])?;
    let t = g.permute(t, &[2, 0, 3, 1, 4])?;
    let t = g.reshape(t, &[3, batch * heads, tokens, hd])?;
    let mut pick = |i| -> Result<Var> {
        let v = g.narrow(t, 0, i, 1)?;
        g.reshape(v, &[batch * heads, tokens, hd])
    };
    let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f32).sqrt());
    let att = g.softmax(scores)?;
    let out = g.bmm(att, v)?;
    let out = g.reshape(out, &[batch, heads, tokens, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[batch * tokens, heads * hd])
}

/// Layernorm followed by the per-feature affine map.
pub(crate) fn affine_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let h = g.layernorm(x, LN_EPS)?;
    let h = g.mul(h, gamma)?;
    g.add(h, beta)
}

/// Per-pixel head on `[rows, dim]` features: 8-bit min-max quantized input
/// and weight with straight-through gradients.
pub(crate) fn quantized_head(g: &mut Graph, h: Var, weight: Var, bias: Var) -> Result<Var> {
    let hq = g.straight_through(h, |t| minmax_quantize_static(t, HEAD_BITS))?;
    let wq = g.straight_through(weight, |t| minmax_quantize_static(t, HEAD_BITS))?;
    let logits = g.matmul(hq, wq)?;
    g.add(logits, bias)
}

fn narrow_if(g: &mut Graph, v: Var, axis: usize, len: usize) -> Result<Var> {
    if g.shape(v)[axis] == len {
        Ok(v)
    } else {
        g.narrow(v, axis, 0, len)
    }
}

impl ElasticViT {
    /// Seeded initialization: scaled Gaussian linears, unit layernorms, small
    /// positional embeddings, and an uncalibrated quantizer for every
    /// (layer, kind, bit-width) of the space.
    pub fn new(space: SearchSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = space.embed_dim;
        let hidden = space.max_hidden();
        let grid = space.grid(space.max_resolution());
        let patch_embed = Linear::init(space.patch_size.pow(2) * space.in_channels, d, &mut rng);
        let pos_embed = Tensor::randn(&[grid, grid, d], 0.02, &mut rng);
        let stages = (0..space.num_stages())
            .map(|s| {
                (0..space.max_depth(s))
                    .map(|_| Block {
                        ln1: Norm::new(d),
                        qkv: Linear::init(d, 3 * d, &mut rng),
                        proj: Linear::init(d, d, &mut rng),
                        ln2: Norm::new(d),
                        fc1: Linear::init(d, hidden, &mut rng),
                        fc2: Linear::init(hidden, d, &mut rng),
                    })
                    .collect()
            })
            .collect();
        let neck = Linear::init(d, d, &mut rng);
        let head = Linear::init(d, space.num_classes, &mut rng);
        let mut model = ElasticViT {
            space,
            patch_embed,
            pos_embed,
            stages,
            norm: Norm::new(d),
            neck,
            head,
            quant: QuantizerBank::new(),
            lora: None,
            frozen: false,
        };
        for id in model.quantized_layers() {
            for &b in model.space.weight_bits.iter().filter(|b| !b.is_full()) {
                model
                    .quant
                    .insert(QuantKey::new(&id, TensorKind::Weight, b), QuantizerParams::uncalibrated(b, TensorKind::Weight))?;
            }
            for &b in model.space.act_bits.iter().filter(|b| !b.is_full()) {
                model.quant.insert(
                    QuantKey::new(&id, TensorKind::Activation, b),
                    QuantizerParams::uncalibrated(b, TensorKind::Activation),
                )?;
            }
        }
        Ok(model)
    }

    /// Ids of all layers with learnable quantizers, in forward order.
    pub fn quantized_layers(&self) -> Vec<String> {
        let mut ids = vec!["embed".to_string()];
        for (s, stage) in self.stages.iter().enumerate() {
            for l in 0..stage.len() {
                for part in ["qkv", "proj", "fc1", "fc2"] {
                    ids.push(format!("{}.{part}", block_id(s, l)));
                }
            }
        }
        ids.push("neck".into());
        ids
    }

    /// Ids of the layers that carry adapters.
    pub fn adapter_layers(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for l in 0..stage.len() {
                for part in ["qkv", "fc1", "fc2"] {
                    ids.push(format!("{}.{part}", block_id(s, l)));
                }
            }
        }
        ids
    }

    /// Looks up a linear layer by id (`embed`, `neck`, `head`, `s0.l1.fc2`, ...).
    pub fn linear(&self, id: &str) -> Option<&Linear> {
        match id {
            "embed" => Some(&self.patch_embed),
            "neck" => Some(&self.neck),
            "head" => Some(&self.head),
            _ => {
                let (blk, part) = id.rsplit_once('.')?;
                let (s, l) = blk.strip_prefix('s')?.split_once(".l")?;
                let b = self.stages.get(s.parse::<usize>().ok()?)?.get(l.parse::<usize>().ok()?)?;
                match part {
                    "qkv" => Some(&b.qkv),
                    "proj" => Some(&b.proj),
                    "fc1" => Some(&b.fc1),
                    "fc2" => Some(&b.fc2),
                    _ => None,
                }
            }
        }
    }

    /// Attaches fresh adapter banks to the qkv and MLP layers.
    pub fn attach_lora(&mut self, settings: &LoraSettings, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::config("adapters are already attached"));
        }
        let groups = match settings.mode {
            LoraMode::Regular => Vec::new(),
            _ => lora::bit_groups(settings.modules)?,
        };
        let mut banks = BTreeMap::new();
        for (i, id) in self.adapter_layers().into_iter().enumerate() {
            let w = &self.linear(&id).expect("adapter layer exists").weight;
            let (k, d) = (w.shape()[0], w.shape()[1]);
            let bank = lora::lora_init(
                d,
                k,
                settings.rank,
                settings.scaling,
                settings.mode,
                &groups,
                seed.wrapping_add(i as u64),
            )?
            .with_detach(settings.detach)
            .with_switch(settings.switch);
            banks.insert(id, bank);
        }
        self.lora = Some(banks);
        Ok(())
    }

    /// Positional grid for `resolution`; the stored grid itself at the largest one.
    pub fn interpolate_pos_embed(&self, resolution: usize) -> Result<Tensor> {
        let g = self.space.grid(resolution);
        if g == self.pos_embed.shape()[0] {
            return Ok(self.pos_embed.clone());
        }
        crate::tensor::bilinear_resize(&self.pos_embed, g, g)
    }

    /// Runs subnet `cfg` on `[batch, res, res, channels]` images.
    pub fn forward(&self, cfg: &SubnetConfig, images: &Tensor, trainable: Trainable) -> Result<Forward> {
        validate_config(&self.space, cfg)?;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.resolution || s[2] != cfg.resolution || s[3] != self.space.in_channels {
            return Err(Error::shape(format!(
                "images {:?} do not match resolution {} with {} channel(s)",
                s, cfg.resolution, self.space.in_channels
            )));
        }
        let batch = s[0];
        let res = cfg.resolution;
        let grid = self.space.grid(res);
        let tokens = grid * grid;
        let d = self.space.embed_dim;
        let classes = self.space.num_classes;

        let mut cx = Ctx {
            model: self,
            g: Graph::new(),
            trainable,
            params: Vec::new(),
            calibrations: Vec::new(),
        };
        let img = cx.g.constant(images.clone());
        let patches = cx.g.patchify(img, self.space.patch_size)?;
        let x = cx.qlinear("embed", patches, &self.patch_embed, Slice::Full, cfg.embed_bits)?;

        let pos_full = cx.base("pos_embed".into(), &self.pos_embed);
        let pos = if grid == self.pos_embed.shape()[0] {
            pos_full
        } else {
            cx.g.bilinear_resize(pos_full, grid, grid)?
        };
        let pos = cx.g.reshape(pos, &[tokens, d])?;
        let x = cx.g.reshape(x, &[batch, tokens, d])?;
        let x = cx.g.add(x, pos)?;
        let mut x = cx.g.reshape(x, &[batch * tokens, d])?;

        for (si, stage) in self.stages.iter().enumerate() {
            for li in 0..cfg.depths[si] {
                let id = block_id(si, li);
                x = cx.block(&id, x, &stage[li], cfg.mlp_ratios[si][li], cfg.bits[si][li], (batch, tokens))?;
            }
        }

        let h = cx.norm("norm", x, &self.norm)?;
        let h = cx.qlinear("neck", h, &self.neck, Slice::Full, cfg.neck_bits)?;
        let h = cx.g.gelu(h);

        let hw = cx.base("head.weight".into(), &self.head.weight);
        let hb = cx.base("head.bias".into(), &self.head.bias);
        let logits = quantized_head(&mut cx.g, h, hw, hb)?;

        let logits = upsample_logits(&mut cx.g, logits, batch, grid, res, classes)?;
        Ok(Forward {
            graph: cx.g,
            logits,
            features: h,
            params: cx.params,
            calibrations: cx.calibrations,
        })
    }

    /// Stores calibrations produced by a forward; keys calibrated meanwhile are kept.
    pub fn apply_calibrations(&mut self, calibrations: &[(QuantKey, QuantizerParams)]) {
        for (key, q) in calibrations {
            if let Some(slot) = self.quant.get_mut(key) {
                if !slot.initialized {
                    *slot = q.clone();
                }
            }
        }
    }

    /// Visits every trainable parameter as a flat slice. Weight zero-points are
    /// fixed and not visited.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut [f32])) {
        let mut base = |name: &str, t: &mut Tensor| f(name, ParamGroup::Base, t.data_mut());
        visit_base(self, &mut |name, t| base(name, t));
        if let Some(banks) = &mut self.lora {
            for (id, bank) in banks.iter_mut() {
                for (i, m) in bank.modules.iter_mut().enumerate() {
                    f(&format!("lora.{id}.m{i}.a"), ParamGroup::Lora, m.a.data_mut());
                    f(&format!("lora.{id}.m{i}.b"), ParamGroup::Lora, m.b.data_mut());
                }
            }
        }
        for (key, q) in self.quant.iter_mut() {
            let name = key.name();
            f(&format!("{name}.delta"), ParamGroup::Quant, std::slice::from_mut(&mut q.delta));
            if q.zero_point_trainable() {
                f(&format!("{name}.zero"), ParamGroup::Quant, std::slice::from_mut(&mut q.zero_point));
            }
        }
    }

    /// Restores quantizer invariants after an update.
    pub fn clamp_quantizers(&mut self) {
        for (_, q) in self.quant.iter_mut() {
            q.clamp_in_place();
        }
    }

    /// Complete numeric state as named tensors, for checkpoints. Quantizers
    /// are stored as `[Δ, z, initialized]`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut model = self.clone();
        visit_base(&mut model, &mut |name, t| out.push((name.to_string(), t.clone())));
        if let Some(banks) = &self.lora {
            for (id, bank) in banks {
                for (i, m) in bank.modules.iter().enumerate() {
                    out.push((format!("lora.{id}.m{i}.a"), m.a.clone()));
                    out.push((format!("lora.{id}.m{i}.b"), m.b.clone()));
                }
            }
        }
        for (key, q) in self.quant.iter() {
            let init = if q.initialized { 1.0 } else { 0.0 };
            out.push((key.name(), Tensor::new(vec![3], vec![q.delta, q.zero_point, init]).expect("3 values")));
        }
        out
    }

    /// Inverse of [`ElasticViT::state`]; names and shapes must match exactly.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected: BTreeSet<String> = self.state().into_iter().map(|(n, _)| n).collect();
        let given: BTreeSet<String> = state.keys().cloned().collect();
        if let Some(missing) = expected.difference(&given).next() {
            return Err(Error::config(format!("state is missing '{missing}'")));
        }
        if let Some(extra) = given.difference(&expected).next() {
            return Err(Error::config(format!("state has unexpected '{extra}'")));
        }
        let mut err = None;
        let mut put = |name: &str, t: &mut Tensor| {
            let src = &state[name];
            if src.shape() != t.shape() {
                err.get_or_insert_with(|| {
                    Error::shape(format!("'{name}' has shape {:?}, expected {:?}", src.shape(), t.shape()))
                });
            } else {
                *t = src.clone();
            }
        };
        visit_base(self, &mut |name, t| put(name, t));
        if let Some(banks) = &mut self.lora {
            for (id, bank) in banks.iter_mut() {
                for (i, m) in bank.modules.iter_mut().enumerate() {
                    put(&format!("lora.{id}.m{i}.a"), &mut m.a);
                    put(&format!("lora.{id}.m{i}.b"), &mut m.b);
                }
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        for (key, q) in self.quant.iter_mut() {
            let v = state[&key.name()].data();
            if v.len() != 3 {
                return Err(Error::shape(format!("quantizer '{}' needs 3 values", key.name())));
            }
            q.delta = v[0];
            q.zero_point = v[1];
            q.initialized = v[2] != 0.0;
        }
        Ok(())
    }

    /// SHA-256 over all base tensors (names and raw bits).
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut model = self.clone();
        visit_base(&mut model, &mut |name, t| {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

fn visit_base(m: &mut ElasticViT, f: &mut dyn FnMut(&str, &mut Tensor)) {
    let linear = |id: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut Tensor)| {
        f(&format!("{id}.weight"), &mut l.weight);
        f(&format!("{id}.bias"), &mut l.bias);
    };
    let norm = |id: &str, n: &mut Norm, f: &mut dyn FnMut(&str, &mut Tensor)| {
        f(&format!("{id}.gamma"), &mut n.gamma);
        f(&format!("{id}.beta"), &mut n.beta);
    };
    linear("embed", &mut m.patch_embed, f);
    f("pos_embed", &mut m.pos_embed);
    for (s, stage) in m.stages.iter_mut().enumerate() {
        for (l, b) in stage.iter_mut().enumerate() {
            let id = block_id(s, l);
            norm(&format!("{id}.ln1"), &mut b.ln1, f);
            linear(&format!("{id}.qkv"), &mut b.qkv, f);
            linear(&format!("{id}.proj"), &mut b.proj, f);
            norm(&format!("{id}.ln2"), &mut b.ln2, f);
            linear(&format!("{id}.fc1"), &mut b.fc1, f);
            linear(&format!("{id}.fc2"), &mut b.fc2, f);
        }
    }
    norm("norm", &mut m.norm, f);
    linear("neck", &mut m.neck, f);
    linear("head", &mut m.head, f);
}

/// Bilinearly upsamples `[batch·grid², classes]` token logits to
/// `[batch·res², classes]` pixel logits.
pub(crate) fn upsample_logits(
    g: &mut Graph,
    logits: Var,
    batch: usize,
    grid: usize,
    res: usize,
    classes: usize,
) -> Result<Var> {
    let t = g.reshape(logits, &[batch, grid, grid, classes])?;
    let t = g.permute(t, &[1, 2, 0, 3])?;
    let t = g.reshape(t, &[grid, grid, batch * classes])?;
    let t = g.bilinear_resize(t, res, res)?;
    let t = g.reshape(t, &[res, res, batch, classes])?;
    let t = g.permute(t, &[2, 0, 1, 3])?;
    g.reshape(t, &[batch * res * res, classes])
}
