use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::Container;
use super::eval::{Metrics, MetricAccumulator};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lora::{self, LoraModule};
use crate::quantize::{dequant, quant_code, BitWidth, LayerBits, QuantKey, QuantizerParams, TensorKind};
use crate::supernet::model::{affine_norm, attention, quantized_head, upsample_logits};
use crate::supernet::{block_id, validate_config, ElasticViT, SearchSpace, Slice, SubnetConfig};
use crate::tensor::Tensor;

pub const EXPORT_KIND: &str = "subnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub delta: f32,
    pub zero_point: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub id: String,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub shape: Vec<usize>,
    /// Present for quantized weights, whose integer codes are stored.
    pub weight_quant: Option<QuantMeta>,
    pub act_quant: Option<QuantMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExportMeta {
    subnet: String,
    space: SearchSpace,
    layers: Vec<LayerMeta>,
}

/// Active linear layers of `cfg` in forward order, with their width slice.
fn active_linears(space: &SearchSpace, cfg: &SubnetConfig) -> Vec<(String, Slice, LayerBits)> {
    let mut out = vec![("embed".to_string(), Slice::Full, cfg.embed_bits)];
    for (s, l, ratio, bits) in cfg.active_layers() {
        let id = block_id(s, l);
        let h = space.hidden_dim(ratio);
        out.push((format!("{id}.qkv"), Slice::Full, bits));
        out.push((format!("{id}.proj"), Slice::Full, bits));
        out.push((format!("{id}.fc1"), Slice::Out(h), bits));
        out.push((format!("{id}.fc2"), Slice::In(h), bits));
    }
    out.push(("neck".to_string(), Slice::Full, cfg.neck_bits));
    out
}

fn sliced(t: &Tensor, slice: Slice, is_bias: bool) -> Result<Tensor> {
    match (slice, is_bias) {
        (Slice::Full, _) => Ok(t.clone()),
        (Slice::Out(n), false) => t.narrow(1, 0, n),
        (Slice::Out(n), true) => t.narrow(0, 0, n),
        (Slice::In(n), false) => t.narrow(0, 0, n),
        (Slice::In(_), true) => Ok(t.clone()),
    }
}

fn quantizer<'m>(model: &'m ElasticViT, id: &str, kind: TensorKind, bits: BitWidth) -> Result<Option<&'m QuantizerParams>> {
    if bits.is_full() {
        return Ok(None);
    }
    let key = QuantKey::new(id, kind, bits);
    match model.quant.get(&key) {
        Some(q) if q.initialized => Ok(Some(q)),
        Some(_) => Err(Error::config(format!(
            "quantizer {} is not calibrated; calibrate the subnet before exporting",
            key.name()
        ))),
        None => Err(Error::config(format!("no quantizer {}", key.name()))),
    }
}

/// Writes subnet `cfg` of `model` with adapters merged: integer weight codes
/// with their Δ and zero-point for quantized layers, raw reals for 32-bit
/// layers, plus activation quantizers, norms, the interpolated positional
/// grid and the head. Every quantizer on the path must be calibrated.
pub fn export_subnet(model: &ElasticViT, cfg: &SubnetConfig, path: &Path) -> Result<()> {
    validate_config(&model.space, cfg)?;
    let mut layers = Vec::new();
    let mut c = Container::new(EXPORT_KIND, serde_json::Value::Null);
    for (id, slice, bits) in active_linears(&model.space, cfg) {
        let lin = model.linear(&id).expect("active layer exists");
        let w0 = sliced(&lin.weight, slice, false)?;
        let wq = quantizer(model, &id, TensorKind::Weight, bits.weight)?;
        let aq = quantizer(model, &id, TensorKind::Activation, bits.act)?;

        let modules: Vec<LoraModule> = match model.lora.as_ref().and_then(|l| l.get(&id)) {
            Some(bank) => bank
                .active_modules(bits)?
                .into_iter()
                .map(|m| -> Result<LoraModule> {
                    let mut m = m.clone();
                    match slice {
                        Slice::Full => {}
                        Slice::Out(n) => m.b = m.b.narrow(0, 0, n)?,
                        Slice::In(n) => m.a = m.a.narrow(1, 0, n)?,
                    }
                    Ok(m)
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let refs: Vec<&LoraModule> = modules.iter().collect();
        // W0 + ΔW before quantization
        let target = lora::merge(&w0, &refs, None)?;
        match wq {
            Some(q) => {
                let range = q.range().expect("quantized");
                let codes = target
                    .data()
                    .iter()
                    .map(|&x| quant_code(x, q.delta as f64, q.zero_point as f64, range) as i32)
                    .collect();
                c.put_i32(format!("{id}.codes"), target.shape().to_vec(), codes);
            }
            None => c.put_f32(format!("{id}.weight"), target.clone()),
        }
        c.put_f32(format!("{id}.bias"), sliced(&lin.bias, slice, true)?);
        layers.push(LayerMeta {
            id,
            weight_bits: bits.weight.bits(),
            act_bits: bits.act.bits(),
            shape: target.shape().to_vec(),
            weight_quant: wq.map(|q| QuantMeta {
                delta: q.delta,
                zero_point: q.zero_point,
            }),
            act_quant: aq.map(|q| QuantMeta {
                delta: q.delta,
                zero_point: q.zero_point,
            }),
        });
    }
    for (s, l, _, _) in cfg.active_layers() {
        let id = block_id(s, l);
        let b = &model.stages[s][l];
        for (name, n) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
            c.put_f32(format!("{id}.{name}.gamma"), n.gamma.clone());
            c.put_f32(format!("{id}.{name}.beta"), n.beta.clone());
        }
    }
    c.put_f32("norm.gamma", model.norm.gamma.clone());
    c.put_f32("norm.beta", model.norm.beta.clone());
    c.put_f32("pos_embed", model.interpolate_pos_embed(cfg.resolution)?);
    c.put_f32("head.weight", model.head.weight.clone());
    c.put_f32("head.bias", model.head.bias.clone());
    c.meta = serde_json::to_value(ExportMeta {
        subnet: cfg.to_string(),
        space: model.space.clone(),
        layers,
    })
    .expect("meta serializes");
    c.write(path)
}

/// One merged layer of an exported subnet.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedLinear {
    pub meta: LayerMeta,
    /// Integer codes in `[0, 2^b − 1]` for quantized weights.
    pub codes: Option<Vec<i32>>,
    /// Dequantized (or raw 32-bit) weight.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A reloaded subnet artifact that runs without the supernet.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedSubnet {
    pub config: SubnetConfig,
    pub space: SearchSpace,
    pub linears: BTreeMap<String, ExportedLinear>,
    arrays: Container,
}

impl ExportedSubnet {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read_kind(path, EXPORT_KIND)?;
        let meta: ExportMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("export metadata: {e}"),
        })?;
        let config: SubnetConfig = meta.subnet.parse()?;
        let mut linears = BTreeMap::new();
        for m in meta.layers {
            let (codes, weight) = match &m.weight_quant {
                Some(q) => {
                    let bits = BitWidth::try_from(m.weight_bits)?;
                    let p = bits.range().expect("quantized").p as i32;
                    let codes = c.i32(&format!("{}.codes", m.id))?.to_vec();
                    if let Some(bad) = codes.iter().find(|&&k| !(0..=p).contains(&k)) {
                        return Err(Error::Format {
                            path: path.to_path_buf(),
                            reason: format!("code {bad} of layer {} outside [0, {p}]", m.id),
                        });
                    }
                    let w = codes
                        .iter()
                        .map(|&k| dequant(k as f64, q.delta as f64, q.zero_point as f64))
                        .collect();
                    (Some(codes), Tensor::new(m.shape.clone(), w)?)
                }
                None => (None, c.f32(&format!("{}.weight", m.id))?.clone()),
            };
            let bias = c.f32(&format!("{}.bias", m.id))?.clone();
            linears.insert(
                m.id.clone(),
                ExportedLinear {
                    meta: m,
                    codes,
                    weight,
                    bias,
                },
            );
        }
        Ok(ExportedSubnet {
            config,
            space: meta.space,
            linears,
            arrays: c,
        })
    }

    /// Pixel logits `[batch·res·res, classes]` for `[batch, res, res, channels]` images.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let space = &self.space;
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.resolution || s[2] != cfg.resolution || s[3] != space.in_channels {
            return Err(Error::shape(format!("images {s:?} do not match resolution {}", cfg.resolution)));
        }
        let (batch, res, d) = (s[0], cfg.resolution, space.embed_dim);
        let grid = space.grid(res);
        let tokens = grid * grid;
        let mut g = Graph::new();
        let konst = |g: &mut Graph, name: &str| -> Result<_> { Ok(g.constant(self.arrays.f32(name)?.clone())) };
        let linear = |g: &mut Graph, id: &str, x| -> Result<_> {
            let l = &self.linears[id];
            let x = match &l.meta.act_quant {
                Some(q) => {
                    let range = BitWidth::try_from(l.meta.act_bits)?.range().expect("quantized");
                    let dv = g.constant(Tensor::scalar(q.delta));
                    let zv = g.constant(Tensor::scalar(q.zero_point));
                    g.fake_quantize(x, dv, zv, range)?
                }
                None => x,
            };
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };

        let img = g.constant(images.clone());
        let patches = g.patchify(img, space.patch_size)?;
        let x = linear(&mut g, "embed", patches)?;
        let pos = konst(&mut g, "pos_embed")?;
        let pos = g.reshape(pos, &[tokens, d])?;
        let x = g.reshape(x, &[batch, tokens, d])?;
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[batch * tokens, d])?;
        for (si, li, _, _) in cfg.active_layers() {
            let id = block_id(si, li);
            let (gm, bt) = (konst(&mut g, &format!("{id}.ln1.gamma"))?, konst(&mut g, &format!("{id}.ln1.beta"))?);
            let h = affine_norm(&mut g, x, gm, bt)?;
            let qkv = linear(&mut g, &format!("{id}.qkv"), h)?;
            let att = attention(&mut g, qkv, batch, tokens, space.num_heads, space.head_dim())?;
            let att = linear(&mut g, &format!("{id}.proj"), att)?;
            x = g.add(x, att)?;
            let (gm, bt) = (konst(&mut g, &format!("{id}.ln2.gamma"))?, konst(&mut g, &format!("{id}.ln2.beta"))?);
            let h = affine_norm(&mut g, x, gm, bt)?;
            let h = linear(&mut g, &format!("{id}.fc1"), h)?;
            let h = g.gelu(h);
            let h = linear(&mut g, &format!("{id}.fc2"), h)?;
            x = g.add(x, h)?;
        }
        let (gm, bt) = (konst(&mut g, "norm.gamma")?, konst(&mut g, "norm.beta")?);
        let h = affine_norm(&mut g, x, gm, bt)?;
        let h = linear(&mut g, "neck", h)?;
        let h = g.gelu(h);
        let (hw, hb) = (konst(&mut g, "head.weight")?, konst(&mut g, "head.bias")?);
        let logits = quantized_head(&mut g, h, hw, hb)?;
        let logits = upsample_logits(&mut g, logits, batch, grid, res, space.num_classes)?;
        Ok(g.value(logits).clone())
    }

    /// Same metrics as [`super::evaluate`], computed from the artifact alone.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::EmptyData("validation set is empty".into()));
        }
        let mut acc = MetricAccumulator::new(self.space.num_classes);
        for batch in data.batches(batch_size) {
            let (images, labels) = batch?;
            acc.add(&self.forward(&images)?, &labels)?;
        }
        acc.finish()
    }
}
