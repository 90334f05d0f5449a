//! BitOPs accounting: multiply-accumulates times weight bits times activation bits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{BitWidth, LayerBits};
use crate::supernet::{block_id, validate_config, SearchSpace, SubnetConfig, HEAD_BITS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear { d_in: u64, d_out: u64 },
    /// Score and value products of multi-head attention.
    Attention { heads: u64, head_dim: u64 },
    PatchEmbed { patch: u64, channels: u64, dim: u64 },
}

/// Multiply-accumulate count of one layer over `tokens` tokens.
pub fn macs(kind: LayerKind, tokens: u64) -> u64 {
    match kind {
        LayerKind::Linear { d_in, d_out } => tokens * d_in * d_out,
        LayerKind::Attention { heads, head_dim } => 2 * heads * tokens * tokens * head_dim,
        LayerKind::PatchEmbed { patch, channels, dim } => tokens * patch * patch * channels * dim,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub macs: u64,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub bitops: u64,
}

impl LayerCost {
    pub fn new(layer: impl Into<String>, macs: u64, weight_bits: u32, act_bits: u32) -> Self {
        LayerCost {
            layer: layer.into(),
            macs,
            weight_bits,
            act_bits,
            bitops: macs * weight_bits as u64 * act_bits as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitOpsReport {
    pub records: Vec<LayerCost>,
    pub backbone: u64,
    pub head: u64,
    pub total: u64,
}

impl BitOpsReport {
    fn from_records(records: Vec<LayerCost>) -> Self {
        let head = records.iter().filter(|r| r.layer == "head").map(|r| r.bitops).sum();
        let total: u64 = records.iter().map(|r| r.bitops).sum();
        BitOpsReport {
            records,
            backbone: total - head,
            head,
            total,
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.records.iter().map(|r| r.macs).sum()
    }

    /// Writes `layer,macs,weight_bits,act_bits,bitops` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Per-layer BitOPs of one subnet for a single image. The 32-bit bypass
/// counts as 32 bits; attention products take unquantized operands (32×32);
/// the head runs at 8×8.
pub fn bitops(cfg: &SubnetConfig, space: &SearchSpace) -> Result<BitOpsReport> {
    validate_config(space, cfg)?;
    let tokens = space.tokens(cfg.resolution) as u64;
    let d = space.embed_dim as u64;
    let full = BitWidth::Full.bits();
    let rec = |id: String, kind, bits: LayerBits| LayerCost::new(id, macs(kind, tokens), bits.weight.bits(), bits.act.bits());
    let mut records = vec![rec(
        "embed".into(),
        LayerKind::PatchEmbed {
            patch: space.patch_size as u64,
            channels: space.in_channels as u64,
            dim: d,
        },
        cfg.embed_bits,
    )];
    for (s, l, ratio, bits) in cfg.active_layers() {
        let id = block_id(s, l);
        let hidden = space.hidden_dim(ratio) as u64;
        records.push(rec(format!("{id}.qkv"), LayerKind::Linear { d_in: d, d_out: 3 * d }, bits));
        records.push(LayerCost::new(
            format!("{id}.attn"),
            macs(
                LayerKind::Attention {
                    heads: space.num_heads as u64,
                    head_dim: space.head_dim() as u64,
                },
                tokens,
            ),
            full,
            full,
        ));
        records.push(rec(format!("{id}.proj"), LayerKind::Linear { d_in: d, d_out: d }, bits));
        records.push(rec(format!("{id}.fc1"), LayerKind::Linear { d_in: d, d_out: hidden }, bits));
        records.push(rec(format!("{id}.fc2"), LayerKind::Linear { d_in: hidden, d_out: d }, bits));
    }
    records.push(rec("neck".into(), LayerKind::Linear { d_in: d, d_out: d }, cfg.neck_bits));
    records.push(rec(
        "head".into(),
        LayerKind::Linear {
            d_in: d,
            d_out: space.num_classes as u64,
        },
        LayerBits::uniform(HEAD_BITS),
    ));
    Ok(BitOpsReport::from_records(records))
}

/// Total BitOPs of the largest subnet of `space`.
pub fn max_bitops(space: &SearchSpace) -> Result<u64> {
    Ok(bitops(&space.max_config(), space)?.total)
}
