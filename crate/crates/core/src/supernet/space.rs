use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{BitWidth, LayerBits};

/// Elastic operators of the search space plus the fixed backbone dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub resolutions: Vec<usize>,
    /// Depth options, one list per stage.
    pub depths: Vec<Vec<usize>>,
    pub mlp_ratios: Vec<f32>,
    pub weight_bits: Vec<BitWidth>,
    pub act_bits: Vec<BitWidth>,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for SearchSpace {
    /// Desk-scale space: 2 stages of up to 3 layers, 32-wide embedding.
    fn default() -> Self {
        SearchSpace {
            resolutions: vec![32, 48, 64],
            depths: vec![vec![1, 2, 3], vec![1, 2, 3]],
            mlp_ratios: vec![2.0, 4.0],
            weight_bits: BitWidth::ALL.to_vec(),
            act_bits: BitWidth::ALL.to_vec(),
            embed_dim: 32,
            patch_size: 8,
            num_heads: 4,
            in_channels: 1,
            num_classes: 3,
        }
    }
}

/// One elastic operator, used for single-operator ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Resolution,
    Depth,
    Mlp,
    Bits,
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resolution" => Operator::Resolution,
            "depth" => Operator::Depth,
            "mlp" => Operator::Mlp,
            "bits" => Operator::Bits,
            other => return Err(Error::config(format!("unknown operator '{other}'"))),
        })
    }
}

fn max_of<T: PartialOrd + Copy>(v: &[T]) -> T {
    v.iter()
        .copied()
        .fold(v[0], |m, x| if x > m { x } else { m })
}

fn min_of<T: PartialOrd + Copy>(v: &[T]) -> T {
    v.iter()
        .copied()
        .fold(v[0], |m, x| if x < m { x } else { m })
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.resolutions.is_empty()
            || self.depths.is_empty()
            || self.depths.iter().any(Vec::is_empty)
            || self.mlp_ratios.is_empty()
            || self.weight_bits.is_empty()
            || self.act_bits.is_empty()
        {
            return bad("every option list of the search space must be non-empty".into());
        }
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("patch size, embed dim and head count must be positive".into());
        }
        if let Some(r) = self.resolutions.iter().find(|&&r| r == 0 || r % self.patch_size != 0) {
            return bad(format!("resolution {r} is not a positive multiple of patch size {}", self.patch_size));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depths.iter().flatten().any(|&d| d == 0) {
            return bad("stage depth options must be at least 1".into());
        }
        if self.mlp_ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad("mlp ratios must be positive".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn max_depth(&self, stage: usize) -> usize {
        max_of(&self.depths[stage])
    }

    pub fn max_resolution(&self) -> usize {
        max_of(&self.resolutions)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Hidden units for an MLP ratio: the leading `⌈ratio·dim⌉` of the full layer.
    pub fn hidden_dim(&self, ratio: f32) -> usize {
        (ratio as f64 * self.embed_dim as f64).ceil() as usize
    }

    pub fn max_hidden(&self) -> usize {
        self.hidden_dim(max_of(&self.mlp_ratios))
    }

    pub fn grid(&self, resolution: usize) -> usize {
        resolution / self.patch_size
    }

    pub fn tokens(&self, resolution: usize) -> usize {
        self.grid(resolution).pow(2)
    }

    /// Sub-space with resolutions capped at `max_res`.
    pub fn with_max_resolution(&self, max_res: usize) -> Result<SearchSpace> {
        let resolutions: Vec<usize> = self.resolutions.iter().copied().filter(|&r| r <= max_res).collect();
        if resolutions.is_empty() {
            return Err(Error::config(format!("no resolution at or below {max_res}")));
        }
        Ok(SearchSpace {
            resolutions,
            ..self.clone()
        })
    }

    /// Sub-space where only `op` stays elastic and every other operator is
    /// pinned to its largest option.
    pub fn single_operator(&self, op: Operator) -> SearchSpace {
        let mut s = self.clone();
        if op != Operator::Resolution {
            s.resolutions = vec![self.max_resolution()];
        }
        if op != Operator::Depth {
            s.depths = self.depths.iter().map(|d| vec![max_of(d)]).collect();
        }
        if op != Operator::Mlp {
            s.mlp_ratios = vec![max_of(&self.mlp_ratios)];
        }
        if op != Operator::Bits {
            s.weight_bits = vec![max_of(&self.weight_bits)];
            s.act_bits = vec![max_of(&self.act_bits)];
        }
        s
    }

    fn uniform_config(&self, pick_res: usize, depth: impl Fn(&[usize]) -> usize, ratio: f32, bits: LayerBits) -> SubnetConfig {
        let depths: Vec<usize> = self.depths.iter().map(|d| depth(d)).collect();
        SubnetConfig {
            resolution: pick_res,
            mlp_ratios: depths.iter().map(|&d| vec![ratio; d]).collect(),
            bits: depths.iter().map(|&d| vec![bits; d]).collect(),
            depths,
            embed_bits: bits,
            neck_bits: bits,
        }
    }

    /// Every operator at its largest option.
    pub fn max_config(&self) -> SubnetConfig {
        self.uniform_config(
            self.max_resolution(),
            max_of,
            max_of(&self.mlp_ratios),
            LayerBits::new(max_of(&self.weight_bits), max_of(&self.act_bits)),
        )
    }

    /// Every operator at its smallest option.
    pub fn min_config(&self) -> SubnetConfig {
        self.uniform_config(
            min_of(&self.resolutions),
            min_of,
            min_of(&self.mlp_ratios),
            LayerBits::new(min_of(&self.weight_bits), min_of(&self.act_bits)),
        )
    }

    /// Largest architecture with every quantized layer at the same bits.
    pub fn max_arch_with_bits(&self, bits: LayerBits) -> SubnetConfig {
        self.uniform_config(self.max_resolution(), max_of, max_of(&self.mlp_ratios), bits)
    }

    pub fn sample_layer_bits<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerBits {
        LayerBits::new(
            *self.weight_bits.choose(rng).expect("non-empty"),
            *self.act_bits.choose(rng).expect("non-empty"),
        )
    }

    pub fn sample_mlp<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        *self.mlp_ratios.choose(rng).expect("non-empty")
    }

    /// Number of distinct configurations (saturating).
    pub fn cardinality(&self) -> u128 {
        let per_layer = (self.mlp_ratios.len() * self.weight_bits.len() * self.act_bits.len()) as u128;
        let bits = (self.weight_bits.len() * self.act_bits.len()) as u128;
        let mut total = self.resolutions.len() as u128 * bits * bits;
        for opts in &self.depths {
            let stage: u128 = opts.iter().map(|&d| per_layer.saturating_pow(d as u32)).sum();
            total = total.saturating_mul(stage);
        }
        total
    }
}

/// One point of the search space. Per-layer lists cover active layers only,
/// stage by stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub resolution: usize,
    pub depths: Vec<usize>,
    pub mlp_ratios: Vec<Vec<f32>>,
    pub bits: Vec<Vec<LayerBits>>,
    pub embed_bits: LayerBits,
    pub neck_bits: LayerBits,
}

/// Draws each operator independently and uniformly from its options.
pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> SubnetConfig {
    let resolution = *space.resolutions.choose(rng).expect("non-empty");
    let mut depths = Vec::with_capacity(space.num_stages());
    let mut mlp_ratios = Vec::new();
    let mut bits = Vec::new();
    for opts in &space.depths {
        let d = *opts.choose(rng).expect("non-empty");
        depths.push(d);
        let mut ratios = Vec::with_capacity(d);
        let mut stage_bits = Vec::with_capacity(d);
        for _ in 0..d {
            ratios.push(space.sample_mlp(rng));
            stage_bits.push(space.sample_layer_bits(rng));
        }
        mlp_ratios.push(ratios);
        bits.push(stage_bits);
    }
    let embed_bits = space.sample_layer_bits(rng);
    let neck_bits = space.sample_layer_bits(rng);
    SubnetConfig {
        resolution,
        depths,
        mlp_ratios,
        bits,
        embed_bits,
        neck_bits,
    }
}

/// Accepts a config iff every field is an allowed option and per-layer lists
/// match the stage depths.
pub fn validate_config(space: &SearchSpace, cfg: &SubnetConfig) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidSubnet(m));
    if !space.resolutions.contains(&cfg.resolution) {
        return bad(format!("resolution {} not in {:?}", cfg.resolution, space.resolutions));
    }
    if cfg.depths.len() != space.num_stages() {
        return bad(format!(
            "depth lists {} stages but the space has {}",
            cfg.depths.len(),
            space.num_stages()
        ));
    }
    if cfg.mlp_ratios.len() != space.num_stages() || cfg.bits.len() != space.num_stages() {
        return bad("mlp/bits lists must have one entry per stage".into());
    }
    let check_bits = |what: &str, b: LayerBits| -> Result<()> {
        if !space.weight_bits.contains(&b.weight) {
            return bad(format!("{what}: weight bits {} not in the space", b.weight));
        }
        if !space.act_bits.contains(&b.act) {
            return bad(format!("{what}: activation bits {} not in the space", b.act));
        }
        Ok(())
    };
    for (s, &d) in cfg.depths.iter().enumerate() {
        if !space.depths[s].contains(&d) {
            return bad(format!("stage {s} depth {d} not in {:?}", space.depths[s]));
        }
        if cfg.bits[s].len() > d {
            return bad(format!(
                "stage {s} has depth {d} but assigns bits to layer index {} (dropped layers carry no bits)",
                cfg.bits[s].len() - 1
            ));
        }
        if cfg.mlp_ratios[s].len() > d {
            return bad(format!(
                "stage {s} has depth {d} but assigns an mlp ratio to layer index {}",
                cfg.mlp_ratios[s].len() - 1
            ));
        }
        if cfg.bits[s].len() < d || cfg.mlp_ratios[s].len() < d {
            return bad(format!("stage {s} is missing per-layer settings for depth {d}"));
        }
        for (l, &r) in cfg.mlp_ratios[s].iter().enumerate() {
            if !space.mlp_ratios.contains(&r) {
                return bad(format!("stage {s} layer {l}: mlp ratio {r} not in {:?}", space.mlp_ratios));
            }
        }
        for (l, &b) in cfg.bits[s].iter().enumerate() {
            check_bits(&format!("stage {s} layer {l}"), b)?;
        }
    }
    check_bits("embed", cfg.embed_bits)?;
    check_bits("neck", cfg.neck_bits)?;
    Ok(())
}

impl SubnetConfig {
    pub fn active_layers(&self) -> impl Iterator<Item = (usize, usize, f32, LayerBits)> + '_ {
        self.depths.iter().enumerate().flat_map(move |(s, &d)| {
            (0..d).map(move |l| (s, l, self.mlp_ratios[s][l], self.bits[s][l]))
        })
    }
}

/// Compact form: `res=64;d=3,2;mlp=4,4,2,2,4;bits=w8a8,...;embed=w8a8;neck=w8a8`.
impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |items: Vec<String>| items.join(",");
        write!(
            f,
            "res={};d={};mlp={};bits={};embed={};neck={}",
            self.resolution,
            join(self.depths.iter().map(|d| d.to_string()).collect()),
            join(self.mlp_ratios.iter().flatten().map(|r| r.to_string()).collect()),
            join(self.bits.iter().flatten().map(|b| b.to_string()).collect()),
            self.embed_bits,
            self.neck_bits
        )
    }
}

impl FromStr for SubnetConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidSubnet(format!("{m} in '{s}'"));
        let mut fields = std::collections::BTreeMap::new();
        for part in s.trim().split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("field without '='"))?;
            if fields.insert(k.trim(), v.trim()).is_some() {
                return Err(bad(&format!("duplicate field '{k}'")));
            }
        }
        let take = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing '{k}'")));
        if let Some(unknown) = fields.keys().find(|k| !["res", "d", "mlp", "bits", "embed", "neck"].contains(k)) {
            return Err(bad(&format!("unknown field '{unknown}'")));
        }
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
        };
        let resolution = take("res")?.parse().map_err(|_| bad("bad resolution"))?;
        let depths: Vec<usize> = list(take("d")?)
            .iter()
            .map(|d| d.parse().map_err(|_| bad("bad depth")))
            .collect::<Result<_>>()?;
        let flat_mlp: Vec<f32> = list(take("mlp")?)
            .iter()
            .map(|r| r.parse().map_err(|_| bad("bad mlp ratio")))
            .collect::<Result<_>>()?;
        let flat_bits: Vec<LayerBits> = list(take("bits")?)
            .iter()
            .map(|b| b.parse())
            .collect::<Result<_>>()?;
        let total: usize = depths.iter().sum();
        if flat_mlp.len() != total || flat_bits.len() != total {
            return Err(bad(&format!(
                "{} active layers but {} mlp ratios and {} bit pairs",
                total,
                flat_mlp.len(),
                flat_bits.len()
            )));
        }
        let mut mlp_ratios = Vec::new();
        let mut bits = Vec::new();
        let mut at = 0;
        for &d in &depths {
            mlp_ratios.push(flat_mlp[at..at + d].to_vec());
            bits.push(flat_bits[at..at + d].to_vec());
            at += d;
        }
        Ok(SubnetConfig {
            resolution,
            depths,
            mlp_ratios,
            bits,
            embed_bits: take("embed")?.parse()?,
            neck_bits: take("neck")?.parse()?,
        })
    }
}
