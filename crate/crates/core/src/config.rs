//! Experiment configuration (TOML).
//!
//! Every block is optional and defaults to the desk-scale setup; unknown keys
//! are rejected. All randomness derives from the top-level `seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, Dataset, Task, SHAPES_SEG_CLASSES};
use crate::error::{Error, Result};
use crate::evolve::EvolutionHyper;
use crate::quantize::BitWidth;
use crate::supernet::{ElasticViT, LoraSettings, SearchSpace};
use crate::trainkit::TrainSchedule;

/// Elastic operator options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceBlock {
    pub resolutions: Vec<usize>,
    pub depths: Vec<Vec<usize>>,
    pub mlp_ratios: Vec<f32>,
    pub weight_bits: Vec<BitWidth>,
    pub act_bits: Vec<BitWidth>,
}

impl Default for SpaceBlock {
    fn default() -> Self {
        let s = SearchSpace::default();
        SpaceBlock {
            resolutions: s.resolutions,
            depths: s.depths,
            mlp_ratios: s.mlp_ratios,
            weight_bits: s.weight_bits,
            act_bits: s.act_bits,
        }
    }
}

/// Fixed backbone dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let s = SearchSpace::default();
        ModelBlock {
            embed_dim: s.embed_dim,
            patch_size: s.patch_size,
            num_heads: s.num_heads,
            in_channels: s.in_channels,
            num_classes: s.num_classes,
        }
    }
}

/// BitOPs budget: an absolute count or a percentage of the largest subnet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Absolute(u64),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, max_bitops: u64) -> u64 {
        match self {
            Budget::Absolute(v) => v,
            Budget::Fraction(f) => (max_bitops as f64 * f).floor() as u64,
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("bad budget '{s}', expected e.g. 25% or 1.5e9"));
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct.trim().parse().map_err(|_| bad())?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad());
            }
            return Ok(Budget::Fraction(v / 100.0));
        }
        if let Ok(v) = s.parse::<u64>() {
            return Ok(Budget::Absolute(v));
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(bad());
        }
        Ok(Budget::Absolute(v as u64))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Absolute(v) => write!(f, "{v}"),
            Budget::Fraction(v) => write!(f, "{}%", v * 100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBlock {
    /// Default budget when none is given on the command line.
    pub budget: String,
    /// Size of the fixed validation subset used as the search proxy.
    pub val_subset: usize,
    pub batch_size: usize,
    pub evolution: EvolutionHyper,
}

impl Default for SearchBlock {
    fn default() -> Self {
        SearchBlock {
            budget: "25%".into(),
            val_subset: 16,
            batch_size: 16,
            evolution: EvolutionHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub task: String,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            task: "shapes-seg".into(),
            train_size: 256,
            val_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateBlock {
    /// Random subnets evaluated after training.
    pub sweep: usize,
}

impl Default for AblateBlock {
    fn default() -> Self {
        AblateBlock { sweep: 20 }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub space: SpaceBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub lora: LoraSettings,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub search: SearchBlock,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub ablate: AblateBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output(),
            space: SpaceBlock::default(),
            model: ModelBlock::default(),
            lora: LoraSettings::default(),
            schedule: TrainSchedule::default(),
            search: SearchBlock::default(),
            data: DataBlock::default(),
            ablate: AblateBlock::default(),
        }
    }
}

// Stream ids separating the consumers of the experiment seed.
const TRAIN_DATA_OFFSET: u64 = 1;
const VAL_DATA_OFFSET: u64 = 2;
const SEARCH_STREAM: u64 = 3;
const SWEEP_STREAM: u64 = 4;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, returning it with its raw text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.space().validate()?;
        self.schedule().validate()?;
        self.search.evolution.validate()?;
        self.search.budget.parse::<Budget>()?;
        let Task::ShapesSeg = self.data.task.parse()?;
        if self.model.num_classes != SHAPES_SEG_CLASSES {
            return Err(Error::config(format!(
                "shapes-seg has {SHAPES_SEG_CLASSES} classes but the model declares {}",
                self.model.num_classes
            )));
        }
        if self.model.in_channels != 1 {
            return Err(Error::config("shapes-seg images have a single channel"));
        }
        if self.data.train_size == 0 || self.data.val_size == 0 || self.search.val_subset == 0 {
            return Err(Error::config("dataset sizes must be positive"));
        }
        if self.search.batch_size == 0 {
            return Err(Error::config("search batch size must be positive"));
        }
        Ok(())
    }

    pub fn space(&self) -> SearchSpace {
        SearchSpace {
            resolutions: self.space.resolutions.clone(),
            depths: self.space.depths.clone(),
            mlp_ratios: self.space.mlp_ratios.clone(),
            weight_bits: self.space.weight_bits.clone(),
            act_bits: self.space.act_bits.clone(),
            embed_dim: self.model.embed_dim,
            patch_size: self.model.patch_size,
            num_heads: self.model.num_heads,
            in_channels: self.model.in_channels,
            num_classes: self.model.num_classes,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    pub fn budget(&self) -> Result<Budget> {
        self.search.budget.parse()
    }

    pub fn build_model(&self) -> Result<ElasticViT> {
        ElasticViT::new(self.space(), self.seed)
    }

    fn datasets(&self, count: usize, offset: u64) -> Result<BTreeMap<usize, Dataset>> {
        self.space
            .resolutions
            .iter()
            .map(|&r| Ok((r, gen_synthetic(&self.data.task, count, r, self.seed.wrapping_add(offset))?)))
            .collect()
    }

    /// Training sets, one per resolution, sharing scene geometry.
    pub fn train_data(&self) -> Result<BTreeMap<usize, Dataset>> {
        self.datasets(self.data.train_size, TRAIN_DATA_OFFSET)
    }

    pub fn val_data(&self) -> Result<BTreeMap<usize, Dataset>> {
        self.datasets(self.data.val_size, VAL_DATA_OFFSET)
    }

    pub fn search_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SEARCH_STREAM);
        rng
    }

    pub fn sweep_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SWEEP_STREAM);
        rng
    }
}
