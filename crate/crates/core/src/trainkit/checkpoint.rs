use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::Container;
use super::optim::{AdamW, Moments};
use super::train::{RngState, Trainer, LORA_SEED_OFFSET};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{ElasticViT, LoraSettings};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Hex SHA-256 of an experiment config's text.
pub fn config_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config_text: String,
    config_digest: String,
    step: usize,
    rng: RngState,
    lora_attached: bool,
    frozen: bool,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_digest: String,
    pub step: usize,
    pub rng: RngState,
    pub lora_attached: bool,
    pub frozen: bool,
    pub model_state: BTreeMap<String, Tensor>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    /// Captures `trainer`, recording the config text it was built from.
    pub fn capture(trainer: &Trainer, config_text: &str) -> Self {
        Checkpoint {
            config_text: config_text.to_string(),
            config_digest: config_digest(config_text),
            step: trainer.step,
            rng: RngState::capture(&trainer.rng),
            lora_attached: trainer.model.lora.is_some(),
            frozen: trainer.model.frozen,
            model_state: trainer.model.state().into_iter().collect(),
            optimizer: trainer.optimizer.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            config_text: self.config_text.clone(),
            config_digest: self.config_digest.clone(),
            step: self.step,
            rng: self.rng.clone(),
            lora_attached: self.lora_attached,
            frozen: self.frozen,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for (name, t) in &self.model_state {
            c.put_f32(format!("model/{name}"), t.clone());
        }
        for (name, m) in &self.optimizer.state {
            let n = m.m.len();
            c.put_f32(format!("opt/{name}/m"), Tensor::new(vec![n], m.m.clone()).expect("len n"));
            c.put_f32(format!("opt/{name}/v"), Tensor::new(vec![n], m.v.clone()).expect("len n"));
            c.put_i32(format!("opt/{name}/t"), vec![1], vec![m.t as i32]);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Reads a checkpoint, rejecting it if the stored digest does not match
    /// the stored config text.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read_kind(path, CHECKPOINT_KIND)?;
        let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("checkpoint metadata: {e}"),
        })?;
        let actual = config_digest(&meta.config_text);
        if actual != meta.config_digest {
            return Err(Error::DigestMismatch {
                stored: meta.config_digest,
                expected: actual,
            });
        }
        let mut model_state = BTreeMap::new();
        let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
        for name in c.arrays.keys() {
            if let Some(p) = name.strip_prefix("model/") {
                model_state.insert(p.to_string(), c.f32(name)?.clone());
            } else if let Some(rest) = name.strip_prefix("opt/") {
                let Some(p) = rest.strip_suffix("/m") else {
                    continue;
                };
                moments.insert(
                    p.to_string(),
                    Moments {
                        m: c.f32(name)?.data().to_vec(),
                        v: c.f32(&format!("opt/{p}/v"))?.data().to_vec(),
                        t: c.i32(&format!("opt/{p}/t"))?[0] as u32,
                    },
                );
            }
        }
        Ok(Checkpoint {
            config_text: meta.config_text,
            config_digest: meta.config_digest,
            step: meta.step,
            rng: meta.rng,
            lora_attached: meta.lora_attached,
            frozen: meta.frozen,
            model_state,
            optimizer: AdamW {
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                weight_decay: meta.weight_decay,
                state: moments,
            },
        })
    }

    /// Fails unless this checkpoint was produced from `config_text`.
    pub fn verify_config(&self, config_text: &str) -> Result<()> {
        let expected = config_digest(config_text);
        if expected != self.config_digest {
            return Err(Error::DigestMismatch {
                stored: self.config_digest.clone(),
                expected,
            });
        }
        Ok(())
    }

    /// Loads the stored state into a freshly constructed model of the same
    /// configuration.
    pub fn restore_model(&self, mut model: ElasticViT, lora: &LoraSettings, seed: u64) -> Result<ElasticViT> {
        if self.lora_attached && model.lora.is_none() {
            model.attach_lora(lora, seed.wrapping_add(LORA_SEED_OFFSET))?;
        }
        model.frozen = self.frozen;
        model.load_state(&self.model_state)?;
        Ok(model)
    }

    /// Rebuilds a trainer that continues exactly where this checkpoint left off.
    pub fn resume(
        &self,
        model: ElasticViT,
        schedule: super::TrainSchedule,
        lora: LoraSettings,
        data: BTreeMap<usize, Dataset>,
    ) -> Result<Trainer> {
        let model = self.restore_model(model, &lora, schedule.seed)?;
        let mut trainer = Trainer::new(model, schedule, lora, data)?;
        trainer.step = self.step;
        trainer.rng = self.rng.restore()?;
        trainer.optimizer = self.optimizer.clone();
        Ok(trainer)
    }
}
