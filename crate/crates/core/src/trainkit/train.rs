use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{sample_uniform, ElasticViT, LoraSettings, SubnetConfig, Trainable};

/// Offset added to the run seed for adapter initialization.
pub const LORA_SEED_OFFSET: u64 = 0x10_4a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_steps: usize,
    /// Full-parameter steps before adapters are attached; half the run if unset.
    pub phase1_steps: Option<usize>,
    pub phase1_max_resolution: usize,
    pub phase2_max_resolution: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub subnets_per_step: usize,
    /// Filled from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_steps: 300,
            phase1_steps: None,
            phase1_max_resolution: 48,
            phase2_max_resolution: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            subnets_per_step: 1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn phase1_steps(&self) -> usize {
        self.phase1_steps.unwrap_or(self.total_steps / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase1_steps() > self.total_steps {
            return Err(Error::config(format!(
                "phase-1 steps {} exceed total steps {}",
                self.phase1_steps(),
                self.total_steps
            )));
        }
        if self.phase2_max_resolution < self.phase1_max_resolution {
            return Err(Error::config("phase-2 resolution cap is below the phase-1 cap"));
        }
        if self.batch_size == 0 || self.subnets_per_step == 0 {
            return Err(Error::config("batch size and subnets per step must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        Ok(())
    }

    pub fn phase_at(&self, step: usize) -> u8 {
        if step < self.phase1_steps() {
            1
        } else {
            2
        }
    }

    pub fn max_resolution(&self, phase: u8) -> usize {
        if phase == 1 {
            self.phase1_max_resolution
        } else {
            self.phase2_max_resolution
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: u8,
    pub configs: Vec<SubnetConfig>,
    pub loss: f32,
    pub lr: f32,
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::config("corrupt rng state");
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Progressive two-phase supernet training.
///
/// Phase 1 trains base weights and quantizers on subnets capped at the
/// phase-1 resolution. At the boundary adapter banks are attached and the
/// base (head included) is frozen; phase 2 trains adapters and quantizers
/// with the higher resolution cap. Quantizer state carries over.
pub struct Trainer {
    pub model: ElasticViT,
    pub schedule: TrainSchedule,
    pub lora: LoraSettings,
    pub optimizer: AdamW,
    pub step: usize,
    pub(crate) rng: ChaCha8Rng,
    data: BTreeMap<usize, Dataset>,
}

impl Trainer {
    /// `data` holds one training set per resolution of the space.
    pub fn new(model: ElasticViT, schedule: TrainSchedule, lora: LoraSettings, data: BTreeMap<usize, Dataset>) -> Result<Self> {
        schedule.validate()?;
        for &r in &model.space.resolutions {
            match data.get(&r) {
                Some(d) if !d.is_empty() && d.resolution == r => {}
                _ => return Err(Error::EmptyData(format!("no training data at resolution {r}"))),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(2);
        Ok(Trainer {
            optimizer: AdamW::new(schedule.weight_decay),
            model,
            schedule,
            lora,
            step: 0,
            rng,
            data,
        })
    }

    pub fn phase(&self) -> u8 {
        self.schedule.phase_at(self.step)
    }

    pub fn done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    fn enter_phase2(&mut self) -> Result<()> {
        if self.model.lora.is_none() {
            self.model
                .attach_lora(&self.lora, self.schedule.seed.wrapping_add(LORA_SEED_OFFSET))?;
        }
        self.model.frozen = true;
        Ok(())
    }

    /// One optimizer update over `subnets_per_step` sampled subnets.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let phase = self.phase();
        if phase == 2 {
            self.enter_phase2()?;
        }
        let trainable = if phase == 1 {
            Trainable {
                base: true,
                lora: false,
                quant: true,
            }
        } else {
            Trainable {
                base: false,
                lora: true,
                quant: true,
            }
        };
        let space = self.model.space.with_max_resolution(self.schedule.max_resolution(phase))?;
        let n = self.schedule.subnets_per_step;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut configs = Vec::with_capacity(n);
        let mut total = 0.0f32;
        for _ in 0..n {
            let cfg = sample_uniform(&space, &mut self.rng);
            let data = &self.data[&cfg.resolution];
            let idx: Vec<usize> = (0..self.schedule.batch_size)
                .map(|_| self.rng.random_range(0..data.len()))
                .collect();
            let (images, labels) = data.batch(&idx)?;
            let mut fwd = self.model.forward(&cfg, &images, trainable)?;
            self.model.apply_calibrations(&fwd.calibrations);
            let g = &mut fwd.graph;
            let loss = g.cross_entropy(fwd.logits, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    loss: value,
                });
            }
            total += value;
            g.backward_with(loss, crate::tensor::Tensor::scalar(1.0 / n as f32))?;
            for p in &fwd.params {
                if let Some(gr) = g.grad(p.var) {
                    match grads.get_mut(&p.name) {
                        Some(acc) => acc.iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(p.name.clone(), gr.data().to_vec());
                        }
                    }
                }
            }
            configs.push(cfg);
        }
        let lr = self.schedule.lr;
        self.optimizer.step(&mut self.model, &grads, lr);
        let record = StepRecord {
            step: self.step,
            phase,
            configs,
            loss: total / n as f32,
            lr,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `until` steps (capped at the schedule total) have run.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let until = until.min(self.schedule.total_steps);
        while self.step < until {
            let rec = self.train_step()?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

/// Runs the whole schedule, returning the trainer and every step record.
pub fn train_supernet(
    model: ElasticViT,
    data: BTreeMap<usize, Dataset>,
    schedule: TrainSchedule,
    lora: LoraSettings,
) -> Result<(Trainer, Vec<StepRecord>)> {
    let total = schedule.total_steps;
    let mut trainer = Trainer::new(model, schedule, lora, data)?;
    let mut records = Vec::with_capacity(total);
    trainer.run_until(total, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer, records))
}

/// Append-only CSV of `step,phase,config,loss,lr`.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        if fresh {
            inner.write_record(["step", "phase", "config", "loss", "lr"])?;
        }
        Ok(MetricsWriter { inner })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        let cfgs: Vec<String> = r.configs.iter().map(|c| c.to_string()).collect();
        self.inner.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            cfgs.join(" | "),
            r.loss.to_string(),
            r.lr.to_string(),
        ])?;
        self.inner.flush().map_err(|e| Error::Csv(e.into()))
    }
}
