//! Progressive supernet training, checkpoints, evaluation and subnet export.

mod checkpoint;
pub mod container;
mod eval;
mod export;
mod optim;
mod train;

pub use checkpoint::{config_digest, Checkpoint, CHECKPOINT_KIND};
pub use eval::{calibrate_for, evaluate, segmentation_metrics, MetricAccumulator, Metrics};
pub use export::{export_subnet, ExportedLinear, ExportedSubnet, LayerMeta, QuantMeta, EXPORT_KIND};
pub use optim::{AdamW, Moments};
pub use train::{train_supernet, MetricsWriter, RngState, StepRecord, TrainSchedule, Trainer, LORA_SEED_OFFSET};
