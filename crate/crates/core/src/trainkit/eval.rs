use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{ElasticViT, SubnetConfig, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-pixel cross-entropy.
    pub loss: f64,
    pub pixel_accuracy: f64,
    /// IoU averaged over classes present in labels or predictions.
    pub mean_iou: f64,
    pub pixels: usize,
}

/// Streaming accumulator for segmentation metrics.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    classes: usize,
    loss_sum: f64,
    correct: usize,
    pixels: usize,
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        MetricAccumulator {
            classes,
            loss_sum: 0.0,
            correct: 0,
            pixels: 0,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    /// Adds `[pixels, classes]` logits against their labels.
    pub fn add(&mut self, logits: &Tensor, labels: &[usize]) -> Result<()> {
        let c = self.classes;
        if logits.rank() != 2 || logits.shape()[1] != c || logits.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "logits {:?} do not match {} labels over {c} classes",
                logits.shape(),
                labels.len()
            )));
        }
        for (row, &label) in logits.data().chunks(c).zip(labels) {
            if label >= c {
                return Err(Error::Range(format!("label {label} outside {c} classes")));
            }
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            self.loss_sum += lse - row[label] as f64;
            // first maximum wins ties
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            if pred == label {
                self.correct += 1;
                self.tp[label] += 1;
            } else {
                self.fp[pred] += 1;
                self.fn_[label] += 1;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.pixels == 0 {
            return Err(Error::EmptyData("no pixels to evaluate".into()));
        }
        let ious: Vec<f64> = (0..self.classes)
            .filter_map(|k| {
                let union = self.tp[k] + self.fp[k] + self.fn_[k];
                (union > 0).then(|| self.tp[k] as f64 / union as f64)
            })
            .collect();
        Ok(Metrics {
            loss: self.loss_sum / self.pixels as f64,
            pixel_accuracy: self.correct as f64 / self.pixels as f64,
            mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
            pixels: self.pixels,
        })
    }
}

/// Metrics of one batch of logits.
pub fn segmentation_metrics(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Metrics> {
    let mut acc = MetricAccumulator::new(classes);
    acc.add(logits, labels)?;
    acc.finish()
}

/// Copy of `model` with every quantizer on `cfg`'s path calibrated from the
/// first batch of `data`.
pub fn calibrate_for(model: &ElasticViT, cfg: &SubnetConfig, data: &Dataset, batch_size: usize) -> Result<ElasticViT> {
    let (images, _) = data
        .batches(batch_size)
        .next()
        .ok_or_else(|| Error::EmptyData("calibration needs at least one sample".into()))??;
    let f = model.forward(cfg, &images, Trainable::NONE)?;
    let mut out = model.clone();
    out.apply_calibrations(&f.calibrations);
    Ok(out)
}

/// Deterministic loss, pixel accuracy and mIoU of subnet `cfg` over `data`,
/// taken in order. Quantizers not yet calibrated are calibrated from the
/// first batch, exactly as [`calibrate_for`] does.
pub fn evaluate(model: &ElasticViT, cfg: &SubnetConfig, data: &Dataset, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyData("validation set is empty".into()));
    }
    let mut acc = MetricAccumulator::new(model.space.num_classes);
    let mut calibrated: Option<ElasticViT> = None;
    for batch in data.batches(batch_size) {
        let (images, labels) = batch?;
        let m = calibrated.as_ref().unwrap_or(model);
        let f = m.forward(cfg, &images, Trainable::NONE)?;
        if !f.calibrations.is_empty() {
            let mut c = m.clone();
            c.apply_calibrations(&f.calibrations);
            calibrated = Some(c);
        }
        acc.add(f.graph.value(f.logits), &labels)?;
    }
    acc.finish()
}
