//! Per-image Dice, IoU and Recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
}

/// Binarizes `pred` at `threshold` (`p ≥ t` is foreground) and scores it
/// against `mask`. Both empty scores 1 everywhere. An empty ground truth
/// with a non-empty prediction has Recall 1 and Dice = IoU = 0.
pub fn score(pred: &[f32], mask: &[f32], threshold: f64) -> Result<Metrics> {
    if pred.len() != mask.len() {
        return Err(Error::data(format!(
            "prediction has {} pixels, mask {}",
            pred.len(),
            mask.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(mask) {
        let g = match g {
            0.0 => false,
            1.0 => true,
            _ => return Err(Error::data("mask is not binary")),
        };
        let p = p as f64 >= threshold;
        tp += (p && g) as u64;
        np += p as u64;
        ng += g as u64;
    }
    if np == 0 && ng == 0 {
        return Ok(Metrics {
            dice: 1.0,
            iou: 1.0,
            recall: 1.0,
        });
    }
    let union = np + ng - tp;
    Ok(Metrics {
        dice: 2.0 * tp as f64 / (np + ng) as f64,
        iou: tp as f64 / union as f64,
        recall: if ng == 0 { 1.0 } else { tp as f64 / ng as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleScore>,
    pub mean: Metrics,
    pub count: usize,
    pub threshold: f64,
}

impl MetricReport {
    /// Arithmetic means of the per-sample scores. Values are summed in sorted
    /// order so the mean does not depend on corpus order.
    pub fn new(per_sample: Vec<SampleScore>, threshold: f64) -> Self {
        let n = per_sample.len();
        let avg = |f: fn(&Metrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                let mut v: Vec<f64> = per_sample.iter().map(|s| f(&s.metrics)).collect();
                v.sort_by(f64::total_cmp);
                v.iter().sum::<f64>() / n as f64
            }
        };
        let mean = Metrics {
            dice: avg(|m| m.dice),
            iou: avg(|m| m.iou),
            recall: avg(|m| m.recall),
        };
        MetricReport {
            per_sample,
            mean,
            count: n,
            threshold,
        }
    }
}
