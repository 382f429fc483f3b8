//! Inference, corpus evaluation and FPS timing.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{score, MetricReport, SampleScore};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::{Mode, ParamStore, Session};
use crate::sample::Sample;
use crate::tensor::{Graph, Tensor};

/// Segmentation probabilities and depth for a `(B, 3, H, W)` batch.
pub fn predict(model: &Model, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store, Mode::Eval).track_grads(false);
    let x = s.graph.constant(image.clone());
    let out = model.forward(&mut s, x)?;
    let p = s.graph.sigmoid(out.seg_logits);
    Ok((s.graph.value(p).clone(), s.graph.value(out.depth).clone()))
}

/// Scores every sample at `threshold`. Samples run in parallel; the report
/// keeps input order.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[Sample], threshold: f64) -> Result<MetricReport> {
    let per: Vec<SampleScore> = samples
        .par_iter()
        .map(|s| {
            let (p, _) = predict(model, store, &s.image)?;
            Ok(SampleScore {
                id: s.id.clone(),
                metrics: score(p.data(), s.mask.data(), threshold)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport::new(per, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub mean_fps: f64,
    pub std_fps: f64,
    pub cv: f64,
    pub mean_ms: f64,
}

/// Times batch-1 forward passes on a random image after `warmup` untimed
/// ones. Runs on a dedicated pool of `threads` workers.
pub fn bench_fps(
    model: &Model,
    store: &ParamStore<f32>,
    height: usize,
    width: usize,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<FpsReport> {
    if iters < 10 {
        return Err(Error::config(format!(
            "bench needs at least 10 iterations, got {iters}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    let image = Tensor::from_fn([1, 3, height, width], |i| ((i * 7919) % 256) as f32 / 255.0);
    let times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            predict(model, store, &image)?;
        }
        (0..iters)
            .map(|_| {
                let t0 = Instant::now();
                predict(model, store, &image)?;
                Ok(t0.elapsed().as_secs_f64())
            })
            .collect()
    })?;
    let fps: Vec<f64> = times.iter().map(|t| 1.0 / t.max(1e-9)).collect();
    let n = fps.len() as f64;
    let mean = fps.iter().sum::<f64>() / n;
    let std = (fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(FpsReport {
        height,
        width,
        warmup,
        iters,
        threads: threads.max(1),
        mean_fps: mean,
        std_fps: std,
        cv: std / mean,
        mean_ms: 1e3 * times.iter().sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::synth_dataset;
    use crate::network::NetworkConfig;

    fn small() -> (Model, ParamStore<f32>) {
        let m = Model::new(NetworkConfig {
            encoder_widths: [8, 16, 24, 32],
            ..NetworkConfig::default()
        })
        .unwrap();
        let s = m.init(0);
        (m, s)
    }

    #[test]
    fn evaluation_is_order_independent() {
        let (m, st) = small();
        let data = synth_dataset(5, 64, 2).unwrap();
        let a = evaluate(&m, &st, &data, 0.5).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        let b = evaluate(&m, &st, &rev, 0.5).unwrap();
        assert!((a.mean.dice - b.mean.dice).abs() < 1e-12);
        assert_eq!(a.per_sample[0], b.per_sample[4]);
        for s in &a.per_sample {
            let d = s.metrics;
            assert!((0.0..=1.0).contains(&d.dice) && d.iou <= d.dice);
        }
    }

    #[test]
    fn bench_reports_positive_fps() {
        let (m, st) = small();
        let r = bench_fps(&m, &st, 64, 64, 1, 10, 1).unwrap();
        assert!(r.mean_fps > 0.0 && r.cv >= 0.0);
        assert!(matches!(bench_fps(&m, &st, 64, 64, 1, 5, 1), Err(Error::Config(_))));
    }
}
