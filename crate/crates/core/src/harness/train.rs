//! Mini-batch training on clean or clean+degraded samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::degrade::apply_pipeline;
use crate::error::{Error, Result};
use crate::network::{Model, LOSS_S_DEPTH, LOSS_S_SEG};
use crate::objectives::{collect_grads, model_loss, AdamW, AdamWConfig, Schedule};
use crate::params::{apply_bn_updates, Mode, ParamStore, Session};
use crate::sample::{Condition, Sample};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_seg: f64,
    pub l_depth: f64,
    pub s_seg: f64,
    pub s_depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub condition: Condition,
    pub seed: u64,
    pub degrade_seed: u64,
    pub config_hash: String,
    pub samples: usize,
    pub epochs: usize,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub log: Vec<StepLog>,
    pub manifest: TrainManifest,
}

/// One item of an epoch: a clean sample, or its degraded copy.
#[derive(Clone, Copy)]
struct Item {
    index: usize,
    degraded: bool,
}

/// Updates per epoch for `n` clean samples.
pub fn steps_per_epoch(n: usize, condition: Condition, batch_size: usize) -> usize {
    let items = match condition {
        Condition::Clean => n,
        Condition::Noisy => 2 * n,
    };
    items.div_ceil(batch_size)
}

pub fn total_steps(cfg: &RunConfig, n: usize, condition: Condition) -> usize {
    let all = cfg.train.epochs * steps_per_epoch(n, condition, cfg.train.batch_size);
    if cfg.train.max_steps > 0 {
        all.min(cfg.train.max_steps)
    } else {
        all
    }
}

fn stack(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack(&parts)
}

/// Trains a fresh model. For the noisy condition every epoch sees each clean
/// sample and one degraded copy, drawn online with key
/// `(degrade_seed, epoch·N + index)`.
pub fn train(cfg: &RunConfig, data: &[Sample], condition: Condition) -> Result<TrainOutcome> {
    train_with(cfg, data, condition, |_| {})
}

/// [`train`] with a callback after every update.
pub fn train_with(
    cfg: &RunConfig,
    data: &[Sample],
    condition: Condition,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.network.clone())?;
    let (h, w) = (cfg.network.input_height, cfg.network.input_width);
    for s in data {
        s.validate()?;
        if s.depth.is_none() {
            return Err(Error::data(format!("{}: training samples need a depth target", s.id)));
        }
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::data(format!(
                "{}: {}×{} does not match input size {h}×{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
    }
    let t = &cfg.train;
    let mut store = model.init::<f32>(t.seed);
    let total = total_steps(cfg, data.len(), condition);
    let schedule = Schedule::new(t.lr, total);
    let mut opt = AdamW::new(AdamWConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        ..AdamWConfig::default()
    });
    let mut log = Vec::with_capacity(total);
    let n = data.len();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let mut items: Vec<Item> = (0..n).map(|index| Item { index, degraded: false }).collect();
        if condition == Condition::Noisy {
            items.extend((0..n).map(|index| Item { index, degraded: true }));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(epoch as u64 + 1);
        items.shuffle(&mut rng);
        for chunk in items.chunks(t.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<Sample> = chunk
                .par_iter()
                .map(|it| {
                    let s = &data[it.index];
                    if it.degraded {
                        let key = (epoch * n + it.index) as u64;
                        apply_pipeline(&cfg.degrade, s, t.degrade_seed, key).map(|(d, _)| d)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            step += 1;
            let lr = schedule.lr(step);
            let entry = update(&model, &mut store, &mut opt, &batch, t.depth_weight, step, lr)?;
            let entry = StepLog { epoch, lr, ..entry };
            log::debug!(
                "step {} epoch {} lr {:.3e} loss {:.4} seg {:.4} depth {:.4} s_s {:.4} s_d {:.4}",
                entry.step,
                entry.epoch,
                entry.lr,
                entry.loss,
                entry.l_seg,
                entry.l_depth,
                entry.s_seg,
                entry.s_depth
            );
            on_step(&entry);
            log.push(entry);
        }
        epoch += 1;
        if n == 0 {
            break;
        }
    }
    let manifest = TrainManifest {
        condition,
        seed: t.seed,
        degrade_seed: t.degrade_seed,
        config_hash: cfg.hash(),
        samples: n,
        epochs: epoch,
        steps: step,
    };
    Ok(TrainOutcome { store, log, manifest })
}

/// Forward, backward and one optimizer update on a batch.
fn update(
    model: &Model,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW,
    batch: &[Sample],
    depth_weight: f64,
    step: usize,
    lr: f64,
) -> Result<StepLog> {
    let image = stack(batch.iter().map(|s| s.image.clone()).collect())?;
    let mask = stack(batch.iter().map(|s| s.mask.clone()).collect())?;
    let depth = stack(
        batch
            .iter()
            .map(|s| s.depth.clone().expect("checked by caller"))
            .collect(),
    )?;
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store, Mode::Train);
    let x = s.graph.constant(image);
    let m = s.graph.constant(mask);
    let d = s.graph.constant(depth);
    let out = model.forward(&mut s, x)?;
    let nodes = model_loss(&mut s, &out, m, d, depth_weight, step)?;
    s.graph.backward(nodes.total)?;
    let grads = collect_grads(&s);
    let value = |v| s.graph.value(v).item() as f64;
    let (loss, l_seg, l_depth) = (value(nodes.total), value(nodes.seg), value(nodes.depth));
    if !(loss.is_finite() && l_seg.is_finite() && l_depth.is_finite()) {
        return Err(Error::Training {
            step,
            message: format!("non-finite loss (total {loss}, seg {l_seg}, depth {l_depth})"),
        });
    }
    let bn = s.into_bn_updates();
    opt.step(store, &grads, lr).map_err(|e| match e {
        Error::Training { message, .. } => Error::Training { step, message },
        other => other,
    })?;
    apply_bn_updates(store, &bn)?;
    Ok(StepLog {
        step,
        epoch: 0,
        lr,
        loss,
        l_seg,
        l_depth,
        s_seg: store.param(LOSS_S_SEG)?.item() as f64,
        s_depth: store.param(LOSS_S_DEPTH)?.item() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::synth_dataset;
    use crate::network::NetworkConfig;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.network = NetworkConfig {
            input_height: 32,
            input_width: 32,
            encoder_widths: [8, 16, 24, 32],
            unified_dim: 32,
            stage2_dim: 16,
            fused_dim: 32,
            ..NetworkConfig::default()
        };
        c.train.batch_size = 4;
        c
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut c = tiny();
        c.train.epochs = 0;
        let data = synth_dataset(4, 32, 0).unwrap();
        let out = train(&c, &data, Condition::Clean).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(
            out.store,
            Model::new(c.network.clone()).unwrap().init::<f32>(c.train.seed)
        );
        assert_eq!(out.manifest.steps, 0);
    }

    #[test]
    fn step_counts_and_determinism() {
        let mut c = tiny();
        c.train.epochs = 2;
        let data = synth_dataset(6, 32, 1).unwrap();
        assert_eq!(total_steps(&c, 6, Condition::Clean), 4);
        assert_eq!(total_steps(&c, 6, Condition::Noisy), 6);
        let a = train(&c, &data, Condition::Noisy).unwrap();
        assert_eq!(a.log.len(), 6);
        assert!(a
            .log
            .iter()
            .all(|l| l.loss.is_finite() && l.s_seg.is_finite() && l.s_depth.is_finite()));
        assert_eq!(a.log.last().unwrap().lr, 0.0);
        let b = train(&c, &data, Condition::Noisy).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.log, b.log);
        c.train.max_steps = 3;
        assert_eq!(train(&c, &data, Condition::Noisy).unwrap().log.len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = tiny();
        let mut data = synth_dataset(2, 32, 1).unwrap();
        data[0].depth = None;
        assert!(matches!(train(&c, &data, Condition::Clean), Err(Error::Data(_))));
        let big = synth_dataset(1, 64, 1).unwrap();
        assert!(matches!(train(&c, &big, Condition::Clean), Err(Error::Data(_))));
    }
}
