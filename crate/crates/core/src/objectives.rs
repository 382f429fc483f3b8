//! Dice and Smooth-L1 losses, the uncertainty-weighted joint objective, and
//! AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::accounting::layer_of;
use crate::error::{Error, Result};
use crate::network::{Outputs, LOSS_S_DEPTH, LOSS_S_SEG};
use crate::params::{ParamStore, Session};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// `1 − (2Σpy + ε) / (Σp + Σy + ε)` reduced over the whole batch.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    if g.value(y).data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::data("dice target must be a {0,1} mask"));
    }
    let eps = T::of(DICE_EPS);
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let num = g.mul_scalar(inter, T::of(2.0));
    let num = g.add_scalar(num, eps);
    let sp = g.sum(p);
    let sy = g.sum(y);
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    let neg = g.mul_scalar(ratio, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Mean Smooth-L1 with `β = 1`.
pub fn smooth_l1_loss<T: Real>(g: &mut Graph<T>, d: Var, d_star: Var) -> Result<Var> {
    g.smooth_l1(d, d_star, T::of(SMOOTH_L1_BETA))
}

/// `½e^{−s_s}·L_seg + ½e^{−s_d}·L_depth + ½s_s + ½s_d`, with `s = log σ²`.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    l_seg: Var,
    l_depth: Var,
    s_seg: Var,
    s_depth: Var,
    step: usize,
) -> Result<Var> {
    check_finite(g, l_seg, "segmentation loss", step)?;
    check_finite(g, l_depth, "depth loss", step)?;
    let a = weighted_term(g, l_seg, s_seg)?;
    let b = weighted_term(g, l_depth, s_depth)?;
    g.add(a, b)
}

/// `½e^{−s}·L + ½s`.
fn weighted_term<T: Real>(g: &mut Graph<T>, l: Var, s: Var) -> Result<Var> {
    let half = T::of(0.5);
    let neg = g.mul_scalar(s, -T::one());
    let w = g.exp(neg);
    let wl = g.mul(w, l)?;
    let sum = g.add(wl, s)?;
    Ok(g.mul_scalar(sum, half))
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, what: &str, step: usize) -> Result<()> {
    let x = g.value(v).item();
    if !x.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("{what} is {}", x.f64()),
        });
    }
    Ok(())
}

/// Loss nodes for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub seg: Var,
    pub depth: Var,
}

/// Full training objective on model outputs. `depth_weight` scales the depth
/// loss; at 0 the depth term and its uncertainty parameter drop out.
pub fn model_loss<T: Real>(
    s: &mut Session<'_, '_, T>,
    out: &Outputs,
    mask: Var,
    depth_target: Var,
    depth_weight: f64,
    step: usize,
) -> Result<LossNodes> {
    let p = s.graph.sigmoid(out.seg_logits);
    let seg = dice_loss(s.graph, p, mask)?;
    let depth = smooth_l1_loss(s.graph, out.depth, depth_target)?;
    let s_seg = s.param(LOSS_S_SEG)?;
    let total = if depth_weight == 0.0 {
        check_finite(s.graph, seg, "segmentation loss", step)?;
        weighted_term(s.graph, seg, s_seg)?
    } else {
        let s_depth = s.param(LOSS_S_DEPTH)?;
        let scaled = s.graph.mul_scalar(depth, T::of(depth_weight));
        joint_loss(s.graph, seg, scaled, s_seg, s_depth, step)?
    };
    Ok(LossNodes { total, seg, depth })
}

/// Gradients of every parameter bound in `s`, after `backward`. Parameters
/// the loss never reached get zeros.
pub fn collect_grads<T: Real>(s: &Session<'_, '_, T>) -> BTreeMap<String, Tensor<T>> {
    s.bound()
        .iter()
        .map(|(name, &v)| {
            let g = s
                .graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(s.graph.shape(v)));
            (name.clone(), g)
        })
        .collect()
}

/// Linear warmup from 0 over the first 10% of steps, then cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub const WARMUP_FRACTION: f64 = 0.1;

    pub fn new(peak: f64, total_steps: usize) -> Self {
        Schedule {
            peak,
            total_steps,
            warmup_steps: (total_steps as f64 * Self::WARMUP_FRACTION).round() as usize,
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        let (w, n) = (self.warmup_steps, self.total_steps);
        if t < w {
            return self.peak * t as f64 / w as f64;
        }
        if n <= w || t >= n {
            return if n <= w && t <= n { self.peak } else { 0.0 };
        }
        let progress = (t - w) as f64 / (n - w) as f64;
        0.5 * self.peak * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Batch-norm affine terms and the loss log-variances are not decayed.
pub fn decays(name: &str) -> bool {
    let layer = layer_of(name);
    !(layer.ends_with(".bn") || layer == "bn" || layer == "loss")
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update at learning rate `lr`. Every gradient must be finite.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training {
                    step: self.step,
                    message: format!("non-finite gradient for {name}"),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient shape for {name} does not match parameter"
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = if decays(name) { 1.0 - lr * c.weight_decay } else { 1.0 };
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let upd = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w = T::of(w.f64() * decay - upd);
            }
        }
        Ok(())
    }
}
