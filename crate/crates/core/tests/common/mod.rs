#![allow(dead_code)]

use depthpolyp::network::{Model, NetworkConfig};
use depthpolyp::objectives::model_loss;
use depthpolyp::params::{Mode, ParamStore, Session};
use depthpolyp::tensor::{grad_check_report, GradReport, Graph, Tensor, Var};
use depthpolyp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Everything the end-to-end gradient check needs, in f64.
pub struct Composite {
    pub model: Model,
    pub store: ParamStore<f64>,
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub depth: Tensor<f64>,
}

impl Composite {
    pub fn new(seed: u64) -> Self {
        let cfg = NetworkConfig {
            input_height: 32,
            input_width: 32,
            encoder_widths: [8, 16, 24, 32],
            ..NetworkConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut store = model.init::<f32>(seed).cast::<f64>();
        // move the zero-initialized gates and scales off their special points
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let names: Vec<String> = store.param_names().map(String::from).collect();
        for n in names {
            let centre = if n.ends_with(".gamma") && n.contains("isf") || n.contains(".phi.") || n.starts_with("loss.")
            {
                0.0
            } else if n.ends_with(".bn.gamma") {
                1.0
            } else if n.ends_with(".bn.beta") {
                0.0
            } else {
                continue;
            };
            for v in store.param_mut(&n).unwrap().data_mut() {
                *v = centre + r.random_range(-0.3..0.3);
            }
        }
        let image = Tensor::from_fn([1, 3, 32, 32], |_| r.random_range(0.0..1.0));
        let mask = Tensor::from_fn([1, 1, 32, 32], |i| {
            let (y, x) = ((i / 32) as f64 - 14.0, (i % 32) as f64 - 17.0);
            if x * x + y * y < 80.0 {
                1.0
            } else {
                0.0
            }
        });
        let depth = Tensor::from_fn([1, 1, 32, 32], |_| r.random_range(0.0..1.0));
        Composite {
            model,
            store,
            image,
            mask,
            depth,
        }
    }

    /// Joint loss with `bind_as` (a parameter name, or `None` for the image)
    /// replaced by `v`.
    pub fn loss(&self, g: &mut Graph<f64>, v: Var, bind_as: Option<&str>) -> Result<Var> {
        let mut s = Session::new(g, &self.store, Mode::Train);
        let image = match bind_as {
            Some(name) => {
                s.bind(name, v);
                s.graph.constant(self.image.clone())
            }
            None => v,
        };
        let out = self.model.forward(&mut s, image)?;
        let mask = s.graph.constant(self.mask.clone());
        let depth = s.graph.constant(self.depth.clone());
        Ok(model_loss(&mut s, &out, mask, depth, 1.0, 0)?.total)
    }

    /// Checks the image gradient at `n_input` coordinates and every
    /// parameter tensor at up to `per_param` coordinates.
    pub fn check(&self, n_input: usize, per_param: usize, h: f64) -> Vec<(String, GradReport)> {
        let mut out = Vec::new();
        let stride = (self.image.len() / n_input).max(1);
        let idx: Vec<usize> = (0..self.image.len()).step_by(stride).take(n_input).collect();
        let rep = grad_check_report(|g, v| self.loss(g, v, None), &self.image, h, &idx).unwrap();
        out.push(("image".to_string(), rep));
        for (name, t) in self.store.params() {
            let step = (t.len() / per_param).max(1);
            let idx: Vec<usize> = (0..t.len()).step_by(step).take(per_param).collect();
            let rep = grad_check_report(|g, v| self.loss(g, v, Some(name)), t, h, &idx).unwrap();
            out.push((name.to_string(), rep));
        }
        out
    }
}
