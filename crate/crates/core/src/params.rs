//! Named parameter storage and the per-pass session that binds parameters
//! onto a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStats, Graph, Real, Shape, Tensor, Var};

/// Learnable parameters and non-learnable buffers (batch-norm running
/// statistics), both keyed by dotted names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::config(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::config(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total learnable scalars, counted from the stored tensors.
    pub fn scalar_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers `prefix.gamma`, `prefix.beta` and the running statistics for
    /// a batch-norm over `channels`.
    pub fn add_batchnorm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let v = Shape::vector(channels);
        self.insert_param(format!("{prefix}.gamma"), Tensor::full(v, T::one()))?;
        self.insert_param(format!("{prefix}.beta"), Tensor::zeros(v))?;
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(v))?;
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::full(v, T::one()))
    }

    /// Registers a He-uniform initialized weight with the given fan-in.
    pub fn add_weight(&mut self, name: &str, shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.insert_param(name, t)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds stored parameters as graph leaves on first use
/// and collects batch-norm statistics to fold in afterwards.
pub struct Session<'g, 's, T: Real> {
    pub graph: &'g mut Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BnStats<T>)>,
}

impl<'g, 's, T: Real> Session<'g, 's, T> {
    pub fn new(graph: &'g mut Graph<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Session {
            graph,
            store,
            mode,
            track_grads: mode == Mode::Train,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Whether parameter leaves require gradients (defaults to training mode).
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` in place of the stored parameter `name`.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.graph.leaf(value, self.track_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.graph.set_scope(name);
        self.graph.conv2d(x, w, stride, pad)
    }

    pub fn pointwise(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.graph.set_scope(name);
        self.graph.conv2d_pointwise(x, w)
    }

    pub fn depthwise(&mut self, name: &str, x: Var, multiplier: usize, cout: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.graph.set_scope(name);
        self.graph.depthwise_multiplier(x, w, multiplier, cout)
    }

    pub fn upsample(&mut self, scope: &str, x: Var, height: usize, width: usize) -> Result<Var> {
        self.graph.set_scope(scope);
        self.graph.upsample_bilinear(x, height, width)
    }

    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.store.buffer(&format!("{prefix}.running_mean"))?,
                var: self.store.buffer(&format!("{prefix}.running_var"))?,
            },
        };
        let (y, stats) = self.graph.batchnorm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    /// Pointwise or depthwise conv followed by batch-norm and ReLU.
    pub fn conv_bn_relu(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(name, x, stride, pad)?;
        let y = self.batchnorm(&format!("{name}.bn"), y)?;
        Ok(self.graph.relu(y))
    }

    /// Batch statistics gathered in training mode, to be applied with
    /// [`apply_bn_updates`].
    pub fn into_bn_updates(self) -> Vec<(String, BnStats<T>)> {
        self.bn_updates
    }
}

/// Folds training-mode batch statistics into the store's running buffers.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[(String, BnStats<T>)]) -> Result<()> {
    for (prefix, stats) in updates {
        let mut mean = store.buffer(&format!("{prefix}.running_mean"))?.clone();
        let mut var = store.buffer(&format!("{prefix}.running_var"))?.clone();
        stats.update_running(&mut mean, &mut var);
        *store.buffer_mut(&format!("{prefix}.running_mean"))? = mean;
        *store.buffer_mut(&format!("{prefix}.running_var"))? = var;
    }
    Ok(())
}
