//! Run configuration: network, training, evaluation and degradation keys in
//! one flat file. Every key has a default and unknown keys are errors.

use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::harness::metrics::THRESHOLD;
use crate::kv::{self, Entry};
use crate::network::NetworkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the warmup/cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub depth_weight: f64,
    pub seed: u64,
    /// Stop after this many updates. 0 means run all epochs.
    pub max_steps: usize,
    /// Key for online degradations of the noisy condition.
    pub degrade_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 1e-4,
            depth_weight: 1.0,
            seed: 0,
            max_steps: 0,
            degrade_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.depth_weight >= 0.0) {
            return Err(Error::config(
                "train.lr, train.weight_decay and train.depth_weight must be finite and ≥ 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub threshold: f64,
    pub degrade: DegradationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            threshold: THRESHOLD,
            degrade: DegradationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in kv::parse(text)? {
            cfg.apply(&e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        if self.network.apply(e)? || self.degrade.apply(e)? {
            return Ok(());
        }
        let t = &mut self.train;
        match e.key.as_str() {
            "train.epochs" => t.epochs = kv::value(e)?,
            "train.batch_size" => t.batch_size = kv::value(e)?,
            "train.lr" => t.lr = kv::value(e)?,
            "train.weight_decay" => t.weight_decay = kv::value(e)?,
            "train.depth_weight" => t.depth_weight = kv::value(e)?,
            "train.seed" => t.seed = kv::value(e)?,
            "train.max_steps" => t.max_steps = kv::value(e)?,
            "train.degrade_seed" => t.degrade_seed = kv::value(e)?,
            "eval.threshold" => self.threshold = kv::value(e)?,
            _ => return Err(kv::unknown(e)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.degrade.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("eval.threshold must lie in [0,1]"));
        }
        Ok(())
    }

    /// Canonical text of the values that shape training. Floats use their
    /// shortest round-trip form, so equal configs give equal text.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let d = &self.degrade;
        let mut s = self.network.to_kv();
        s += &format!(
            "train.epochs = {}\ntrain.batch_size = {}\ntrain.lr = {:?}\ntrain.weight_decay = {:?}\ntrain.depth_weight = {:?}\n\
             train.seed = {}\ntrain.max_steps = {}\ntrain.degrade_seed = {}\neval.threshold = {:?}\n",
            t.epochs, t.batch_size, t.lr, t.weight_decay, t.depth_weight, t.seed, t.max_steps, t.degrade_seed, self.threshold
        );
        s += &format!("degrade = {d:?}\n");
        s
    }

    /// CRC32 of [`canonical`](Self::canonical), as 8 hex digits.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        assert_eq!(RunConfig::from_kv("").unwrap(), RunConfig::default());
        let c =
            RunConfig::from_kv("input_size = 96\ntrain.epochs = 3\ndegrade.fog.p = 0\neval.threshold = 0.4\n").unwrap();
        assert_eq!(
            (c.network.input_height, c.train.epochs, c.degrade.probs[6], c.threshold),
            (96, 3, 0.0, 0.4)
        );
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert_eq!(
            c.hash(),
            RunConfig::from_kv("train.epochs=3\ninput_size=96\neval.threshold=0.4\ndegrade.fog.p=0")
                .unwrap()
                .hash()
        );
    }

    #[test]
    fn bad_keys_and_values() {
        for text in [
            "train.epoch = 3",
            "lr = 1",
            "train.batch_size = 0",
            "train.lr = x",
            "eval.threshold = 2",
            "degrade.fog.p = 3",
        ] {
            assert!(matches!(RunConfig::from_kv(text), Err(Error::Config(_))), "{text}");
        }
    }
}
