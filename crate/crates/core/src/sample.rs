//! Image/mask/depth triplets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "noisy" => Ok(Condition::Noisy),
            _ => Err(Error::config(format!("condition must be clean or noisy, got `{s}`"))),
        }
    }
}

/// One training or test example. Planes are stored as single-item tensors:
/// image `(1, 3, H, W)` in `[0, 1]`, mask `(1, 1, H, W)` in `{0, 1}`, depth
/// `(1, 1, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub depth: Option<Tensor<f32>>,
    pub condition: Condition,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Tensor<f32>,
        mask: Tensor<f32>,
        depth: Option<Tensor<f32>>,
        condition: Condition,
    ) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            image,
            mask,
            depth,
            condition,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.shape().height
    }

    pub fn width(&self) -> usize {
        self.image.shape().width
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.image.shape();
        if sh.batch != 1 || sh.channels != 3 {
            return Err(Error::data(format!("{}: image must be (1,3,H,W), got {sh}", self.id)));
        }
        let plane = Shape::new(1, 1, sh.height, sh.width);
        if self.mask.shape() != plane {
            return Err(Error::data(format!(
                "{}: mask shape {} does not match image",
                self.id,
                self.mask.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("{}: mask is not binary", self.id)));
        }
        if !in_unit(&self.image) {
            return Err(Error::data(format!("{}: image values outside [0,1]", self.id)));
        }
        if let Some(d) = &self.depth {
            if d.shape() != plane {
                return Err(Error::data(format!(
                    "{}: depth shape {} does not match image",
                    self.id,
                    d.shape()
                )));
            }
            if !in_unit(d) {
                return Err(Error::data(format!("{}: depth values outside [0,1]", self.id)));
            }
        }
        Ok(())
    }
}

fn in_unit(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|v| (0.0..=1.0).contains(v))
}

/// Rounds every value to the nearest multiple of 1/255, the precision the
/// 8-bit image files hold.
pub fn quantize8(t: &Tensor<f32>) -> Tensor<f32> {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = to_u8(*v) as f32 / 255.0;
    }
    out
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let img = Tensor::full([1, 3, 4, 4], 0.5);
        let mask = Tensor::zeros([1, 1, 4, 4]);
        assert!(Sample::new("a", img.clone(), mask.clone(), None, Condition::Clean).is_ok());
        let bad = Tensor::full([1, 1, 4, 4], 0.5);
        assert!(matches!(
            Sample::new("a", img.clone(), bad, None, Condition::Clean),
            Err(Error::Data(_))
        ));
        let depth = Tensor::full([1, 1, 4, 4], 1.5);
        assert!(matches!(
            Sample::new("a", img, mask, Some(depth), Condition::Clean),
            Err(Error::Data(_))
        ));
        assert_eq!("noisy".parse::<Condition>().unwrap(), Condition::Noisy);
        assert!("dirty".parse::<Condition>().is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let t = Tensor::from_fn([1, 1, 1, 50], |i| i as f32 / 49.0);
        let q = quantize8(&t);
        assert_eq!(quantize8(&q), q);
        assert!(q.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-7);
    }
}
