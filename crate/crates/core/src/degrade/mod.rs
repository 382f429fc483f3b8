//! Synthetic degradations for the clean/noisy robustness protocol.
//!
//! Every sample gets an independent random stream per operator, keyed by
//! `(seed, index, operator)`. A pipeline run is split into [`plan`], which
//! draws all parameters, and [`apply_plan`], which is a pure function of the
//! plan and the clean sample. Plans serialize to the corpus manifest, so a
//! stored noisy corpus can be replayed exactly.

mod jpeg;
mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::sample::{Condition, Sample};

pub use jpeg::{dct8x8, idct8x8, jpeg_compress, quality_scale, quant_table, roundtrip_block, LUMA_TABLE};
pub use ops::{
    brightness, contrast, filter2d, fog, gaussian_blur, gaussian_kernel1d, gaussian_sigma, gaussian_size_for_sigma,
    light_spots, motion_blur, motion_kernel, optical_distortion, Spot,
};

/// Operators in pipeline order.
pub const OPERATORS: [&str; 8] = [
    "motion_blur",
    "gaussian_blur",
    "brightness",
    "contrast",
    "jpeg",
    "light_spots",
    "fog",
    "optical_distortion",
];

/// Resolution the pixel-valued ranges refer to.
pub const REFERENCE_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    /// Firing probability per operator, indexed like [`OPERATORS`].
    pub probs: [f64; 8],
    /// Motion-blur kernel size range in reference pixels (odd bounds).
    pub motion_kernel: (usize, usize),
    /// Gaussian-blur choices. Kernel sizes, or σ values when `gaussian_literal_sigma` is set.
    pub gaussian_values: Vec<usize>,
    pub gaussian_literal_sigma: bool,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub jpeg_quality: (u32, u32),
    /// Spot radius range in reference pixels.
    pub spot_radius: (f64, f64),
    pub spot_intensity: f64,
    pub spot_count: (usize, usize),
    pub fog: (f64, f64),
    pub distort: f64,
    pub shift: f64,
    /// Pixel ranges are multiplied by `min(H, W) / reference_size`. 0 disables scaling.
    pub reference_size: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            probs: [1.0, 0.2, 1.0, 1.0, 0.5, 0.8, 0.3, 0.3],
            motion_kernel: (3, 29),
            gaussian_values: vec![3, 5, 7],
            gaussian_literal_sigma: false,
            brightness: (-0.1, 0.2),
            contrast: (-0.2, 0.2),
            jpeg_quality: (30, 70),
            spot_radius: (5.0, 40.0),
            spot_intensity: 0.85,
            spot_count: (1, 3),
            fog: (0.5, 0.8),
            distort: 0.05,
            shift: 0.05,
            reference_size: REFERENCE_SIZE,
        }
    }
}

fn range_ok<T: PartialOrd>(r: &(T, T)) -> bool {
    r.0 <= r.1
}

impl DegradationSpec {
    /// Same ranges, nothing fires.
    pub fn disabled() -> Self {
        DegradationSpec {
            probs: [0.0; 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (p, name) in self.probs.iter().zip(OPERATORS) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(format!("{name}: probability {p} outside [0,1]")));
            }
        }
        let (lo, hi) = self.motion_kernel;
        if lo < 3 || lo % 2 == 0 || hi % 2 == 0 || lo > hi {
            return Err(Error::config(format!(
                "motion_blur kernel range {lo}..{hi} must have odd bounds ≥ 3"
            )));
        }
        if self.gaussian_values.is_empty() || self.gaussian_values.contains(&0) {
            return Err(Error::config("gaussian_blur needs non-empty positive values"));
        }
        if !self.gaussian_literal_sigma && self.gaussian_values.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(Error::config("gaussian_blur kernel sizes must be odd and ≥ 3"));
        }
        if !range_ok(&self.brightness) || !range_ok(&self.contrast) || !range_ok(&self.fog) {
            return Err(Error::config("brightness, contrast and fog ranges must be non-empty"));
        }
        if self.contrast.0 < -1.0 {
            return Err(Error::config("contrast β below −1 inverts the image"));
        }
        if !(self.fog.0 >= 0.0 && self.fog.1 <= 1.0) {
            return Err(Error::config("fog coefficients must lie in [0,1]"));
        }
        let (q0, q1) = self.jpeg_quality;
        if !(1..=100).contains(&q0) || !(1..=100).contains(&q1) || q0 > q1 {
            return Err(Error::config(format!(
                "jpeg quality range {q0}..{q1} must lie in 1..=100"
            )));
        }
        if !(self.spot_radius.0 > 0.0) || !range_ok(&self.spot_radius) {
            return Err(Error::config("light_spots radius range must be positive and non-empty"));
        }
        if !(0.0..=1.0).contains(&self.spot_intensity) {
            return Err(Error::config("light_spots intensity must lie in [0,1]"));
        }
        if self.spot_count.0 > self.spot_count.1 {
            return Err(Error::config("light_spots count range is empty"));
        }
        if !(self.distort >= 0.0 && self.shift >= 0.0) {
            return Err(Error::config("distort and shift magnitudes must be non-negative"));
        }
        Ok(())
    }

    fn scale(&self, h: usize, w: usize) -> f64 {
        if self.reference_size == 0 {
            1.0
        } else {
            h.min(w) as f64 / self.reference_size as f64
        }
    }

    /// Handles `degrade.*` keys. Returns `false` for keys outside that namespace.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        let Some(key) = e.key.strip_prefix("degrade.") else {
            return Ok(false);
        };
        let pair = |e: &Entry| -> Result<(f64, f64)> {
            match kv::list::<f64>(e)?[..] {
                [a, b] => Ok((a, b)),
                _ => Err(Error::config(format!("line {}: `{}` takes two values", e.line, e.key))),
            }
        };
        if let Some(op) = key.strip_suffix(".p") {
            let i = OPERATORS.iter().position(|&o| o == op).ok_or_else(|| kv::unknown(e))?;
            self.probs[i] = kv::value(e)?;
            return Ok(true);
        }
        match key {
            "motion_blur.kernel" => {
                let (a, b) = pair(e)?;
                self.motion_kernel = (a as usize, b as usize);
            }
            "gaussian_blur.values" => self.gaussian_values = kv::list(e)?,
            "gaussian_blur.literal_sigma" => self.gaussian_literal_sigma = kv::value(e)?,
            "brightness.range" => self.brightness = pair(e)?,
            "contrast.range" => self.contrast = pair(e)?,
            "jpeg.quality" => {
                let (a, b) = pair(e)?;
                self.jpeg_quality = (a as u32, b as u32);
            }
            "light_spots.radius" => self.spot_radius = pair(e)?,
            "light_spots.intensity" => self.spot_intensity = kv::value(e)?,
            "light_spots.count" => {
                let (a, b) = pair(e)?;
                self.spot_count = (a as usize, b as usize);
            }
            "fog.coef" => self.fog = pair(e)?,
            "optical_distortion.distort" => self.distort = kv::value(e)?,
            "optical_distortion.shift" => self.shift = kv::value(e)?,
            "reference_size" => self.reference_size = kv::value(e)?,
            _ => return Err(kv::unknown(e)),
        }
        Ok(true)
    }
}

/// The stream for one operator of one sample.
pub fn keyed_rng(seed: u64, index: u64, op: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(OPERATORS.len() as u64).wrapping_add(op as u64));
    rng
}

/// One operator that fired, with its drawn parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Applied {
    MotionBlur { kernel: usize, angle: f64 },
    GaussianBlur { kernel: usize, sigma: f64 },
    Brightness { alpha: f64 },
    Contrast { beta: f64 },
    Jpeg { quality: u32 },
    LightSpots { spots: Vec<Spot>, intensity: f64 },
    Fog { coef: f64 },
    OpticalDistortion { k: f64, shift_y: f64, shift_x: f64 },
}

impl Applied {
    pub fn name(&self) -> &'static str {
        match self {
            Applied::MotionBlur { .. } => OPERATORS[0],
            Applied::GaussianBlur { .. } => OPERATORS[1],
            Applied::Brightness { .. } => OPERATORS[2],
            Applied::Contrast { .. } => OPERATORS[3],
            Applied::Jpeg { .. } => OPERATORS[4],
            Applied::LightSpots { .. } => OPERATORS[5],
            Applied::Fog { .. } => OPERATORS[6],
            Applied::OpticalDistortion { .. } => OPERATORS[7],
        }
    }
}

/// Rounds to the nearest odd integer, at least 3.
fn odd_at_least3(v: f64) -> usize {
    let k = (((v - 1.0) / 2.0).round().max(1.0) as usize) * 2 + 1;
    k.max(3)
}

/// Whether operator `op` fires for sample `index`. This is the first draw
/// of the operator's stream.
pub fn fires(spec: &DegradationSpec, seed: u64, index: u64, op: usize) -> bool {
    keyed_rng(seed, index, op).random::<f64>() < spec.probs[op]
}

fn draw(spec: &DegradationSpec, rng: &mut ChaCha8Rng, op: usize, h: usize, w: usize) -> Applied {
    let scale = spec.scale(h, w);
    let uni = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..=b) };
    match op {
        0 => {
            let (lo, hi) = spec.motion_kernel;
            let k = lo + 2 * rng.random_range(0..=(hi - lo) / 2);
            Applied::MotionBlur {
                kernel: odd_at_least3(k as f64 * scale),
                angle: rng.random_range(0.0..180.0),
            }
        }
        1 => {
            let v = spec.gaussian_values[rng.random_range(0..spec.gaussian_values.len())];
            if spec.gaussian_literal_sigma {
                let sigma = v as f64 * scale;
                Applied::GaussianBlur {
                    kernel: gaussian_size_for_sigma(sigma).max(3),
                    sigma,
                }
            } else {
                Applied::GaussianBlur {
                    kernel: v,
                    sigma: gaussian_sigma(v),
                }
            }
        }
        2 => Applied::Brightness {
            alpha: uni(rng, spec.brightness),
        },
        3 => Applied::Contrast {
            beta: uni(rng, spec.contrast),
        },
        4 => Applied::Jpeg {
            quality: rng.random_range(spec.jpeg_quality.0..=spec.jpeg_quality.1),
        },
        5 => {
            let n = rng.random_range(spec.spot_count.0..=spec.spot_count.1);
            let spots = (0..n)
                .map(|_| Spot {
                    y: rng.random_range(0.0..h as f64),
                    x: rng.random_range(0.0..w as f64),
                    radius: uni(rng, spec.spot_radius) * scale,
                })
                .collect();
            Applied::LightSpots {
                spots,
                intensity: spec.spot_intensity,
            }
        }
        6 => Applied::Fog {
            coef: uni(rng, spec.fog),
        },
        _ => Applied::OpticalDistortion {
            k: uni(rng, (-spec.distort, spec.distort)),
            shift_y: uni(rng, (-spec.shift, spec.shift)),
            shift_x: uni(rng, (-spec.shift, spec.shift)),
        },
    }
}

/// Draws the operators that fire for sample `index` of an `h × w` corpus.
pub fn plan(spec: &DegradationSpec, seed: u64, index: u64, h: usize, w: usize) -> Result<Vec<Applied>> {
    spec.validate()?;
    let mut out = Vec::new();
    for op in 0..OPERATORS.len() {
        let mut rng = keyed_rng(seed, index, op);
        if rng.random::<f64>() < spec.probs[op] {
            out.push(draw(spec, &mut rng, op, h, w));
        }
    }
    Ok(out)
}

/// Applies already-drawn operators in order. The result is marked noisy.
pub fn apply_plan(ops: &[Applied], sample: &Sample) -> Result<Sample> {
    sample.validate()?;
    let mut s = sample.clone();
    for a in ops {
        match a {
            Applied::MotionBlur { kernel, angle } => s.image = motion_blur(&s.image, *kernel, *angle)?,
            Applied::GaussianBlur { kernel, sigma } => s.image = gaussian_blur(&s.image, *kernel, *sigma)?,
            Applied::Brightness { alpha } => s.image = brightness(&s.image, *alpha),
            Applied::Contrast { beta } => s.image = contrast(&s.image, *beta),
            Applied::Jpeg { quality } => s.image = jpeg_compress(&s.image, *quality)?,
            Applied::LightSpots { spots, intensity } => s.image = light_spots(&s.image, spots, *intensity),
            Applied::Fog { coef } => s.image = fog(&s.image, *coef),
            Applied::OpticalDistortion { k, shift_y, shift_x } => {
                let (i, m, d) = optical_distortion(&s.image, &s.mask, s.depth.as_ref(), *k, *shift_y, *shift_x);
                s.image = i;
                s.mask = m;
                s.depth = d;
            }
        }
    }
    s.condition = Condition::Noisy;
    Ok(s)
}

/// `plan` then `apply_plan`.
pub fn apply_pipeline(
    spec: &DegradationSpec,
    sample: &Sample,
    seed: u64,
    index: u64,
) -> Result<(Sample, Vec<Applied>)> {
    let ops = plan(spec, seed, index, sample.height(), sample.width())?;
    let out = apply_plan(&ops, sample)?;
    Ok((out, ops))
}

/// One manifest line: which clean sample, under which key, with what ops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub index: u64,
    pub ops: Vec<Applied>,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest entries always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("bad manifest line: {e}")))
    }

    /// Re-applies the recorded operators to the clean sample.
    pub fn replay(&self, clean: &Sample) -> Result<Sample> {
        if clean.id != self.id {
            return Err(Error::data(format!(
                "manifest entry for {} applied to {}",
                self.id, clean.id
            )));
        }
        apply_plan(&self.ops, clean)
    }

    /// Whether the recorded operators are exactly what `spec` draws for this key.
    pub fn matches_spec(&self, spec: &DegradationSpec, h: usize, w: usize) -> Result<bool> {
        Ok(plan(spec, self.seed, self.index, h, w)? == self.ops)
    }
}

/// Degrades a whole corpus in parallel. Sample `i` uses key `(seed, i)`;
/// the output order matches the input.
pub fn degrade_corpus(spec: &DegradationSpec, clean: &[Sample], seed: u64) -> Result<Vec<(Sample, ManifestEntry)>> {
    spec.validate()?;
    clean
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (noisy, ops) = apply_pipeline(spec, s, seed, i as u64)?;
            let entry = ManifestEntry {
                id: s.id.clone(),
                seed,
                index: i as u64,
                ops,
            };
            Ok((noisy, entry))
        })
        .collect()
}

#[cfg(test)]
mod tests;
