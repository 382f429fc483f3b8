//! Procedural stand-in corpus: reddish blobs on textured pink tissue.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::STRIDE;
use crate::sample::{quantize8, Condition, Sample};
use crate::tensor::Tensor;

struct Blob {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    rot: f64,
    /// Boundary wobble: amplitude and phase for harmonics 2 and 3.
    wobble: [(f64, f64); 2],
    tint: [f64; 3],
}

impl Blob {
    fn draw(r: &mut ChaCha8Rng, s: f64) -> Self {
        Blob {
            cy: r.random_range(0.25..0.75) * s,
            cx: r.random_range(0.25..0.75) * s,
            ay: r.random_range(0.1..0.22) * s,
            ax: r.random_range(0.1..0.22) * s,
            rot: r.random_range(0.0..PI),
            wobble: [
                (r.random_range(0.0..0.12), r.random_range(0.0..2.0 * PI)),
                (r.random_range(0.0..0.08), r.random_range(0.0..2.0 * PI)),
            ],
            tint: [
                r.random_range(0.5..0.62),
                r.random_range(0.16..0.26),
                r.random_range(0.16..0.26),
            ],
        }
    }

    /// Normalized radius: < 1 inside the blob.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.rot.sin_cos();
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        let theta = v.atan2(u);
        let edge = 1.0
            + self.wobble[0].0 * (2.0 * theta + self.wobble[0].1).sin()
            + self.wobble[1].0 * (3.0 * theta + self.wobble[1].1).sin();
        (u * u + v * v).sqrt() / edge
    }
}

/// Generates sample `index` of the corpus keyed by `seed`.
pub fn synth_sample(size: usize, seed: u64, index: u64) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(STRIDE) {
        return Err(Error::config(format!(
            "synthetic image size must be a positive multiple of {STRIDE}, got {size}"
        )));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    let s = size as f64;
    let n = r.random_range(1..=3);
    let blobs: Vec<Blob> = (0..n).map(|_| Blob::draw(&mut r, s)).collect();
    let base = [
        r.random_range(0.78..0.9),
        r.random_range(0.5..0.62),
        r.random_range(0.45..0.56),
    ];
    // low-frequency folds plus fine grain
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(1.0..4.0) * 2.0 * PI / s,
                r.random_range(0.0..PI),
                r.random_range(0.0..2.0 * PI),
                r.random_range(0.02..0.05),
            )
        })
        .collect();
    let lumen = (r.random_range(0.0..s), r.random_range(0.0..s));

    let mut image = Tensor::zeros([1, 3, size, size]);
    let mut mask = Tensor::zeros([1, 1, size, size]);
    let mut depth = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let tex: f64 = waves
                .iter()
                .map(|&(f, a, p, amp)| amp * (f * (fx * a.cos() + fy * a.sin()) + p).sin())
                .sum::<f64>()
                + r.random_range(-0.02..0.02);
            let mut rgb = base.map(|b| b + tex);
            let dist = ((fy - lumen.0).powi(2) + (fx - lumen.1).powi(2)).sqrt() / (s * std::f64::consts::SQRT_2);
            let mut d = 0.35 + 0.6 * (1.0 - dist);
            for b in &blobs {
                let rho = b.rho(fy, fx);
                if rho < 1.0 {
                    mask.set(0, 0, y, x, 1.0);
                    let dome = 1.0 - rho * rho;
                    rgb = [0, 1, 2].map(|c| b.tint[c] + 0.12 * dome + tex * 0.5);
                }
                // protrusions sit closer to the camera
                d -= 0.3 * (1.0 - rho * rho).max(0.0);
            }
            for (c, v) in rgb.iter().enumerate() {
                image.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
            depth[y * size + x] = d;
        }
    }
    let (lo, hi) = depth
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let depth = Tensor::from_fn([1, 1, size, size], |i| ((depth[i] - lo) / (hi - lo).max(1e-12)) as f32);
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::data(format!("synthetic sample {index} has an empty mask")));
    }
    Sample::new(
        format!("{index:05}"),
        quantize8(&image),
        mask,
        Some(quantize8(&depth)),
        Condition::Clean,
    )
}

/// `n` samples of `size × size`, deterministic in `(seed, index)`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n as u64).map(|i| synth_sample(size, seed, i)).collect()
}
