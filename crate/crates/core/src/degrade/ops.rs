//! Individual degradation operators on `(1, C, H, W)` images in `[0, 1]`.
//! Arithmetic is done in f64 and rounded once to f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflect-101 border index (`-1 → 1`, `n → n − 2`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Correlates every channel with a `kh × kw` kernel (row-major), centred,
/// with reflect-101 borders.
pub fn filter2d(img: &Tensor<f32>, kernel: &[f64], kh: usize, kw: usize) -> Tensor<f32> {
    let sh = img.shape();
    let (h, w) = (sh.height, sh.width);
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f64)> = (0..kh)
        .flat_map(|y| (0..kw).map(move |x| (y, x)))
        .map(|(y, x)| (y as isize - ry, x as isize - rx, kernel[y * kw + x]))
        .filter(|t| t.2 != 0.0)
        .collect();
    let mut out = img.clone();
    for c in 0..sh.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, k) in &taps {
                    let sy = reflect101(y as isize + dy, h);
                    let sx = reflect101(x as isize + dx, w);
                    acc += k * img.get(0, c, sy, sx) as f64;
                }
                out.set(0, c, y, x, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn check_odd(kind: &str, k: usize) -> Result<()> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "{kind} kernel size must be odd and ≥ 3, got {k}"
        )));
    }
    Ok(())
}

/// Normalized one-pixel-wide line through the centre of a `size × size`
/// grid at `angle_deg` (0° is horizontal, counter-clockwise positive).
pub fn motion_kernel(size: usize, angle_deg: f64) -> Result<Vec<f64>> {
    check_odd("motion blur", size)?;
    let r = (size / 2) as isize;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut k = vec![0.0; size * size];
    for t in -r..=r {
        let (dx, dy) = if c.abs() >= s.abs() {
            (t, (-(t as f64) * s / c).round() as isize)
        } else {
            ((-(t as f64) * c / s).round() as isize, t)
        };
        let (dx, dy) = if c.abs() >= s.abs() { (dx, dy) } else { (-dx, -dy) };
        k[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

pub fn motion_blur(img: &Tensor<f32>, size: usize, angle_deg: f64) -> Result<Tensor<f32>> {
    let k = motion_kernel(size, angle_deg)?;
    Ok(filter2d(img, &k, size, size))
}

/// `σ = 0.3·((k − 1)/2 − 1) + 0.8`.
pub fn gaussian_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Kernel size covering ±3σ, used when σ is given directly.
pub fn gaussian_size_for_sigma(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

pub fn gaussian_kernel1d(k: usize, sigma: f64) -> Result<Vec<f64>> {
    check_odd("gaussian blur", k)?;
    if !(sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = (k / 2) as f64;
    let mut v: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

/// Separable Gaussian blur: a horizontal then a vertical pass.
pub fn gaussian_blur(img: &Tensor<f32>, k: usize, sigma: f64) -> Result<Tensor<f32>> {
    let g = gaussian_kernel1d(k, sigma)?;
    let sh = img.shape();
    let (h, w) = (sh.height, sh.width);
    let r = (k / 2) as isize;
    let mut tmp = vec![0.0f64; sh.channels * h * w];
    for c in 0..sh.channels {
        for y in 0..h {
            for x in 0..w {
                tmp[(c * h + y) * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get(0, c, y, reflect101(x as isize + i as isize - r, w)) as f64)
                    .sum();
            }
        }
    }
    let mut out = img.clone();
    for c in 0..sh.channels {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = g
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(c * h + reflect101(y as isize + i as isize - r, h)) * w + x])
                    .sum();
                out.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

fn map(img: &Tensor<f32>, f: impl Fn(f64) -> f64) -> Tensor<f32> {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = f(*v as f64).clamp(0.0, 1.0) as f32;
    }
    out
}

/// `clamp(x + α)`.
pub fn brightness(img: &Tensor<f32>, alpha: f64) -> Tensor<f32> {
    map(img, |x| x + alpha)
}

/// `clamp((x − m)·(1 + β) + m)` with `m` the per-channel mean.
pub fn contrast(img: &Tensor<f32>, beta: f64) -> Tensor<f32> {
    let sh = img.shape();
    let plane = sh.plane();
    let mut out = img.clone();
    for (src, dst) in img.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        let m = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s as f64 - m) * (1.0 + beta) + m).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Uniform blend toward white, `(1 − f)·x + f`.
pub fn fog(img: &Tensor<f32>, coef: f64) -> Tensor<f32> {
    map(img, |x| (1.0 - coef) * x + coef)
}

/// Centre and radius of one specular highlight, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
}

/// Blends each spot toward white with opacity
/// `a = intensity·exp(−r² / (2(R/2)²))`, one spot after another.
pub fn light_spots(img: &Tensor<f32>, spots: &[Spot], intensity: f64) -> Tensor<f32> {
    let sh = img.shape();
    let mut out = img.clone();
    for s in spots {
        let sigma = s.radius / 2.0;
        for y in 0..sh.height {
            for x in 0..sh.width {
                let r2 = (y as f64 - s.y).powi(2) + (x as f64 - s.x).powi(2);
                let a = intensity * (-r2 / (2.0 * sigma * sigma)).exp();
                for c in 0..sh.channels {
                    let v = out.get(0, c, y, x) as f64;
                    out.set(0, c, y, x, ((1.0 - a) * v + a).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

/// Source coordinate `(y, x)` for output pixel `(y, x)` under the radial
/// model `c + (p − c)(1 + k r²) + shift·D`, where `D` is the half-diagonal and
/// `r = |p − c| / D`.
fn distort_source(y: f64, x: f64, h: usize, w: usize, k: f64, sy: f64, sx: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let d = ((h * h + w * w) as f64).sqrt() / 2.0;
    let (dy, dx) = (y - cy, x - cx);
    let r2 = (dy * dy + dx * dx) / (d * d);
    let f = 1.0 + k * r2;
    (cy + dy * f + sy * d, cx + dx * f + sx * d)
}

fn bilinear(t: &Tensor<f32>, c: usize, y: f64, x: f64) -> f32 {
    let sh = t.shape();
    let y = y.clamp(0.0, (sh.height - 1) as f64);
    let x = x.clamp(0.0, (sh.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(sh.height - 1), (x0 + 1).min(sh.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let g = |yy, xx| t.get(0, c, yy, xx) as f64;
    let top = g(y0, x0) + fx * (g(y0, x1) - g(y0, x0));
    let bot = g(y1, x0) + fx * (g(y1, x1) - g(y1, x0));
    (top + fy * (bot - top)) as f32
}

fn nearest(t: &Tensor<f32>, c: usize, y: f64, x: f64) -> f32 {
    let sh = t.shape();
    let y = y.round().clamp(0.0, (sh.height - 1) as f64) as usize;
    let x = x.round().clamp(0.0, (sh.width - 1) as f64) as usize;
    t.get(0, c, y, x)
}

/// Radial distortion plus shift, applied jointly: bilinear for the image and
/// depth, nearest-neighbour for the mask. Samples outside the frame clamp to
/// the edge.
pub fn optical_distortion(
    img: &Tensor<f32>,
    mask: &Tensor<f32>,
    depth: Option<&Tensor<f32>>,
    k: f64,
    shift_y: f64,
    shift_x: f64,
) -> (Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>) {
    let sh = img.shape();
    let (h, w) = (sh.height, sh.width);
    let mut oi = img.clone();
    let mut om = mask.clone();
    let mut od = depth.cloned();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = distort_source(y as f64, x as f64, h, w, k, shift_y, shift_x);
            for c in 0..sh.channels {
                oi.set(0, c, y, x, bilinear(img, c, sy, sx));
            }
            om.set(0, 0, y, x, nearest(mask, 0, sy, sx));
            if let (Some(o), Some(d)) = (od.as_mut(), depth) {
                o.set(0, 0, y, x, bilinear(d, 0, sy, sx));
            }
        }
    }
    (oi, om, od)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| r.random())
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn motion_kernel_shapes() {
        let k = motion_kernel(3, 0.0).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(k, vec![0.0, 0.0, 0.0, third, third, third, 0.0, 0.0, 0.0]);
        let v = motion_kernel(5, 90.0).unwrap();
        for y in 0..5 {
            assert_eq!(v[y * 5 + 2], 0.2);
        }
        for size in [3, 7, 15, 29] {
            for a in [0.0, 17.0, 45.0, 91.0, 135.0, 179.9] {
                let k = motion_kernel(size, a).unwrap();
                assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(k.iter().filter(|&&v| v > 0.0).count(), size, "{size} {a}");
            }
        }
        assert!(matches!(motion_kernel(4, 0.0), Err(Error::Config(_))));
        assert!(matches!(motion_kernel(1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn motion_blur_step_edge_ramp() {
        // columns 0..3 black, 3..6 white
        let img = Tensor::from_fn([1, 1, 3, 6], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let out = motion_blur(&img, 3, 0.0).unwrap();
        let row: Vec<f32> = (0..6).map(|x| out.get(0, 0, 1, x)).collect();
        let t = 1.0 / 3.0f32;
        assert_eq!(row, vec![0.0, 0.0, t, 2.0 * t, 1.0, 1.0]);
    }

    #[test]
    fn blurs_fix_constants() {
        let img = Tensor::full([1, 3, 9, 11], 0.37f32);
        for out in [
            motion_blur(&img, 7, 33.0).unwrap(),
            gaussian_blur(&img, 5, gaussian_sigma(5)).unwrap(),
            contrast(&img, 0.15),
        ] {
            assert!(out.max_abs_diff(&img) < 1e-6);
        }
    }

    #[test]
    fn gaussian_delta_and_dense_oracle() {
        for k in [3, 5, 7] {
            let g = gaussian_kernel1d(k, gaussian_sigma(k)).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut img = Tensor::zeros([1, 1, 9, 9]);
            img.set(0, 0, 4, 4, 1.0);
            let out = gaussian_blur(&img, k, gaussian_sigma(k)).unwrap();
            let r = k / 2;
            for y in 0..k {
                let col: f64 = (0..k).map(|x| out.get(0, 0, 4 - r + y, 4 - r + x) as f64).sum();
                assert!((col - g[y]).abs() < 1e-6);
            }
            let mut colsum = 0.0;
            for y in 0..9 {
                colsum += out.get(0, 0, y, 4) as f64;
            }
            assert!((colsum - g[r]).abs() < 1e-6);
        }
        assert!((gaussian_sigma(3) - 0.8).abs() < 1e-12);
        assert!((gaussian_sigma(7) - 1.4).abs() < 1e-12);

        let img = random(9, 9, 4);
        let k = 5;
        let g = gaussian_kernel1d(k, 1.3).unwrap();
        let dense: Vec<f64> = (0..k * k).map(|i| g[i / k] * g[i % k]).collect();
        let sep = gaussian_blur(&img, k, 1.3).unwrap();
        let full = filter2d(&img, &dense, k, k);
        assert!(sep.max_abs_diff(&full) < 1e-6);
    }

    #[test]
    fn photometric_identities() {
        let img = random(6, 7, 5);
        assert_eq!(brightness(&img, 0.0), img);
        assert_eq!(contrast(&img, 0.0), img);
        assert_eq!(fog(&img, 0.0), img);
        let half = Tensor::full([1, 3, 4, 4], 0.5f32);
        assert_eq!(contrast(&half, -0.2), half);
        let black = Tensor::zeros([1, 3, 4, 4]);
        assert!(fog(&black, 0.5).data().iter().all(|&v| v == 0.5));
        let f = fog(&img, 0.63);
        assert!(f.data().iter().zip(img.data()).all(|(a, b)| a >= b));
        assert!(brightness(&img, 0.2).data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn light_spot_centre_and_bounds() {
        let black = Tensor::zeros([1, 3, 32, 32]);
        let out = light_spots(
            &black,
            &[Spot {
                y: 10.0,
                x: 12.0,
                radius: 6.0,
            }],
            0.85,
        );
        assert!(out.get(0, 1, 10, 12) >= 0.85 - 1e-6);
        assert_eq!(light_spots(&black, &[], 0.85), black);
        let img = random(32, 32, 6);
        let spots = [
            Spot {
                y: 3.0,
                x: 4.0,
                radius: 20.0,
            },
            Spot {
                y: 3.5,
                x: 4.5,
                radius: 15.0,
            },
        ];
        assert!(light_spots(&img, &spots, 0.85)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn distortion_identity_and_fixed_centre() {
        let img = random(9, 11, 7);
        let mask = Tensor::from_fn([1, 1, 9, 11], |i| (i % 3 == 0) as u8 as f32);
        let depth = Tensor::from_fn([1, 1, 9, 11], |i| i as f32 / 99.0);
        let (i2, m2, d2) = optical_distortion(&img, &mask, Some(&depth), 0.0, 0.0, 0.0);
        assert_eq!((i2, m2, d2.unwrap()), (img.clone(), mask.clone(), depth.clone()));

        let (i3, m3, _) = optical_distortion(&img, &mask, Some(&depth), 0.05, 0.0, 0.0);
        for c in 0..3 {
            assert_eq!(i3.get(0, c, 4, 5), img.get(0, c, 4, 5));
        }
        assert!(m3.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let (_, m4, _) = optical_distortion(&img, &mask, None, -0.05, 0.03, -0.04);
        assert!(m4.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
