//! JPEG-style quantization artifacts: 8×8 block DCT, quantization with the
//! standard luminance table under the IJG quality law, and reconstruction.
//! No chroma subsampling or entropy coding; only the quantization loss is
//! modelled.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard luminance quantization table, row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG percentage scale: `5000/q` below 50, `200 − 2q` otherwise.
pub fn quality_scale(quality: u32) -> Result<u32> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    Ok(if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    })
}

/// `q' = clamp(⌊(Q·scale + 50) / 100⌋, 1, 255)` for every table entry.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    let scale = quality_scale(quality)?;
    let mut out = [0.0; 64];
    for (o, &q) in out.iter_mut().zip(&LUMA_TABLE) {
        *o = ((q as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let a = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * (((2 * x + 1) * u) as f64 * PI / 16.0).cos();
            }
        }
        c
    })
}

/// Orthonormal 2-D DCT-II of a row-major 8×8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| c[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * c[v][x]).sum();
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| c[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * c[v][x]).sum();
        }
    }
    out
}

/// Quantizes and reconstructs one block of level-shifted samples (0–255
/// scale minus 128).
pub fn roundtrip_block(block: &[f64; 64], table: &[f64; 64]) -> [f64; 64] {
    let mut coef = dct8x8(block);
    for (c, q) in coef.iter_mut().zip(table) {
        *c = (*c / q).round() * q;
    }
    idct8x8(&coef)
}

/// Applies block quantization to every channel of a `(1, C, H, W)` image
/// in `[0, 1]`. Partial edge blocks are padded by edge replication.
pub fn jpeg_compress(img: &Tensor<f32>, quality: u32) -> Result<Tensor<f32>> {
    let table = quant_table(quality)?;
    let sh = img.shape();
    let (h, w) = (sh.height, sh.width);
    let mut out = img.clone();
    for c in 0..sh.channels {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let v = img.get(0, c, (by + y).min(h - 1), (bx + x).min(w - 1)) as f64;
                        block[y * 8 + x] = v * 255.0 - 128.0;
                    }
                }
                let rec = roundtrip_block(&block, &table);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let v = ((rec[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                        out.set(0, c, by + y, bx + x, v as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct evaluation of the DCT-II double sum.
    fn naive_dct(block: &[f64; 64]) -> [f64; 64] {
        let mut out = [0.0; 64];
        for u in 0..8 {
            for v in 0..8 {
                let au = if u == 0 { 1.0 / 8f64.sqrt() } else { 0.5 };
                let av = if v == 0 { 1.0 / 8f64.sqrt() } else { 0.5 };
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        s += block[y * 8 + x]
                            * ((2 * y + 1) as f64 * u as f64 * PI / 16.0).cos()
                            * ((2 * x + 1) as f64 * v as f64 * PI / 16.0).cos();
                    }
                }
                out[u * 8 + v] = au * av * s;
            }
        }
        out
    }

    #[test]
    fn quality_law() {
        assert_eq!(quality_scale(50).unwrap(), 100);
        let t = quant_table(50).unwrap();
        assert!(t.iter().zip(&LUMA_TABLE).all(|(a, &b)| *a == b as f64));
        assert_eq!(quality_scale(30).unwrap(), 166);
        assert_eq!(quality_scale(70).unwrap(), 60);
        assert_eq!(quant_table(100).unwrap(), [1.0; 64]);
        // (16·166 + 50) / 100 = 27.06
        assert_eq!(quant_table(30).unwrap()[0], 27.0);
        assert!(quality_scale(0).is_err() && quality_scale(101).is_err());
    }

    #[test]
    fn dct_matches_double_sum_and_inverts() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let block: [f64; 64] = std::array::from_fn(|_| r.random_range(-128.0..128.0));
        let fast = dct8x8(&block);
        let slow = naive_dct(&block);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
        let back = idct8x8(&fast);
        for (a, b) in back.iter().zip(&block) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_block_has_only_dc() {
        let block = [37.0; 64];
        let coef = dct8x8(&block);
        assert!((coef[0] - 37.0 * 8.0).abs() < 1e-9);
        assert!(coef[1..].iter().all(|c| c.abs() < 1e-9));
        let table = quant_table(40).unwrap();
        let rec = roundtrip_block(&block, &table);
        // DC error ≤ q/2 spreads evenly as q/16 per pixel
        for v in rec {
            assert!((v - 37.0).abs() <= table[0] / 2.0 / 8.0 + 1e-9);
        }
    }

    #[test]
    fn quality_100_is_near_lossless() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn([1, 3, 8, 8], |_| r.random::<f32>());
        let out = jpeg_compress(&img, 100).unwrap();
        assert!(out.max_abs_diff(&img) < 0.02);
        assert!(jpeg_compress(&img, 0).is_err());
    }

    #[test]
    fn lower_quality_loses_more() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn([1, 3, 19, 21], |_| r.random::<f32>());
        let err = |q| jpeg_compress(&img, q).unwrap().max_abs_diff(&img);
        assert!(err(30) > err(90));
        let out = jpeg_compress(&img, 30).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
