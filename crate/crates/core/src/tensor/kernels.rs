//! Forward and backward kernels for the spatial ops.
//!
//! Kernels parallelize over the batch axis only. Dense convolutions unfold
//! each batch item and call a single-threaded GEMM, so per item the
//! accumulation order does not depend on the thread count. Weight gradients are summed
//! per batch item and then reduced in batch order for the same reason.
//!
//! Forward kernels return the number of multiply-adds they executed. Padded
//! taps are visited (and counted) like any other tap.

use rayon::prelude::*;

use super::{Real, Shape, Tensor};

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Range of output columns whose input column `ox*1 + kx - pad` is in bounds
/// (stride 1 only).
#[inline]
fn valid_cols(kx: usize, pad: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (in_w + pad).saturating_sub(kx).min(out_w);
    (lo, hi.max(lo))
}

#[inline]
fn src_index(o: usize, stride: usize, k: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn dense(xs: Shape, ws: Shape, stride: usize, pad: usize) -> Self {
        let k = ws.height;
        ConvGeom {
            cin: xs.channels,
            cout: ws.batch,
            h: xs.height,
            w: xs.width,
            ho: conv_out_size(xs.height, k, stride, pad),
            wo: conv_out_size(xs.width, k, stride, pad),
            k,
            stride,
            pad,
        }
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Rows of the unfolded input, `Cin·K·K`.
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Every tap of every output, padded ones included.
    fn macs(&self) -> u64 {
        (self.cout * self.rows() * self.out_plane()) as u64
    }

    /// Source offset in the input plane for each `(ky, kx, oy, ox)`, or
    /// `None` where the tap falls in the zero padding.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, Option<usize>)> + '_ {
        let (k, s, p) = (self.k, self.stride, self.pad);
        (0..k * k).flat_map(move |kk| {
            let (ky, kx) = (kk / k, kk % k);
            (0..self.out_plane()).map(move |o| {
                let (oy, ox) = (o / self.wo, o % self.wo);
                let iy = (oy * s + ky) as isize - p as isize;
                let ix = (ox * s + kx) as isize - p as isize;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
                (kk, o, inside.then(|| iy as usize * self.w + ix as usize))
            })
        })
    }
}

/// Unfolds one batch item into a `(Cin·K·K, Ho·Wo)` matrix.
fn im2col<T: Real>(xb: &[T], g: &ConvGeom) -> Vec<T> {
    let (ip, op, kk) = (g.h * g.w, g.out_plane(), g.k * g.k);
    let mut col = vec![T::zero(); g.rows() * op];
    for i in 0..g.cin {
        let plane = &xb[i * ip..(i + 1) * ip];
        for (t, o, src) in g.taps() {
            if let Some(s) = src {
                col[(i * kk + t) * op + o] = plane[s];
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an input item.
fn col2im<T: Real>(col: &[T], dxb: &mut [T], g: &ConvGeom) {
    let (ip, op, kk) = (g.h * g.w, g.out_plane(), g.k * g.k);
    for i in 0..g.cin {
        let plane = &mut dxb[i * ip..(i + 1) * ip];
        for (t, o, src) in g.taps() {
            if let Some(s) = src {
                plane[s] += col[(i * kk + t) * op + o];
            }
        }
    }
}

/// Dense convolution without bias. `w` is `(Cout, Cin, K, K)`.
pub(crate) fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> (Tensor<T>, u64) {
    let g = ConvGeom::dense(x.shape(), w.shape(), stride, pad);
    let xs = x.shape();
    let mut out = Tensor::zeros(Shape::new(xs.batch, g.cout, g.ho, g.wo));
    let per_in = g.cin * g.h * g.w;
    let per_out = g.cout * g.out_plane();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(per_out.max(1))
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &x.data()[b * per_in..(b + 1) * per_in];
            let unfolded;
            let col = if g.pointwise() {
                xb
            } else {
                unfolded = im2col(xb, &g);
                &unfolded
            };
            // out[cout, P] = W[cout, rows] · col[rows, P]
            T::gemm(g.cout, g.rows(), g.out_plane(), wd, false, col, false, ob, false);
        });
    (out, g.macs() * xs.batch as u64)
}

/// Gradients of [`conv2d_forward`] with respect to its input and weight.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeom::dense(x.shape(), w.shape(), stride, pad);
    let per_in = g.cin * g.h * g.w;
    let per_out = g.cout * g.out_plane();
    let (rows, op) = (g.rows(), g.out_plane());
    let wd = w.data();

    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()
            .par_chunks_mut(per_in.max(1))
            .enumerate()
            .for_each(|(b, dxb)| {
                let dyb = &dy.data()[b * per_out..(b + 1) * per_out];
                if g.pointwise() {
                    // dx[cin, P] = Wᵀ[cin, cout] · dy[cout, P]
                    T::gemm(rows, g.cout, op, wd, true, dyb, false, dxb, false);
                } else {
                    let mut dcol = vec![T::zero(); rows * op];
                    T::gemm(rows, g.cout, op, wd, true, dyb, false, &mut dcol, false);
                    col2im(&dcol, dxb, &g);
                }
            });
        dx
    });

    let dw = want_dw.then(|| {
        let batch = x.shape().batch;
        let partials: Vec<Vec<T>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let xb = &x.data()[b * per_in..(b + 1) * per_in];
                let dyb = &dy.data()[b * per_out..(b + 1) * per_out];
                let unfolded;
                let col = if g.pointwise() {
                    xb
                } else {
                    unfolded = im2col(xb, &g);
                    &unfolded
                };
                // dW[cout, rows] = dy[cout, P] · colᵀ[P, rows]
                let mut dwb = vec![T::zero(); wd.len()];
                T::gemm(g.cout, op, rows, dyb, false, col, true, &mut dwb, false);
                dwb
            })
            .collect();
        reduce_partials(w.shape(), partials)
    });

    (dx, dw)
}

fn reduce_partials<T: Real>(shape: Shape, partials: Vec<Vec<T>>) -> Tensor<T> {
    let mut total = Tensor::zeros(shape);
    for p in partials {
        for (t, v) in total.data_mut().iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

struct DwGeom {
    cin: usize,
    cout: usize,
    multiplier: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl DwGeom {
    fn new(xs: Shape, ws: Shape, multiplier: usize, cout: usize) -> Self {
        DwGeom {
            cin: xs.channels,
            cout,
            multiplier,
            h: xs.height,
            w: xs.width,
            k: ws.height,
            pad: ws.height / 2,
        }
    }
}

/// Depthwise convolution with a channel multiplier and "same" zero padding.
///
/// Output channel `o` convolves input channel `o / multiplier` with kernel
/// `o`; only the first `cout` kernels of `w` are used.
pub(crate) fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    multiplier: usize,
    cout: usize,
) -> (Tensor<T>, u64) {
    let g = DwGeom::new(x.shape(), w.shape(), multiplier, cout);
    let xs = x.shape();
    let plane = g.h * g.w;
    let mut out = Tensor::zeros(Shape::new(xs.batch, cout, g.h, g.w));
    let wd = w.data();
    let macs = out
        .data_mut()
        .par_chunks_mut((cout * plane).max(1))
        .enumerate()
        .map(|(b, ob)| {
            let xb = &x.data()[b * g.cin * plane..(b + 1) * g.cin * plane];
            let mut macs = 0u64;
            for o in 0..g.cout {
                let i = o / g.multiplier;
                let in_plane = &xb[i * plane..(i + 1) * plane];
                let out_plane = &mut ob[o * plane..(o + 1) * plane];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wd[(o * g.k + ky) * g.k + kx];
                        let (lo, hi) = valid_cols(kx, g.pad, g.w, g.w);
                        for oy in 0..g.h {
                            macs += g.w as u64;
                            let Some(iy) = src_index(oy, 1, ky, g.pad, g.h) else {
                                continue;
                            };
                            let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                            let out_row = &mut out_plane[oy * g.w..(oy + 1) * g.w];
                            for ox in lo..hi {
                                out_row[ox] += wv * in_row[ox + kx - g.pad];
                            }
                        }
                    }
                }
            }
            macs
        })
        .sum();
    (out, macs)
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    multiplier: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let cout = dy.shape().channels;
    let g = DwGeom::new(x.shape(), w.shape(), multiplier, cout);
    let plane = g.h * g.w;
    let wd = w.data();
    let per_in = g.cin * plane;
    let per_out = g.cout * plane;

    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()
            .par_chunks_mut(per_in.max(1))
            .enumerate()
            .for_each(|(b, dxb)| {
                let dyb = &dy.data()[b * per_out..(b + 1) * per_out];
                for o in 0..g.cout {
                    let i = o / g.multiplier;
                    let dy_plane = &dyb[o * plane..(o + 1) * plane];
                    let dx_plane = &mut dxb[i * plane..(i + 1) * plane];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wd[(o * g.k + ky) * g.k + kx];
                            let (lo, hi) = valid_cols(kx, g.pad, g.w, g.w);
                            for oy in 0..g.h {
                                let Some(iy) = src_index(oy, 1, ky, g.pad, g.h) else {
                                    continue;
                                };
                                let dy_row = &dy_plane[oy * g.w..(oy + 1) * g.w];
                                let dx_row = &mut dx_plane[iy * g.w..(iy + 1) * g.w];
                                for ox in lo..hi {
                                    dx_row[ox + kx - g.pad] += wv * dy_row[ox];
                                }
                            }
                        }
                    }
                }
            });
        dx
    });

    let dw = want_dw.then(|| {
        let partials: Vec<Vec<T>> = (0..x.shape().batch)
            .into_par_iter()
            .map(|b| {
                let xb = &x.data()[b * per_in..(b + 1) * per_in];
                let dyb = &dy.data()[b * per_out..(b + 1) * per_out];
                let mut dwb = vec![T::zero(); wd.len()];
                for o in 0..g.cout {
                    let i = o / g.multiplier;
                    let in_plane = &xb[i * plane..(i + 1) * plane];
                    let dy_plane = &dyb[o * plane..(o + 1) * plane];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let (lo, hi) = valid_cols(kx, g.pad, g.w, g.w);
                            let mut acc = T::zero();
                            for oy in 0..g.h {
                                let Some(iy) = src_index(oy, 1, ky, g.pad, g.h) else {
                                    continue;
                                };
                                let dy_row = &dy_plane[oy * g.w..(oy + 1) * g.w];
                                let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                                for ox in lo..hi {
                                    acc += dy_row[ox] * in_row[ox + kx - g.pad];
                                }
                            }
                            dwb[(o * g.k + ky) * g.k + kx] += acc;
                        }
                    }
                }
                dwb
            })
            .collect();
        reduce_partials(w.shape(), partials)
    });

    (dx, dw)
}

/// One axis of a half-pixel-center bilinear resize: for each output index the
/// two source indices and the weight of the second.
#[derive(Clone, Debug)]
pub(crate) struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTable {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut t = AxisTable {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for d in 0..output {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(src - lo as f64);
        }
        t
    }
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> (Tensor<T>, u64) {
    let xs = x.shape();
    let ty = AxisTable::new(xs.height, out_h);
    let tx = AxisTable::new(xs.width, out_w);
    let mut out = Tensor::zeros(Shape::new(xs.batch, xs.channels, out_h, out_w));
    let in_plane = xs.plane();
    let out_plane = out_h * out_w;
    let macs = out
        .data_mut()
        .par_chunks_mut(out_plane.max(1))
        .enumerate()
        .map(|(bc, op)| {
            let ip = &x.data()[bc * in_plane..(bc + 1) * in_plane];
            let mut macs = 0u64;
            for oy in 0..out_h {
                let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
                let fy = T::of(ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let fx = T::of(tx.frac[ox]);
                    // lerp form keeps constant regions exactly constant
                    let (a, b) = (ip[y0 * xs.width + x0], ip[y0 * xs.width + x1]);
                    let (c, d) = (ip[y1 * xs.width + x0], ip[y1 * xs.width + x1]);
                    let top = a + fx * (b - a);
                    let bottom = c + fx * (d - c);
                    op[oy * out_w + ox] = top + fy * (bottom - top);
                    macs += 4;
                }
            }
            macs
        })
        .sum();
    (out, macs)
}

pub(crate) fn upsample_backward<T: Real>(in_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let ds = dy.shape();
    let ty = AxisTable::new(in_shape.height, ds.height);
    let tx = AxisTable::new(in_shape.width, ds.width);
    let mut dx = Tensor::zeros(in_shape);
    let in_plane = in_shape.plane();
    let out_plane = ds.plane();
    let iw = in_shape.width;
    dx.data_mut()
        .par_chunks_mut(in_plane.max(1))
        .enumerate()
        .for_each(|(bc, dp)| {
            let gp = &dy.data()[bc * out_plane..(bc + 1) * out_plane];
            for oy in 0..ds.height {
                let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
                let fy = T::of(ty.frac[oy]);
                let gy = T::one() - fy;
                for ox in 0..ds.width {
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let fx = T::of(tx.frac[ox]);
                    let gx = T::one() - fx;
                    let d = gp[oy * ds.width + ox];
                    dp[y0 * iw + x0] += gy * gx * d;
                    dp[y0 * iw + x1] += gy * fx * d;
                    dp[y1 * iw + x0] += fy * gx * d;
                    dp[y1 * iw + x1] += fy * fx * d;
                }
            }
        });
    dx
}
