use std::collections::BTreeMap;

use super::kernels;
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::batchnorm`] normalizes.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T: Real> {
    /// Normalize by the batch statistics over `(B, H, W)`.
    Train,
    /// Normalize by the supplied running statistics.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnStats<T: Real> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    /// Folds these statistics into running buffers with [`BN_MOMENTUM`].
    pub fn update_running(&self, mean: &mut Tensor<T>, var: &mut Tensor<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in var.data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        multiplier: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GroupPool {
        x: Var,
        groups: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ScaleGroups {
        x: Var,
        s: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        x: Var,
        target: Var,
        beta: T,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in creation order, so the tape is topologically sorted
/// by construction and [`Graph::backward`] is a single reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    macs: u64,
    track_scopes: bool,
    scope: String,
    scope_macs: BTreeMap<String, u64>,
    kinks: Option<Vec<bool>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            macs: 0,
            track_scopes: false,
            scope: String::new(),
            scope_macs: BTreeMap::new(),
            kinks: None,
        }
    }

    /// Records which side of zero every ReLU input falls on, so callers can
    /// tell whether two evaluations share the same linear piece.
    pub fn record_kinks(&mut self, on: bool) {
        self.kinks = on.then(Vec::new);
    }

    /// Sign pattern of ReLU inputs seen so far, if recording.
    pub fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    /// Attributes subsequent multiply-adds to the scope set by
    /// [`Graph::set_scope`].
    pub fn track_macs_by_scope(&mut self, on: bool) {
        self.track_scopes = on;
    }

    pub fn set_scope(&mut self, name: &str) {
        if self.track_scopes {
            self.scope.clear();
            self.scope.push_str(name);
        }
    }

    /// Multiply-adds executed by forward kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn macs_by_scope(&self) -> &BTreeMap<String, u64> {
        &self.scope_macs
    }

    fn record_macs(&mut self, n: u64) {
        self.macs += n;
        if self.track_scopes {
            *self.scope_macs.entry(self.scope.clone()).or_insert(0) += n;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss passed to [`Graph::backward`] with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(
                !finite_inputs || value.all_finite(),
                "non-finite output from finite inputs"
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_axis(op, "batch", sa.batch, sb.batch)?;
        check_axis(op, "channels", sa.channels, sb.channels)?;
        check_axis(op, "height", sa.height, sb.height)?;
        check_axis(op, "width", sa.width, sb.width)
    }

    /// Dense convolution without bias; `w` is `(Cout, Cin, K, K)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        check_axis("conv2d", "weight in-channels", xs.channels, ws.channels)?;
        check_axis("conv2d", "kernel width", ws.height, ws.width)?;
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if xs.height + 2 * pad < ws.height || xs.width + 2 * pad < ws.width {
            return Err(Error::config(format!(
                "conv2d kernel {}x{} larger than padded input {}",
                ws.height, ws.width, xs
            )));
        }
        let (out, macs) = kernels::conv2d_forward(self.value(x), self.value(w), stride, pad);
        self.record_macs(macs);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// 1×1 convolution: `out[b,o] = Σ_i w[o,i]·x[b,i]`.
    pub fn conv2d_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w);
        check_axis("conv2d_pointwise", "kernel height", 1, ws.height)?;
        check_axis("conv2d_pointwise", "kernel width", 1, ws.width)?;
        self.conv2d(x, w, 1, 0)
    }

    /// Depthwise convolution with "same" zero padding; `w` is `(C, 1, K, K)`.
    pub fn conv2d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = self.shape(x).channels;
        self.depthwise_multiplier(x, w, 1, c)
    }

    /// Depthwise convolution where each input channel feeds `multiplier`
    /// consecutive output kernels, truncated to the first `cout` outputs.
    pub fn depthwise_multiplier(&mut self, x: Var, w: Var, multiplier: usize, cout: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.height % 2 == 0 {
            return Err(Error::config(format!(
                "depthwise kernel size must be odd, got {}",
                ws.height
            )));
        }
        check_axis("conv2d_depthwise", "kernel width", ws.height, ws.width)?;
        check_axis("conv2d_depthwise", "weight in-channels", 1, ws.channels)?;
        if multiplier == 0 {
            return Err(Error::config("depthwise multiplier must be positive"));
        }
        check_axis(
            "conv2d_depthwise",
            "weight out-channels",
            xs.channels * multiplier,
            ws.batch,
        )?;
        if cout == 0 || cout > ws.batch {
            return Err(Error::config(format!(
                "depthwise output channels {cout} outside 1..={}",
                ws.batch
            )));
        }
        let (out, macs) = kernels::depthwise_forward(self.value(x), self.value(w), multiplier, cout);
        self.record_macs(macs);
        Ok(self.push(out, Op::Depthwise { x, w, multiplier }, &[x, w]))
    }

    /// Batch normalization with affine `gamma`, `beta` of shape `(1, C, 1, 1)`.
    ///
    /// In training mode the returned statistics should be folded into the
    /// running buffers by the caller.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xs = self.shape(x);
        let c = xs.channels;
        check_axis("batchnorm", "gamma channels", c, self.shape(gamma).numel())?;
        check_axis("batchnorm", "beta channels", c, self.shape(beta).numel())?;
        let plane = xs.plane();
        let n = xs.batch * plane;
        let eps = T::of(BN_EPS);
        let xv = self.value(x).data();

        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..xs.batch {
                        let o = (b * c + ch) * plane;
                        for &v in &xv[o..o + plane] {
                            s += v;
                        }
                    }
                    let m = s / T::of(n as f64);
                    let mut ss = T::zero();
                    for b in 0..xs.batch {
                        let o = (b * c + ch) * plane;
                        for &v in &xv[o..o + plane] {
                            ss += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / T::of(n as f64);
                }
                let unbiased = if n > 1 {
                    let f = T::of(n as f64 / (n - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                check_axis("batchnorm", "running mean channels", c, mean.len())?;
                check_axis("batchnorm", "running var channels", c, var.len())?;
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };

        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(xs);
        let od = out.data_mut();
        for b in 0..xs.batch {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for i in o..o + plane {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    od[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let train = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(T::zero()));
        if let Some(k) = self.kinks.as_mut() {
            k.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = map(self.value(x), T::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// Bilinear resize with half-pixel centers (align-corners off).
    ///
    /// Resizing to the current size returns `x` unchanged.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x);
        if height == 0 || width == 0 {
            return Err(Error::config("upsample target dimensions must be positive"));
        }
        if height < xs.height || width < xs.width {
            return Err(Error::config(format!(
                "upsample target {height}x{width} smaller than input {}x{}",
                xs.height, xs.width
            )));
        }
        if height == xs.height && width == xs.width {
            return Ok(x);
        }
        let (out, macs) = kernels::upsample_forward(self.value(x), height, width);
        self.record_macs(macs);
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }

    /// Stacks inputs along channels in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            check_axis("concat_channels", "batch", s0.batch, s.batch)?;
            check_axis("concat_channels", "height", s0.height, s.height)?;
            check_axis("concat_channels", "width", s0.width, s.width)?;
            channels += s.channels;
        }
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.batch * channels * plane);
        for b in 0..s0.batch {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().channels * plane;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(Shape::new(s0.batch, channels, s0.height, s0.width), data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// Output channel `c` reads input channel `perm[c]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        check_axis("permute_channels", "permutation length", xs.channels, perm.len())?;
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config("channel permutation is not a bijection"));
            }
        }
        let plane = xs.plane();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(xs);
        for b in 0..xs.batch {
            for (c, &p) in perm.iter().enumerate() {
                let dst = (b * xs.channels + c) * plane;
                let from = (b * xs.channels + p) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Interleaves `groups` channel groups: reshape `(G, C/G)`, transpose,
    /// flatten.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let perm = shuffle_permutation(self.shape(x).channels, groups)?;
        self.permute_channels(x, &perm)
    }

    /// Inverse of [`Graph::channel_shuffle`] with the same group count.
    pub fn channel_unshuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let perm = inverse_permutation(&shuffle_permutation(self.shape(x).channels, groups)?);
        self.permute_channels(x, &perm)
    }

    /// Mean over `(C/G, H, W)` for each of `groups` channel groups, giving
    /// `(B, G, 1, 1)`.
    pub fn group_avgpool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x);
        check_groups("group_avgpool", xs.channels, groups)?;
        let span = xs.channels / groups * xs.plane();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(Shape::new(xs.batch, groups, 1, 1));
        for (o, chunk) in out.data_mut().iter_mut().zip(src.chunks(span)) {
            let s: T = chunk.iter().copied().sum();
            *o = s / T::of(span as f64);
        }
        Ok(self.push(out, Op::GroupPool { x, groups }, &[x]))
    }

    /// Fully connected layer on `(B, Fin, 1, 1)` features.
    ///
    /// `w` is `(Fout, Fin, 1, 1)` and `b`, when given, `(1, Fout, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        check_axis("linear", "input height", 1, xs.height)?;
        check_axis("linear", "input width", 1, xs.width)?;
        check_axis("linear", "fan-in", ws.channels, xs.channels)?;
        let (fin, fout) = (ws.channels, ws.batch);
        if let Some(b) = b {
            check_axis("linear", "bias length", fout, self.shape(b).numel())?;
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = Tensor::zeros(Shape::new(xs.batch, fout, 1, 1));
        let mut macs = 0;
        for bi in 0..xs.batch {
            for o in 0..fout {
                let mut acc = T::zero();
                for i in 0..fin {
                    acc += wd[o * fin + i] * xd[bi * fin + i];
                    macs += 1;
                }
                if let Some(bd) = bd {
                    acc += bd[o];
                }
                out.data_mut()[bi * fout + o] = acc;
            }
        }
        self.record_macs(macs);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Multiplies each channel group of `x` by a scale from `s`.
    ///
    /// `s` is `(B, G, 1, 1)` for per-sample scales or `(1, G, 1, 1)` to share
    /// them across the batch.
    pub fn scale_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss.batch != 1 && ss.batch != xs.batch {
            return Err(Error::dim("scale_groups", "scale batch", xs.batch, ss.batch));
        }
        check_axis("scale_groups", "scale height", 1, ss.height)?;
        check_axis("scale_groups", "scale width", 1, ss.width)?;
        let groups = ss.channels;
        check_groups("scale_groups", xs.channels, groups)?;
        let cg = xs.channels / groups;
        let plane = xs.plane();
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = Tensor::zeros(xs);
        for b in 0..xs.batch {
            let sb = if ss.batch == 1 { 0 } else { b };
            for c in 0..xs.channels {
                let scale = sd[sb * groups + c / cg];
                let o = (b * xs.channels + c) * plane;
                for i in o..o + plane {
                    out.data_mut()[i] = xd[i] * scale;
                }
            }
        }
        Ok(self.push(out, Op::ScaleGroups { x, s }, &[x, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = map(self.value(x), |v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let out = map(self.value(x), |v| v * c);
        self.push(out, Op::MulScalar(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean Huber-style loss: `r²/(2β)` for `|r| < β`, else `|r| − β/2`.
    pub fn smooth_l1(&mut self, x: Var, target: Var, beta: T) -> Result<Var> {
        self.same_shape("smooth_l1", x, target)?;
        let (xv, tv) = (self.value(x), self.value(target));
        let half = T::of(0.5);
        let total: T = xv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&a, &b)| {
                let r = (a - b).abs();
                if r < beta {
                    half * r * r / beta
                } else {
                    r - half * beta
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::of(xv.len() as f64));
        Ok(self.push(out, Op::SmoothL1 { x, target, beta }, &[x, target]))
    }

    /// Propagates gradients of the scalar `loss` to every node that requires
    /// them. The tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {ls}")));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, &|d| add_into(d, dx.data()));
                }
                if let Some(dw) = dw {
                    acc(*w, &|d| add_into(d, dw.data()));
                }
            }
            Op::Depthwise { x, w, multiplier } => {
                let (dx, dw) = kernels::depthwise_backward(val(*x), val(*w), g, *multiplier, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, &|d| add_into(d, dx.data()));
                }
                if let Some(dw) = dw {
                    acc(*w, &|d| add_into(d, dw.data()));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = val(*x).shape();
                let (c, plane) = (s.channels, s.plane());
                let n = T::of((s.batch * plane) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..s.batch {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        for i in o..o + plane {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let gamma_v = val(*gamma).data();
                acc(*x, &|d| {
                    for b in 0..s.batch {
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            let k = gamma_v[ch] * inv_std[ch];
                            for i in o..o + plane {
                                d[i] += if *train {
                                    k * (gd[i] - sum_dy[ch] / n - xhat[i] * sum_dy_xhat[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                });
                acc(*gamma, &|d| add_into(d, &sum_dy_xhat));
                acc(*beta, &|d| add_into(d, &sum_dy));
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &|d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[id].value.data();
                acc(*x, &|d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Exp(x) => {
                let y = nodes[id].value.data();
                acc(*x, &|d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Upsample(x) => {
                if wants(*x) {
                    let dx = kernels::upsample_backward(val(*x).shape(), g);
                    acc(*x, &|d| add_into(d, dx.data()));
                }
            }
            Op::Concat(xs) => {
                let s = g.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &v in xs {
                    let cv = val(v).shape().channels;
                    acc(v, &|d| {
                        for b in 0..s.batch {
                            let src = (b * s.channels + offset) * plane;
                            let dst = b * cv * plane;
                            add_into(&mut d[dst..dst + cv * plane], &gd[src..src + cv * plane]);
                        }
                    });
                    offset += cv;
                }
            }
            Op::Permute { x, perm } => {
                let s = g.shape();
                let plane = s.plane();
                acc(*x, &|d| {
                    for b in 0..s.batch {
                        for (c, &p) in perm.iter().enumerate() {
                            let src = (b * s.channels + c) * plane;
                            let dst = (b * s.channels + p) * plane;
                            add_into(&mut d[dst..dst + plane], &gd[src..src + plane]);
                        }
                    }
                });
            }
            Op::GroupPool { x, groups } => {
                let s = val(*x).shape();
                let span = s.channels / groups * s.plane();
                let inv = T::one() / T::of(span as f64);
                acc(*x, &|d| {
                    for (chunk, &gv) in d.chunks_mut(span).zip(gd) {
                        for v in chunk {
                            *v += gv * inv;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = val(*w).shape();
                let (fin, fout) = (ws.channels, ws.batch);
                let batch = val(*x).shape().batch;
                let (xd, wd) = (val(*x).data(), val(*w).data());
                acc(*x, &|d| {
                    for bi in 0..batch {
                        for i in 0..fin {
                            let mut a = T::zero();
                            for o in 0..fout {
                                a += wd[o * fin + i] * gd[bi * fout + o];
                            }
                            d[bi * fin + i] += a;
                        }
                    }
                });
                acc(*w, &|d| {
                    for o in 0..fout {
                        for i in 0..fin {
                            let mut a = T::zero();
                            for bi in 0..batch {
                                a += gd[bi * fout + o] * xd[bi * fin + i];
                            }
                            d[o * fin + i] += a;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &|d| {
                        for bi in 0..batch {
                            add_into(d, &gd[bi * fout..(bi + 1) * fout]);
                        }
                    });
                }
            }
            Op::ScaleGroups { x, s } => {
                let xs = val(*x).shape();
                let ss = val(*s).shape();
                let groups = ss.channels;
                let cg = xs.channels / groups;
                let plane = xs.plane();
                let (xd, sd) = (val(*x).data(), val(*s).data());
                acc(*x, &|d| {
                    for b in 0..xs.batch {
                        let sb = if ss.batch == 1 { 0 } else { b };
                        for c in 0..xs.channels {
                            let scale = sd[sb * groups + c / cg];
                            let o = (b * xs.channels + c) * plane;
                            for i in o..o + plane {
                                d[i] += gd[i] * scale;
                            }
                        }
                    }
                });
                acc(*s, &|d| {
                    for b in 0..xs.batch {
                        let sb = if ss.batch == 1 { 0 } else { b };
                        for c in 0..xs.channels {
                            let o = (b * xs.channels + c) * plane;
                            let mut a = T::zero();
                            for i in o..o + plane {
                                a += gd[i] * xd[i];
                            }
                            d[sb * groups + c / cg] += a;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| {
                    for (d, &gv) in d.iter_mut().zip(gd) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc(*b, &|d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(gd).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += gv / y;
                    }
                });
                acc(*b, &|d| {
                    for (((d, &gv), &x), &y) in d.iter_mut().zip(gd).zip(av).zip(bv) {
                        *d -= gv * x / (y * y);
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &|d| add_into(d, gd)),
            Op::MulScalar(x, c) => {
                acc(*x, &|d| {
                    for (d, &gv) in d.iter_mut().zip(gd) {
                        *d += gv * *c;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                acc(*x, &|d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(x) => {
                let gv = gd[0] / T::of(val(*x).len() as f64);
                acc(*x, &|d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::SmoothL1 { x, target, beta } => {
                let (xv, tv) = (val(*x).data(), val(*target).data());
                let scale = gd[0] / T::of(xv.len() as f64);
                let slope = |a: T, b: T| {
                    let r = a - b;
                    if r.abs() < *beta {
                        r / *beta
                    } else {
                        r.signum()
                    }
                };
                acc(*x, &|d| {
                    for ((d, &a), &b) in d.iter_mut().zip(xv).zip(tv) {
                        *d += scale * slope(a, b);
                    }
                });
                acc(*target, &|d| {
                    for ((d, &a), &b) in d.iter_mut().zip(xv).zip(tv) {
                        *d -= scale * slope(a, b);
                    }
                });
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_axis(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(op, axis, expected, actual))
    }
}

fn check_groups(op: &str, channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "{op}: {channels} channels not divisible into {groups} groups"
        )));
    }
    Ok(())
}

/// Source channel for each output channel of a `groups`-way shuffle:
/// output `j·G + g` reads input `g·(C/G) + j`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    check_groups("channel_shuffle", channels, groups)?;
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for j in 0..per {
        for g in 0..groups {
            perm[j * groups + g] = g * per + j;
        }
    }
    Ok(perm)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
