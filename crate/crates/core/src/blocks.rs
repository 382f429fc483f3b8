//! Decoder building blocks: Ghost Factorization Module (GFM), Interleaved
//! Shuffle Fusion (ISF) and Dynamic Group Gating (DGG).
//!
//! Each block owns a parameter-name prefix. `register` adds its parameters to
//! a [`ParamStore`], `forward` records it on a [`Session`], and `costs` lists
//! its per-layer parameter and MAC counts for a given spatial size.

use rand::Rng;

use crate::accounting::{conv_macs, linear_macs, LayerRow};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Shape, Tensor, Var};

/// Default group count for ISF and DGG.
pub const DEFAULT_GROUPS: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GfmConfig {
    pub c_in: usize,
    /// Total output channels across both streams.
    pub c_out: usize,
    pub split_ratio: usize,
    pub dw_kernel: usize,
}

impl GfmConfig {
    pub fn new(c_in: usize, c_out: usize, split_ratio: usize, dw_kernel: usize) -> Result<Self> {
        let cfg = GfmConfig {
            c_in,
            c_out,
            split_ratio,
            dw_kernel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 {
            return Err(Error::config("GFM input channels must be positive"));
        }
        if self.split_ratio == 0 {
            return Err(Error::config("GFM split ratio must be a positive integer"));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "GFM depthwise kernel must be odd, got {}",
                self.dw_kernel
            )));
        }
        if self.primary() == 0 || self.auxiliary() == 0 {
            return Err(Error::config(format!(
                "GFM split of {} channels at ratio {} leaves an empty stream",
                self.c_out, self.split_ratio
            )));
        }
        Ok(())
    }

    /// Channels of the pointwise (primary) stream, `⌊c_out / r⌋`.
    pub fn primary(&self) -> usize {
        self.c_out / self.split_ratio
    }

    /// Channels of the depthwise (auxiliary) stream, `c_out − C_p`.
    pub fn auxiliary(&self) -> usize {
        self.c_out.saturating_sub(self.primary())
    }

    /// Depthwise channel multiplier, `⌈C_a / C_p⌉`.
    pub fn multiplier(&self) -> usize {
        self.auxiliary().div_ceil(self.primary())
    }

    /// Closed-form learnable scalar count:
    /// `Cin·C_p + C_p·m·K² + 2·(C_p + C_a)`.
    pub fn param_count(&self) -> u64 {
        let (cp, ca, k) = (self.primary(), self.auxiliary(), self.dw_kernel);
        (self.c_in * cp + cp * self.multiplier() * k * k + 2 * (cp + ca)) as u64
    }

    /// Parameters of a dense K×K conv with BN over the same shape.
    pub fn dense_param_count(&self) -> u64 {
        (self.c_in * self.c_out * self.dw_kernel * self.dw_kernel + 2 * self.c_out) as u64
    }
}

/// Ghost Factorization Module: `X_p = ReLU(BN(PW(X)))`,
/// `X_a = ReLU(BN(DW(X_p)))`, returned as separate streams.
#[derive(Clone, Debug)]
pub struct Gfm {
    prefix: String,
    cfg: GfmConfig,
}

impl Gfm {
    pub fn new(prefix: impl Into<String>, cfg: GfmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Gfm {
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn config(&self) -> &GfmConfig {
        &self.cfg
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let c = &self.cfg;
        let (cp, k) = (c.primary(), c.dw_kernel);
        let p = &self.prefix;
        store.add_weight(&format!("{p}.pw.weight"), Shape::new(cp, c.c_in, 1, 1), c.c_in, rng)?;
        store.add_batchnorm(&format!("{p}.pw.bn"), cp)?;
        store.add_weight(
            &format!("{p}.dw.weight"),
            Shape::new(cp * c.multiplier(), 1, k, k),
            k * k,
            rng,
        )?;
        store.add_batchnorm(&format!("{p}.dw.bn"), c.auxiliary())
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, '_, T>, x: Var) -> Result<(Var, Var)> {
        let got = s.graph.shape(x).channels;
        if got != self.cfg.c_in {
            return Err(Error::dim("gfm_forward", "channels", self.cfg.c_in, got));
        }
        let p = &self.prefix;
        let xp = s.pointwise(&format!("{p}.pw"), x)?;
        let xp = s.batchnorm(&format!("{p}.pw.bn"), xp)?;
        let xp = s.graph.relu(xp);
        let xa = s.depthwise(&format!("{p}.dw"), xp, self.cfg.multiplier(), self.cfg.auxiliary())?;
        let xa = s.batchnorm(&format!("{p}.dw.bn"), xa)?;
        let xa = s.graph.relu(xa);
        Ok((xp, xa))
    }

    /// Both streams concatenated, `[X_p, X_a]`.
    pub fn forward_concat<T: Real>(&self, s: &mut Session<'_, '_, T>, x: Var) -> Result<Var> {
        let (xp, xa) = self.forward(s, x)?;
        s.graph.concat_channels(&[xp, xa])
    }

    pub fn costs(&self, height: usize, width: usize) -> Vec<LayerRow> {
        let c = &self.cfg;
        let (cp, ca, k) = (c.primary(), c.auxiliary(), c.dw_kernel);
        let p = &self.prefix;
        vec![
            LayerRow::new(
                format!("{p}.pw"),
                (c.c_in * cp) as u64,
                conv_macs(cp, c.c_in, 1, 1, height, width),
            ),
            LayerRow::new(format!("{p}.pw.bn"), 2 * cp as u64, 0),
            LayerRow::new(
                format!("{p}.dw"),
                (cp * c.multiplier() * k * k) as u64,
                conv_macs(ca, ca, ca, k, height, width),
            ),
            LayerRow::new(format!("{p}.dw.bn"), 2 * ca as u64, 0),
        ]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct IsfConfig {
    pub channels: usize,
    pub groups: usize,
    pub dw_kernel: usize,
}

impl IsfConfig {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        let cfg = IsfConfig {
            channels,
            groups,
            dw_kernel: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "ISF: {} channels not divisible into {} groups",
                self.channels, self.groups
            )));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::config("ISF depthwise kernel must be odd"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        (self.channels * self.dw_kernel * self.dw_kernel + self.groups) as u64
    }
}

/// Interleaved Shuffle Fusion: `F' = F + expand(γ) ⊙ DW(Shuffle_G(F))`.
///
/// The depthwise conv is bare (no BN or activation) and `γ` starts at zero,
/// so a freshly initialized block is the identity.
#[derive(Clone, Debug)]
pub struct Isf {
    prefix: String,
    cfg: IsfConfig,
}

impl Isf {
    pub fn new(prefix: impl Into<String>, cfg: IsfConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Isf {
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (c, k, p) = (self.cfg.channels, self.cfg.dw_kernel, &self.prefix);
        store.add_weight(&format!("{p}.dw.weight"), Shape::new(c, 1, k, k), k * k, rng)?;
        store.insert_param(format!("{p}.gamma"), Tensor::zeros(Shape::vector(self.cfg.groups)))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, '_, T>, f: Var) -> Result<Var> {
        let got = s.graph.shape(f).channels;
        if got != self.cfg.channels {
            return Err(Error::dim("isf_forward", "channels", self.cfg.channels, got));
        }
        let p = &self.prefix;
        s.graph.set_scope(p);
        let shuffled = s.graph.channel_shuffle(f, self.cfg.groups)?;
        let refined = s.depthwise(&format!("{p}.dw"), shuffled, 1, self.cfg.channels)?;
        let gamma = s.param(&format!("{p}.gamma"))?;
        let scaled = s.graph.scale_groups(refined, gamma)?;
        s.graph.add(f, scaled)
    }

    pub fn costs(&self, height: usize, width: usize) -> Vec<LayerRow> {
        let (c, k, p) = (self.cfg.channels, self.cfg.dw_kernel, &self.prefix);
        vec![
            LayerRow::new(
                format!("{p}.dw"),
                (c * k * k) as u64,
                conv_macs(c, c, c, k, height, width),
            ),
            LayerRow::new(p.clone(), self.cfg.groups as u64, 0),
        ]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DggConfig {
    pub channels: usize,
    pub groups: usize,
}

impl DggConfig {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        let cfg = DggConfig { channels, groups };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "DGG: {} channels not divisible into {} groups",
                self.channels, self.groups
            )));
        }
        Ok(())
    }

    /// Channels per group, `C / G`.
    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    pub fn param_count(&self) -> u64 {
        (self.groups * self.groups + self.groups) as u64
    }
}

/// Dynamic Group Gating: per-group descriptors `z` (mean over channels and
/// space), gates `w = σ(φ(z))`, output `X + X ⊙ w↑`.
///
/// `φ` is a single zero-initialized linear layer, so gates start at 0.5.
#[derive(Clone, Debug)]
pub struct Dgg {
    prefix: String,
    cfg: DggConfig,
}

impl Dgg {
    pub fn new(prefix: impl Into<String>, cfg: DggConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Dgg {
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let (g, p) = (self.cfg.groups, &self.prefix);
        store.insert_param(format!("{p}.phi.weight"), Tensor::zeros(Shape::new(g, g, 1, 1)))?;
        store.insert_param(format!("{p}.phi.bias"), Tensor::zeros(Shape::vector(g)))
    }

    /// Gate values `w ∈ (0,1)^{B×G}` as a `(B, G, 1, 1)` node.
    pub fn gates<T: Real>(&self, s: &mut Session<'_, '_, T>, x: Var) -> Result<Var> {
        let got = s.graph.shape(x).channels;
        if got != self.cfg.channels {
            return Err(Error::dim("dgg_forward", "channels", self.cfg.channels, got));
        }
        let p = &self.prefix;
        let z = s.graph.group_avgpool(x, self.cfg.groups)?;
        let w = s.param(&format!("{p}.phi.weight"))?;
        let b = s.param(&format!("{p}.phi.bias"))?;
        s.graph.set_scope(&format!("{p}.phi"));
        let logits = s.graph.linear(z, w, Some(b))?;
        Ok(s.graph.sigmoid(logits))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, '_, T>, x: Var) -> Result<Var> {
        let w = self.gates(s, x)?;
        let gated = s.graph.scale_groups(x, w)?;
        s.graph.add(x, gated)
    }

    pub fn costs(&self) -> Vec<LayerRow> {
        let g = self.cfg.groups;
        vec![LayerRow::new(
            format!("{}.phi", self.prefix),
            self.cfg.param_count(),
            linear_macs(g, g),
        )]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Mode;
    use crate::tensor::{grad_check_at, grad_check_report, Graph};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn gfm_split_and_param_count() {
        let cfg = GfmConfig::new(16, 16, 2, 3).unwrap();
        assert_eq!((cfg.primary(), cfg.auxiliary(), cfg.multiplier()), (8, 8, 1));
        assert_eq!(cfg.param_count(), 232);
        assert_eq!(cfg.dense_param_count(), 2336);
        // conv weights alone: 200 against 2304
        assert_eq!(cfg.param_count() - 32, 200);
        assert!((cfg.param_count() - 32) * 10 < 16 * 16 * 9);

        let gfm = Gfm::new("g", cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        gfm.register(&mut store, &mut rng()).unwrap();
        assert_eq!(store.scalar_count(), 232);
        let rows: u64 = gfm.costs(4, 4).iter().map(|r| r.params).sum();
        assert_eq!(rows, 232);
    }

    #[test]
    fn gfm_uneven_split_uses_multiplier() {
        let cfg = GfmConfig::new(12, 10, 3, 3).unwrap();
        assert_eq!((cfg.primary(), cfg.auxiliary(), cfg.multiplier()), (3, 7, 3));
        let gfm = Gfm::new("g", cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        gfm.register(&mut store, &mut rng()).unwrap();
        assert_eq!(store.scalar_count(), cfg.param_count());
        assert_eq!(cfg.param_count(), (12 * 3 + 3 * 3 * 9 + 2 * 10) as u64);

        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let x = s.graph.constant(random([2, 12, 5, 5], 1).cast());
        let (xp, xa) = gfm.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(xp), Shape::new(2, 3, 5, 5));
        assert_eq!(s.graph.shape(xa), Shape::new(2, 7, 5, 5));
    }

    #[test]
    fn gfm_rejects_bad_configs() {
        assert!(matches!(GfmConfig::new(8, 8, 2, 4), Err(Error::Config(_))));
        assert!(matches!(GfmConfig::new(8, 1, 2, 3), Err(Error::Config(_))));
        assert!(matches!(GfmConfig::new(8, 8, 0, 3), Err(Error::Config(_))));
        assert!(matches!(GfmConfig::new(8, 2, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn gfm_dense_comparison_holds_across_configs() {
        for (cin, cout, r) in [(16, 16, 2), (64, 64, 2), (128, 32, 2), (32, 48, 3), (8, 8, 4)] {
            let cfg = GfmConfig::new(cin, cout, r, 3).unwrap();
            assert!(cfg.param_count() < cfg.dense_param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn gfm_zero_input_gives_zero_outputs() {
        let gfm = Gfm::new("g", GfmConfig::new(16, 16, 2, 3).unwrap()).unwrap();
        let mut store = ParamStore::<f32>::new();
        gfm.register(&mut store, &mut rng()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &store, mode);
            let x = s.graph.constant(Tensor::zeros([2, 16, 4, 4]));
            let (xp, xa) = gfm.forward(&mut s, x).unwrap();
            assert!(s.graph.value(xp).data().iter().all(|&v| v == 0.0));
            assert!(s.graph.value(xa).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gfm_channel_mismatch() {
        let gfm = Gfm::new("g", GfmConfig::new(16, 16, 2, 3).unwrap()).unwrap();
        let mut store = ParamStore::<f32>::new();
        gfm.register(&mut store, &mut rng()).unwrap();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let x = s.graph.constant(Tensor::zeros([1, 8, 4, 4]));
        assert!(matches!(gfm.forward(&mut s, x), Err(Error::Dimension { .. })));
    }

    fn isf_store(c: usize, groups: usize) -> (Isf, ParamStore<f32>) {
        let isf = Isf::new("isf", IsfConfig::new(c, groups).unwrap()).unwrap();
        let mut store = ParamStore::new();
        isf.register(&mut store, &mut rng()).unwrap();
        (isf, store)
    }

    #[test]
    fn isf_at_init_is_identity() {
        let (isf, store) = isf_store(8, 4);
        let x = random([2, 8, 5, 5], 2).cast::<f32>();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let xv = s.graph.constant(x.clone());
        let y = isf.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y), &x);
    }

    #[test]
    fn isf_unit_gamma_delta_kernel_adds_shuffle() {
        let (isf, mut store) = isf_store(4, 2);
        *store.param_mut("isf.gamma").unwrap() = Tensor::full(Shape::vector(2), 1.0);
        *store.param_mut("isf.dw.weight").unwrap() =
            Tensor::from_fn([4, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let x = Tensor::from_fn([1, 4, 2, 2], |i| (i / 4) as f32 * 10.0 + (i % 4) as f32);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let xv = s.graph.constant(x.clone());
        let y = isf.forward(&mut s, xv).unwrap();
        // shuffle of 4 channels in 2 groups reads channels [0, 2, 1, 3]
        for (c, src) in [0, 2, 1, 3].into_iter().enumerate() {
            for h in 0..2 {
                for w in 0..2 {
                    let expected = x.get(0, c, h, w) + x.get(0, src, h, w);
                    assert_eq!(s.graph.value(y).get(0, c, h, w), expected);
                }
            }
        }
    }

    #[test]
    fn isf_param_count() {
        let cfg = IsfConfig::new(128, 4).unwrap();
        assert_eq!(cfg.param_count(), 1156);
        let (isf, store) = isf_store(128, 4);
        assert_eq!(store.scalar_count(), 1156);
        assert_eq!(isf.costs(1, 1).iter().map(|r| r.params).sum::<u64>(), 1156);
        assert!(matches!(IsfConfig::new(10, 4), Err(Error::Config(_))));
    }

    #[test]
    fn isf_gamma_gradient_is_nonzero_and_matches_fd() {
        let (isf, store) = isf_store(8, 4);
        let store = store.cast::<f64>();
        let x = random([1, 8, 6, 6], 3);
        let r = random([1, 8, 6, 6], 4);
        let f = |g: &mut Graph<f64>, gamma: Var| {
            let mut s = Session::new(g, &store, Mode::Train);
            s.bind("isf.gamma", gamma);
            let xv = s.graph.constant(x.clone());
            let y = isf.forward(&mut s, xv)?;
            let rv = s.graph.constant(r.clone());
            let p = s.graph.mul(y, rv)?;
            Ok(s.graph.sum(p))
        };
        let mut g = Graph::new();
        let gamma = g.param(Tensor::zeros(Shape::vector(4)));
        let loss = f(&mut g, gamma).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(gamma).unwrap().data().iter().all(|v| v.abs() > 1e-6));
        let err = grad_check_at(f, &Tensor::zeros(Shape::vector(4)), 1e-3, &[0, 1, 2, 3]).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn dgg_store(c: usize, groups: usize) -> (Dgg, ParamStore<f32>) {
        let dgg = Dgg::new("dgg", DggConfig::new(c, groups).unwrap()).unwrap();
        let mut store = ParamStore::new();
        dgg.register(&mut store).unwrap();
        (dgg, store)
    }

    #[test]
    fn dgg_zero_phi_scales_by_one_and_a_half() {
        let (dgg, store) = dgg_store(8, 4);
        let x = random([2, 8, 4, 4], 5).cast::<f32>();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let xv = s.graph.constant(x.clone());
        let y = dgg.forward(&mut s, xv).unwrap();
        for (o, i) in s.graph.value(y).data().iter().zip(x.data()) {
            assert_eq!(*o, 1.5 * i);
        }
    }

    #[test]
    fn dgg_gates_are_open_interval_and_zero_input_stays_zero() {
        let (dgg, mut store) = dgg_store(8, 4);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for (_, p) in store.params_mut() {
            for v in p.data_mut() {
                *v = r.random_range(-3.0..3.0);
            }
        }
        let x = random([3, 8, 4, 4], 6).cast::<f32>();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let xv = s.graph.constant(x.clone());
        let w = dgg.gates(&mut s, xv).unwrap();
        assert_eq!(s.graph.shape(w), Shape::new(3, 4, 1, 1));
        assert!(s.graph.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));

        *store.param_mut("dgg.phi.bias").unwrap() = Tensor::zeros(Shape::vector(4));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let z = s.graph.constant(Tensor::zeros([1, 8, 3, 3]));
        let y = dgg.forward(&mut s, z).unwrap();
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dgg_output_norm_dominates_for_nonnegative_input() {
        let (dgg, mut store) = dgg_store(8, 4);
        *store.param_mut("dgg.phi.weight").unwrap() = Tensor::from_fn([4, 4, 1, 1], |i| i as f32 * 0.3 - 2.0);
        let x = Tensor::from_fn([2, 8, 3, 3], |i| ((i * 37) % 11) as f32 / 11.0);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, Mode::Train);
        let xv = s.graph.constant(x.clone());
        let w = dgg.gates(&mut s, xv).unwrap();
        let y = dgg.forward(&mut s, xv).unwrap();
        let (gates, out) = (s.graph.value(w).clone(), s.graph.value(y));
        let norm = |t: &[f32]| t.iter().map(|v| v * v).sum::<f32>();
        assert!(norm(out.data()) >= norm(x.data()));
        for b in 0..2 {
            for c in 0..8 {
                let gate = gates.get(b, c / 2, 0, 0);
                assert_eq!(out.get(b, c, 1, 1), x.get(b, c, 1, 1) + x.get(b, c, 1, 1) * gate);
            }
        }
        assert!(matches!(DggConfig::new(6, 4), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn gfm_count_is_closed_form_and_below_dense(cin in 1usize..96, cout_half in 1usize..48, r in 2usize..5, k in 0usize..3) {
            let k = 2 * k + 1;
            let cout = 2 * cout_half * r;
            let cfg = GfmConfig::new(cin, cout, r, k).unwrap();
            let (cp, m) = (cfg.primary() as u64, cfg.multiplier() as u64);
            let closed = cin as u64 * cp + cp * m * (k * k) as u64 + 2 * cout as u64;
            proptest::prop_assert_eq!(cfg.param_count(), closed);
            if k > 1 {
                proptest::prop_assert!(cfg.param_count() < cfg.dense_param_count());
            }
        }

        #[test]
        fn dgg_never_shrinks_nonnegative_input(seed in proptest::prelude::any::<u64>(), scale in 0.0f32..3.0) {
            let (dgg, mut store) = dgg_store(8, 4);
            let phi = random([4, 4, 1, 1], seed).cast::<f32>();
            *store.param_mut("dgg.phi.weight").unwrap() = Tensor::from_fn(phi.shape(), |i| phi.data()[i] * scale);
            let x = random([2, 8, 4, 4], seed ^ 7).cast::<f32>();
            let x = Tensor::from_fn(x.shape(), |i| x.data()[i].abs());
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &store, Mode::Train);
            let xv = s.graph.constant(x.clone());
            let y = dgg.forward(&mut s, xv).unwrap();
            let out = s.graph.value(y);
            proptest::prop_assert!(out.data().iter().zip(x.data()).all(|(o, i)| o >= i));
            let norm = |t: &[f32]| t.iter().map(|v| v * v).sum::<f32>();
            proptest::prop_assert!(norm(out.data()) >= norm(x.data()));
        }
    }

    /// All three blocks pass the finite-difference check on 1×8×6×6 inputs.
    #[test]
    fn blocks_pass_grad_check() {
        let x = random([1, 8, 6, 6], 10);
        let r = random([1, 8, 6, 6], 11);
        let r16 = random([1, 16, 6, 6], 14);
        let idx: Vec<usize> = (0..x.len()).collect();

        let gfm = Gfm::new("gfm", GfmConfig::new(8, 16, 2, 3).unwrap()).unwrap();
        let isf = Isf::new("isf", IsfConfig::new(8, 4).unwrap()).unwrap();
        let dgg = Dgg::new("dgg", DggConfig::new(8, 4).unwrap()).unwrap();
        let mut store = ParamStore::<f64>::new();
        gfm.register(&mut store, &mut rng()).unwrap();
        isf.register(&mut store, &mut rng()).unwrap();
        dgg.register(&mut store).unwrap();
        let mut pr = ChaCha8Rng::seed_from_u64(12);
        for (name, p) in store.params_mut() {
            if name.starts_with("isf.gamma") || name.starts_with("dgg") {
                for v in p.data_mut() {
                    *v = pr.random_range(-1.0..1.0);
                }
            }
        }

        let gfm_rep = grad_check_report(
            |g, xv| {
                let mut s = Session::new(g, &store, Mode::Train);
                let (xp, xa) = gfm.forward(&mut s, xv)?;
                let y = s.graph.concat_channels(&[xp, xa])?;
                let rv = s.graph.constant(r16.clone());
                let p = s.graph.mul(y, rv)?;
                Ok(s.graph.sum(p))
            },
            &x,
            1e-3,
            &idx,
        )
        .unwrap();
        assert!(gfm_rep.passes(1e-3), "gfm {gfm_rep:?}");
        assert_eq!(gfm_rep.checked + gfm_rep.straddling, idx.len());

        for (name, err) in [
            (
                "isf",
                grad_check_at(
                    |g, xv| {
                        let mut s = Session::new(g, &store, Mode::Train);
                        let y = isf.forward(&mut s, xv)?;
                        let rv = s.graph.constant(r.clone());
                        let p = s.graph.mul(y, rv)?;
                        Ok(s.graph.sum(p))
                    },
                    &x,
                    1e-3,
                    &idx,
                )
                .unwrap(),
            ),
            (
                "dgg",
                grad_check_at(
                    |g, xv| {
                        let mut s = Session::new(g, &store, Mode::Train);
                        let y = dgg.forward(&mut s, xv)?;
                        let rv = s.graph.constant(r.clone());
                        let p = s.graph.mul(y, rv)?;
                        Ok(s.graph.sum(p))
                    },
                    &x,
                    1e-3,
                    &idx,
                )
                .unwrap(),
            ),
        ] {
            assert!(err < 1e-3, "{name} {err}");
        }
    }

    #[test]
    fn shuffle_inside_isf_preserves_value_multiset() {
        let x = random([1, 8, 3, 3], 13).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sh = g.channel_shuffle(xv, 4).unwrap();
        let mut a = g.value(sh).data().to_vec();
        let mut b = x.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }
}
