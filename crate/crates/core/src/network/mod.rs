//! The full model: stand-in strided-conv encoder, per-scale unification,
//! three-stage factorized decoder and the segmentation/depth heads.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::accounting::{conv_macs, layer_of, upsample_macs, CostTable, LayerRow};
use crate::blocks::{Dgg, DggConfig, Gfm, GfmConfig, Isf, IsfConfig, DEFAULT_GROUPS};
use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Shape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Input spatial sizes must be multiples of the coarsest encoder stride.
pub const STRIDE: usize = 32;

pub const ENCODER_LAYERS: [&str; 5] = [
    "encoder.stem1",
    "encoder.stem2",
    "encoder.stage2",
    "encoder.stage3",
    "encoder.stage4",
];

pub const LOSS_S_SEG: &str = "loss.s_seg";
pub const LOSS_S_DEPTH: &str = "loss.s_depth";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Encoder channels at strides 4, 8, 16 and 32.
    pub encoder_widths: [usize; 4],
    /// `C_u`, shared width after per-scale projection.
    pub unified_dim: usize,
    pub split_ratio: usize,
    pub groups: usize,
    /// Output width of each stage-II GFM.
    pub stage2_dim: usize,
    /// `C_out`, width of the decoder output.
    pub fused_dim: usize,
    pub dw_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 64,
            input_width: 64,
            encoder_widths: [16, 32, 48, 64],
            unified_dim: 64,
            split_ratio: 2,
            groups: DEFAULT_GROUPS,
            stage2_dim: 32,
            fused_dim: 64,
            dw_kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        check_input_size(self.input_height, self.input_width)?;
        if self.encoder_widths.contains(&0) || self.unified_dim == 0 || self.fused_dim == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.split_ratio == 0 || !self.unified_dim.is_multiple_of(self.split_ratio) {
            return Err(Error::config(format!(
                "unified_dim {} not divisible by split_ratio {}",
                self.unified_dim, self.split_ratio
            )));
        }
        if self.groups == 0 || !self.unified_dim.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "unified_dim {} not divisible by groups {}",
                self.unified_dim, self.groups
            )));
        }
        self.stage1_gfm().validate()?;
        let (s, a) = self.stream_widths();
        IsfConfig::new(s, self.groups)?;
        IsfConfig::new(a, self.groups)?;
        self.stage2_gfm(s).validate()?;
        self.stage2_gfm(a).validate()?;
        DggConfig::new(self.concat_width(), self.groups)?;
        Ok(())
    }

    pub fn stage1_gfm(&self) -> GfmConfig {
        GfmConfig {
            c_in: self.unified_dim,
            c_out: self.unified_dim,
            split_ratio: self.split_ratio,
            dw_kernel: self.dw_kernel,
        }
    }

    fn stage2_gfm(&self, c_in: usize) -> GfmConfig {
        GfmConfig {
            c_in,
            c_out: self.stage2_dim,
            split_ratio: self.split_ratio,
            dw_kernel: self.dw_kernel,
        }
    }

    /// Widths of the concatenated primary and auxiliary stage-I streams.
    pub fn stream_widths(&self) -> (usize, usize) {
        let g = self.stage1_gfm();
        (4 * g.primary(), 4 * g.auxiliary())
    }

    /// Width of the stage-III concat `[S_S, S_A, A_S, A_A]`.
    pub fn concat_width(&self) -> usize {
        2 * self.stage2_dim
    }

    /// A 1×1 projection follows the gate only when the widths differ.
    pub fn needs_fusion(&self) -> bool {
        self.concat_width() != self.fused_dim
    }

    /// Applies one config entry; `Ok(false)` if the key is not a network key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "input_size" => {
                let v: Vec<usize> = kv::list(e)?;
                (self.input_height, self.input_width) = match v[..] {
                    [s] => (s, s),
                    [h, w] => (h, w),
                    _ => {
                        return Err(Error::config(format!(
                            "line {}: input_size takes 1 or 2 values",
                            e.line
                        )))
                    }
                };
            }
            "encoder_widths" => {
                let v: Vec<usize> = kv::list(e)?;
                self.encoder_widths = v
                    .try_into()
                    .map_err(|_| Error::config(format!("line {}: encoder_widths takes 4 values", e.line)))?;
            }
            "unified_dim" => self.unified_dim = kv::value(e)?,
            "split_ratio" => self.split_ratio = kv::value(e)?,
            "groups" => self.groups = kv::value(e)?,
            "stage2_dim" => self.stage2_dim = kv::value(e)?,
            "fused_dim" => self.fused_dim = kv::value(e)?,
            "dw_kernel" => self.dw_kernel = kv::value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let w = self.encoder_widths;
        format!(
            "input_size = {},{}\nencoder_widths = {},{},{},{}\nunified_dim = {}\nsplit_ratio = {}\ngroups = {}\n\
             stage2_dim = {}\nfused_dim = {}\ndw_kernel = {}\n",
            self.input_height,
            self.input_width,
            w[0],
            w[1],
            w[2],
            w[3],
            self.unified_dim,
            self.split_ratio,
            self.groups,
            self.stage2_dim,
            self.fused_dim,
            self.dw_kernel
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for e in kv::parse(text)? {
            if !cfg.apply(&e)? {
                return Err(kv::unknown(&e));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(STRIDE) || !w.is_multiple_of(STRIDE) {
        return Err(Error::config(format!(
            "input size {h}x{w} must be a positive multiple of {STRIDE}"
        )));
    }
    Ok(())
}

/// Raw head outputs at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Segmentation logits, `(B, 1, H, W)`.
    pub seg_logits: Var,
    /// Depth in `(0, 1)`, `(B, 1, H, W)`.
    pub depth: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: NetworkConfig,
    stage1: [Gfm; 4],
    isf_s: Isf,
    isf_a: Isf,
    gfm_s: Gfm,
    gfm_a: Gfm,
    dgg: Dgg,
}

impl Model {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let g1 = cfg.stage1_gfm();
        let [a, b, c, d] = [1, 2, 3, 4].map(|i| Gfm::new(format!("decoder.stage1.gfm{i}"), g1));
        let stage1 = [a?, b?, c?, d?];
        let (s, a) = cfg.stream_widths();
        Ok(Model {
            isf_s: Isf::new("decoder.stage2.isf_s", IsfConfig::new(s, cfg.groups)?)?,
            isf_a: Isf::new("decoder.stage2.isf_a", IsfConfig::new(a, cfg.groups)?)?,
            gfm_s: Gfm::new("decoder.stage2.gfm_s", cfg.stage2_gfm(s))?,
            gfm_a: Gfm::new("decoder.stage2.gfm_a", cfg.stage2_gfm(a))?,
            dgg: Dgg::new("decoder.stage3.dgg", DggConfig::new(cfg.concat_width(), cfg.groups)?)?,
            stage1,
            cfg,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn encoder_channels(&self) -> [(usize, usize); 5] {
        let w = self.cfg.encoder_widths;
        [(3, w[0]), (w[0], w[0]), (w[0], w[1]), (w[1], w[2]), (w[2], w[3])]
    }

    /// Fresh parameters and batch-norm buffers drawn from `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.try_init(seed).expect("parameter names are unique by construction")
    }

    fn try_init<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let cfg = &self.cfg;
        for (name, (cin, cout)) in ENCODER_LAYERS.iter().zip(self.encoder_channels()) {
            st.add_weight(
                &format!("{name}.weight"),
                Shape::new(cout, cin, 3, 3),
                cin * 9,
                &mut rng,
            )?;
            st.add_batchnorm(&format!("{name}.bn"), cout)?;
        }
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            let name = format!("decoder.unify{}.proj.weight", i + 1);
            st.add_weight(&name, Shape::new(cfg.unified_dim, w, 1, 1), w, &mut rng)?;
        }
        for g in &self.stage1 {
            g.register(&mut st, &mut rng)?;
        }
        self.isf_s.register(&mut st, &mut rng)?;
        self.gfm_s.register(&mut st, &mut rng)?;
        self.isf_a.register(&mut st, &mut rng)?;
        self.gfm_a.register(&mut st, &mut rng)?;
        self.dgg.register(&mut st)?;
        if cfg.needs_fusion() {
            let cw = cfg.concat_width();
            st.add_weight(
                "decoder.stage3.fuse.weight",
                Shape::new(cfg.fused_dim, cw, 1, 1),
                cw,
                &mut rng,
            )?;
        }
        for head in ["heads.seg.proj.weight", "heads.depth.proj.weight"] {
            st.add_weight(head, Shape::new(1, cfg.fused_dim, 1, 1), cfg.fused_dim, &mut rng)?;
        }
        st.insert_param(LOSS_S_SEG, Tensor::zeros(Shape::scalar()))?;
        st.insert_param(LOSS_S_DEPTH, Tensor::zeros(Shape::scalar()))?;
        Ok(st)
    }

    /// Checks that `store` holds exactly this model's parameter and buffer
    /// names with matching shapes.
    pub fn check_state<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let want = self.try_init::<T>(0)?;
        let names = |it: &mut dyn Iterator<Item = (&str, &Tensor<T>)>| -> BTreeMap<String, Shape> {
            it.map(|(k, v)| (k.to_string(), v.shape())).collect()
        };
        let (wp, gp) = (names(&mut want.params()), names(&mut store.params()));
        let (wb, gb) = (names(&mut want.buffers()), names(&mut store.buffers()));
        for (want, got, kind) in [(&wp, &gp, "parameter"), (&wb, &gb, "buffer")] {
            for (k, s) in want {
                match got.get(k) {
                    None => return Err(Error::Format(format!("missing {kind} {k}"))),
                    Some(g) if g != s => return Err(Error::Format(format!("{kind} {k} has shape {g}, expected {s}"))),
                    _ => {}
                }
            }
            if let Some(k) = got.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::Format(format!("unexpected {kind} {k}")));
            }
        }
        Ok(())
    }

    /// Features `c1..c4` at strides 4, 8, 16 and 32.
    pub fn encoder<T: Real>(&self, s: &mut Session<'_, '_, T>, image: Var) -> Result<[Var; 4]> {
        let sh = s.graph.shape(image);
        if sh.channels != 3 {
            return Err(Error::dim("encoder_forward", "channels", 3, sh.channels));
        }
        check_input_size(sh.height, sh.width)?;
        let x = s.conv_bn_relu(ENCODER_LAYERS[0], image, 2, 1)?;
        let c1 = s.conv_bn_relu(ENCODER_LAYERS[1], x, 2, 1)?;
        let c2 = s.conv_bn_relu(ENCODER_LAYERS[2], c1, 2, 1)?;
        let c3 = s.conv_bn_relu(ENCODER_LAYERS[3], c2, 2, 1)?;
        let c4 = s.conv_bn_relu(ENCODER_LAYERS[4], c3, 2, 1)?;
        Ok([c1, c2, c3, c4])
    }

    /// Projects each scale to `C_u` channels and resizes to the `c1` grid.
    pub fn unify<T: Real>(&self, s: &mut Session<'_, '_, T>, feats: &[Var; 4]) -> Result<[Var; 4]> {
        let target = s.graph.shape(feats[0]);
        let mut out = feats.to_owned();
        for (i, &c) in feats.iter().enumerate() {
            let name = format!("decoder.unify{}", i + 1);
            let p = s.pointwise(&format!("{name}.proj"), c)?;
            out[i] = s.upsample(&format!("{name}.upsample"), p, target.height, target.width)?;
        }
        Ok(out)
    }

    /// Stage I–III decoder, returning `F_out` at stride 4.
    pub fn decoder<T: Real>(&self, s: &mut Session<'_, '_, T>, unified: &[Var; 4]) -> Result<Var> {
        let mut prim = Vec::with_capacity(4);
        let mut aux = Vec::with_capacity(4);
        for (g, &c) in self.stage1.iter().zip(unified) {
            let (p, a) = g.forward(s, c)?;
            prim.push(p);
            aux.push(a);
        }
        // streams are ordered coarsest scale first
        prim.reverse();
        aux.reverse();
        let s1 = s.graph.concat_channels(&prim)?;
        let a1 = s.graph.concat_channels(&aux)?;

        let sr = self.isf_s.forward(s, s1)?;
        let (ss, as_) = self.gfm_s.forward(s, sr)?;
        let ar = self.isf_a.forward(s, a1)?;
        let (sa, aa) = self.gfm_a.forward(s, ar)?;

        let cat = s.graph.concat_channels(&[ss, sa, as_, aa])?;
        let gated = self.dgg.forward(s, cat)?;
        if self.cfg.needs_fusion() {
            s.pointwise("decoder.stage3.fuse", gated)
        } else {
            Ok(gated)
        }
    }

    /// 1×1 projections to one channel, ×4 bilinear upsampling, and a sigmoid
    /// on the depth branch.
    pub fn heads<T: Real>(&self, s: &mut Session<'_, '_, T>, f_out: Var) -> Result<Outputs> {
        let sh = s.graph.shape(f_out);
        let (h, w) = (4 * sh.height, 4 * sh.width);
        let seg = s.pointwise("heads.seg.proj", f_out)?;
        let seg_logits = s.upsample("heads.seg.upsample", seg, h, w)?;
        let d = s.pointwise("heads.depth.proj", f_out)?;
        let d = s.upsample("heads.depth.upsample", d, h, w)?;
        let depth = s.graph.sigmoid(d);
        Ok(Outputs { seg_logits, depth })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, '_, T>, image: Var) -> Result<Outputs> {
        let feats = self.encoder(s, image)?;
        let unified = self.unify(s, &feats)?;
        let f_out = self.decoder(s, &unified)?;
        self.heads(s, f_out)
    }

    /// Closed-form per-layer parameter and MAC counts for one `height × width`
    /// image, in forward order.
    pub fn cost_table(&self, height: usize, width: usize) -> Result<CostTable> {
        check_input_size(height, width)?;
        let cfg = &self.cfg;
        let mut t = CostTable::default();
        let (mut h, mut w) = (height, width);
        for (name, (cin, cout)) in ENCODER_LAYERS.iter().zip(self.encoder_channels()) {
            h /= 2;
            w /= 2;
            t.push(LayerRow::new(
                *name,
                (cout * cin * 9) as u64,
                conv_macs(cout, cin, 1, 3, h, w),
            ));
            t.push(LayerRow::new(format!("{name}.bn"), 2 * cout as u64, 0));
        }
        let (h4, w4) = (height / 4, width / 4);
        for (i, &c) in cfg.encoder_widths.iter().enumerate() {
            let (hi, wi) = (h4 >> i, w4 >> i);
            let name = format!("decoder.unify{}", i + 1);
            let cu = cfg.unified_dim;
            t.push(LayerRow::new(
                format!("{name}.proj"),
                (c * cu) as u64,
                conv_macs(cu, c, 1, 1, hi, wi),
            ));
            if i > 0 {
                t.push(LayerRow::new(format!("{name}.upsample"), 0, upsample_macs(cu, h4, w4)));
            }
        }
        for g in &self.stage1 {
            t.extend(g.costs(h4, w4));
        }
        t.extend(self.isf_s.costs(h4, w4));
        t.extend(self.gfm_s.costs(h4, w4));
        t.extend(self.isf_a.costs(h4, w4));
        t.extend(self.gfm_a.costs(h4, w4));
        t.extend(self.dgg.costs());
        if cfg.needs_fusion() {
            let cw = cfg.concat_width();
            t.push(LayerRow::new(
                "decoder.stage3.fuse",
                (cfg.fused_dim * cw) as u64,
                conv_macs(cfg.fused_dim, cw, 1, 1, h4, w4),
            ));
        }
        for head in ["heads.seg", "heads.depth"] {
            t.push(LayerRow::new(
                format!("{head}.proj"),
                cfg.fused_dim as u64,
                conv_macs(1, cfg.fused_dim, 1, 1, h4, w4),
            ));
            t.push(LayerRow::new(
                format!("{head}.upsample"),
                0,
                upsample_macs(1, height, width),
            ));
        }
        t.push(LayerRow::new("loss", 2, 0));
        Ok(t)
    }
}

/// Learnable scalars per layer, summed straight from the stored tensors.
pub fn stored_params_by_layer<T: Real>(store: &ParamStore<T>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (name, t) in store.params() {
        *out.entry(layer_of(name).to_string()).or_insert(0) += t.len() as u64;
    }
    out
}
