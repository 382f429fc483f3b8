//! Parameter and multiply-accumulate bookkeeping.
//!
//! MAC conventions:
//! * convolution: `Cout · (Cin / groups) · K² · Hout · Wout`, padded taps
//!   included;
//! * linear: `fan_in · fan_out` per sample;
//! * bilinear upsampling: 4 per output element;
//! * batch-norm, activations, pooling, shuffles and elementwise ops: 0.

use std::collections::BTreeMap;

use serde::Serialize;

/// Counts are for a single input image (batch size 1).
pub const MAC_CONVENTIONS: &str = "conv=Cout*(Cin/groups)*K^2*Hout*Wout (padded taps included); \
linear=fan_in*fan_out; bilinear upsample=4 per output element; BN/activation/pool/elementwise=0; batch=1";

pub const UPSAMPLE_MACS_PER_OUTPUT: u64 = 4;

pub fn conv_macs(cout: usize, cin: usize, groups: usize, k: usize, hout: usize, wout: usize) -> u64 {
    (cout * (cin / groups) * k * k * hout * wout) as u64
}

pub fn linear_macs(fan_in: usize, fan_out: usize) -> u64 {
    (fan_in * fan_out) as u64
}

pub fn upsample_macs(channels: usize, hout: usize, wout: usize) -> u64 {
    UPSAMPLE_MACS_PER_OUTPUT * (channels * hout * wout) as u64
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Encoder,
    Decoder,
    Heads,
    Loss,
}

impl Subsystem {
    /// Subsystem owning a dotted layer name, from its first component.
    pub fn of(name: &str) -> Option<Subsystem> {
        match name.split('.').next()? {
            "encoder" => Some(Subsystem::Encoder),
            "decoder" => Some(Subsystem::Decoder),
            "heads" => Some(Subsystem::Heads),
            "loss" => Some(Subsystem::Loss),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subsystem::Encoder => "encoder",
            Subsystem::Decoder => "decoder",
            Subsystem::Heads => "heads",
            Subsystem::Loss => "loss",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

impl LayerRow {
    pub fn new(name: impl Into<String>, params: u64, macs: u64) -> Self {
        LayerRow {
            name: name.into(),
            params,
            macs,
        }
    }
}

/// Per-layer cost rows in forward order.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize)]
pub struct CostTable {
    pub rows: Vec<LayerRow>,
}

impl CostTable {
    pub fn push(&mut self, row: LayerRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = LayerRow>) {
        self.rows.extend(rows);
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs() as f64 / 1e9
    }

    /// `(params, macs)` summed per subsystem.
    pub fn by_subsystem(&self) -> BTreeMap<Subsystem, (u64, u64)> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            if let Some(s) = Subsystem::of(&r.name) {
                let e = out.entry(s).or_insert((0, 0));
                e.0 += r.params;
                e.1 += r.macs;
            }
        }
        out
    }

    /// Nonzero parameter counts keyed by layer name.
    pub fn params_by_layer(&self) -> BTreeMap<String, u64> {
        nonzero(self.rows.iter().map(|r| (r.name.clone(), r.params)))
    }

    /// Nonzero MAC counts keyed by layer name.
    pub fn macs_by_layer(&self) -> BTreeMap<String, u64> {
        nonzero(self.rows.iter().map(|r| (r.name.clone(), r.macs)))
    }
}

fn nonzero(items: impl Iterator<Item = (String, u64)>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (k, v) in items {
        if v > 0 {
            *out.entry(k).or_insert(0) += v;
        }
    }
    out
}

/// Layer that owns a parameter: its name minus the final component.
pub fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map_or(param_name, |(layer, _)| layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas() {
        assert_eq!(conv_macs(32, 16, 1, 1, 8, 8), 32768);
        assert_eq!(conv_macs(8, 8, 8, 3, 8, 8), 4608);
        assert_eq!(linear_macs(4, 4), 16);
        assert_eq!(upsample_macs(2, 4, 4), 128);
        // doubling H and W quadruples a conv row
        assert_eq!(conv_macs(8, 4, 1, 3, 16, 16), 4 * conv_macs(8, 4, 1, 3, 8, 8));
    }

    #[test]
    fn layer_names() {
        assert_eq!(layer_of("decoder.stage1.gfm4.pw.bn.gamma"), "decoder.stage1.gfm4.pw.bn");
        assert_eq!(layer_of("loss.s_seg"), "loss");
        assert_eq!(Subsystem::of("heads.seg.proj"), Some(Subsystem::Heads));
    }

    #[test]
    fn totals_are_row_sums() {
        let mut t = CostTable::default();
        t.push(LayerRow::new("encoder.a", 10, 100));
        t.push(LayerRow::new("heads.b", 64, 0));
        t.push(LayerRow::new("encoder.c", 0, 7));
        assert_eq!(t.total_params(), 74);
        assert_eq!(t.total_macs(), 107);
        assert_eq!(t.by_subsystem()[&Subsystem::Encoder], (10, 107));
        assert_eq!(t.params_by_layer().len(), 2);
    }
}
