//! The four train/test pairings and the two robustness gaps.

use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use crate::sample::Condition;

/// Dice for the four pairings, named `<train>_<test>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantDice {
    pub clean_clean: f64,
    pub clean_noisy: f64,
    pub noisy_clean: f64,
    pub noisy_noisy: f64,
}

impl QuadrantDice {
    /// `Dice(N→N) − Dice(C→N)`.
    pub fn delta_r(&self) -> f64 {
        self.noisy_noisy - self.clean_noisy
    }

    /// `Dice(N→C) − Dice(C→C)`.
    pub fn delta_h(&self) -> f64 {
        self.noisy_clean - self.clean_clean
    }
}

/// A published row: four Dice values and the gaps printed beside them.
#[derive(Clone, Copy, Debug)]
pub struct PublishedRow {
    pub model: &'static str,
    pub dice: QuadrantDice,
    pub delta_r: f64,
    pub delta_h: f64,
}

const fn row(model: &'static str, d: [f64; 4], delta_r: f64, delta_h: f64) -> PublishedRow {
    PublishedRow {
        model,
        dice: QuadrantDice {
            clean_clean: d[0],
            clean_noisy: d[1],
            noisy_clean: d[2],
            noisy_noisy: d[3],
        },
        delta_r,
        delta_h,
    }
}

/// Reported robustness results (Dice, four pairings each).
pub const PUBLISHED: [PublishedRow; 5] = [
    row("UNet", [0.8722, 0.6478, 0.8488, 0.8026], 0.1548, -0.0234),
    row("SegFormer-B0", [0.8971, 0.6962, 0.8964, 0.8228], 0.1266, -0.0007),
    row("PraNet", [0.9006, 0.7143, 0.8842, 0.8422], 0.1279, -0.0164),
    row("CFFormer", [0.9053, 0.7556, 0.8901, 0.8402], 0.0846, -0.0152),
    row("DepthPolyp", [0.9107, 0.8126, 0.8910, 0.8525], 0.0399, -0.0197),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    /// `(train, test, report)` in the order C→C, C→N, N→C, N→N.
    pub cells: Vec<(Condition, Condition, MetricReport)>,
    pub delta_r: f64,
    pub delta_h: f64,
}

impl QuadrantReport {
    pub fn new(cc: MetricReport, cn: MetricReport, nc: MetricReport, nn: MetricReport) -> Self {
        let dice = QuadrantDice {
            clean_clean: cc.mean.dice,
            clean_noisy: cn.mean.dice,
            noisy_clean: nc.mean.dice,
            noisy_noisy: nn.mean.dice,
        };
        use Condition::{Clean, Noisy};
        QuadrantReport {
            cells: vec![
                (Clean, Clean, cc),
                (Clean, Noisy, cn),
                (Noisy, Clean, nc),
                (Noisy, Noisy, nn),
            ],
            delta_r: dice.delta_r(),
            delta_h: dice.delta_h(),
        }
    }

    pub fn dice(&self) -> QuadrantDice {
        let d = |i: usize| self.cells[i].2.mean.dice;
        QuadrantDice {
            clean_clean: d(0),
            clean_noisy: d(1),
            noisy_clean: d(2),
            noisy_noisy: d(3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::{Metrics, SampleScore};

    #[test]
    fn published_gaps_recompute() {
        for r in PUBLISHED {
            assert!((r.dice.delta_r() - r.delta_r).abs() < 1e-4, "{}", r.model);
            assert!((r.dice.delta_h() - r.delta_h).abs() < 1e-4, "{}", r.model);
        }
        let same = QuadrantDice {
            clean_clean: 0.7,
            clean_noisy: 0.7,
            noisy_clean: 0.7,
            noisy_noisy: 0.7,
        };
        assert_eq!((same.delta_r(), same.delta_h()), (0.0, 0.0));
    }

    #[test]
    fn report_deltas_follow_cells() {
        let rep = |d: f64| {
            MetricReport::new(
                vec![SampleScore {
                    id: "x".into(),
                    metrics: Metrics {
                        dice: d,
                        iou: d,
                        recall: d,
                    },
                }],
                0.5,
            )
        };
        let q = QuadrantReport::new(rep(0.9), rep(0.6), rep(0.85), rep(0.8));
        assert!((q.delta_r - q.dice().delta_r()).abs() < 1e-12);
        assert!((q.delta_h - (0.85 - 0.9)).abs() < 1e-12);
    }
}
