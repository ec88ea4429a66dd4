//! Change-class metrics over confusion counts.

use std::fmt;

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel counts with the change class as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Parallel-reduction primitive.
    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// `1` where `p >= threshold`.
pub fn binarize<T: Scalar>(p: ArrayView2<T>, threshold: f64) -> ndarray::Array2<u8> {
    let t = T::lit(threshold);
    p.mapv(|v| u8::from(v >= t))
}

pub fn accumulate(pred: ArrayView2<u8>, gt: ArrayView2<u8>, mut c: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(invalid(format!(
            "prediction {:?} and label {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    Zip::from(&pred).and(&gt).for_each(|&p, &g| match (p != 0, g != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    /// Set when any ratio was 0/0 and reported as 0.
    #[serde(skip)]
    pub zero_division: bool,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    /// Metrics from precision and recall alone; `iou` and `oa` are left at 0.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let mut zero_division = false;
        let f1 = ratio(2.0 * precision * recall, precision + recall, &mut zero_division);
        MetricsReport {
            precision,
            recall,
            f1,
            iou: 0.0,
            oa: 0.0,
            zero_division,
        }
    }

    pub fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("iou", self.iou),
            ("oa", self.oa),
        ]
    }

    /// Parses the `key=value` form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vals = [None; 5];
        let keys = ["precision", "recall", "f1", "iou", "oa"];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("malformed metrics line '{line}'")))?;
            let i = keys
                .iter()
                .position(|&key| key == k.trim())
                .ok_or_else(|| invalid(format!("unknown metric '{k}'")))?;
            vals[i] = Some(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| invalid(format!("metric '{k}': {e}")))?,
            );
        }
        let get = |i: usize| vals[i].ok_or_else(|| invalid(format!("missing metric '{}'", keys[i])));
        Ok(MetricsReport {
            precision: get(0)?,
            recall: get(1)?,
            f1: get(2)?,
            iou: get(3)?,
            oa: get(4)?,
            zero_division: false,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn compute(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(invalid("cannot compute metrics from empty confusion counts"));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let mut zero_division = false;
    let precision = ratio(tp, tp + fp, &mut zero_division);
    let recall = ratio(tp, tp + fn_, &mut zero_division);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut zero_division);
    let iou = ratio(tp, tp + fp + fn_, &mut zero_division);
    let oa = (tp + tn) / c.total() as f64;
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        iou,
        oa,
        zero_division,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool counts over all tiles, then compute.
    #[default]
    Micro,
    /// Compute per tile, then take the arithmetic mean of each metric.
    Macro,
}

/// Streaming accumulator supporting both averaging modes.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    pub mode: Averaging,
    pub counts: ConfusionCounts,
    per_tile: Vec<MetricsReport>,
}

impl MetricsAccumulator {
    pub fn new(mode: Averaging) -> Self {
        MetricsAccumulator {
            mode,
            ..Default::default()
        }
    }

    pub fn add(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        let tile = accumulate(pred, gt, ConfusionCounts::default())?;
        self.counts = self.counts.merge(tile);
        if self.mode == Averaging::Macro {
            self.per_tile.push(compute(&tile)?);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        match self.mode {
            Averaging::Micro => compute(&self.counts),
            Averaging::Macro => {
                if self.per_tile.is_empty() {
                    return Err(invalid("no tiles accumulated"));
                }
                let n = self.per_tile.len() as f64;
                let mean = |f: fn(&MetricsReport) -> f64| self.per_tile.iter().map(f).sum::<f64>() / n;
                Ok(MetricsReport {
                    precision: mean(|r| r.precision),
                    recall: mean(|r| r.recall),
                    f1: mean(|r| r.f1),
                    iou: mean(|r| r.iou),
                    oa: mean(|r| r.oa),
                    zero_division: self.per_tile.iter().any(|r| r.zero_division),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_counts() {
        let r = compute(&ConfusionCounts::new(3, 1, 2, 10)).unwrap();
        assert!((r.precision - 0.75).abs() < 1e-15);
        assert!((r.recall - 0.6).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.iou - 0.5).abs() < 1e-15);
        assert!((r.oa - 0.8125).abs() < 1e-15);
        assert!(!r.zero_division);
    }

    #[test]
    fn empty_counts_error_and_zero_division_flag() {
        assert!(compute(&ConfusionCounts::default()).is_err());
        let r = compute(&ConfusionCounts::new(0, 0, 0, 5)).unwrap();
        assert_eq!((r.precision, r.f1, r.iou, r.oa), (0.0, 0.0, 0.0, 1.0));
        assert!(r.zero_division);
    }

    #[test]
    fn binarize_tie_goes_to_change() {
        let p = array![[0.5f64, 0.89], [0.0, 1.0]];
        assert_eq!(binarize(p.view(), 0.5), array![[1u8, 1], [0, 1]]);
        assert_eq!(binarize(p.view(), 0.9), array![[0u8, 0], [0, 1]]);
    }

    #[test]
    fn accumulate_inverse_prediction() {
        let gt = array![[1u8, 0], [0, 1]];
        let pred = gt.mapv(|v| 1 - v);
        let c = accumulate(pred.view(), gt.view(), ConfusionCounts::default()).unwrap();
        assert_eq!(c, ConfusionCounts::new(0, 2, 2, 0));
        let bad = array![[1u8, 0, 0]];
        assert!(accumulate(bad.view(), gt.view(), c).is_err());
    }

    #[test]
    fn report_round_trips_through_text() {
        let r = compute(&ConfusionCounts::new(7, 2, 3, 50)).unwrap();
        let text = r.to_string();
        assert_eq!(text.lines().count(), 5);
        let back = MetricsReport::parse(&text).unwrap();
        assert_eq!(back.entries(), r.entries());
    }

    #[test]
    fn macro_averages_tiles() {
        let mut acc = MetricsAccumulator::new(Averaging::Macro);
        let a = array![[1u8, 0]];
        let b = array![[0u8, 0]];
        acc.add(a.view(), a.view()).unwrap();
        acc.add(b.view(), a.view()).unwrap();
        let r = acc.finish().unwrap();
        assert!((r.f1 - 0.5).abs() < 1e-15);
        assert!((r.oa - 0.75).abs() < 1e-15);
    }
}
