//! Pixel confusion counts and the derived segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONVENTIONS: &str = "micro-averaged over all pixels of the split; gas is the positive class; \
when no pixel is gas in either prediction or ground truth, iou, f2, precision and recall are 100; \
otherwise a zero denominator yields 0";

/// Gas is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Count one prediction/ground-truth pair of flat binary masks.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        *self = self.merge(&Self::from_masks(pred, gt)?)?;
        Ok(())
    }

    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut idx = [0u64; 4];
        for (&p, &g) in pred.iter().zip(gt) {
            if p > 1 || g > 1 {
                return Err(Error::Validation(format!("mask values must be 0 or 1, got ({p}, {g})")));
            }
            idx[(p * 2 + g) as usize] += 1;
        }
        Ok(Self {
            tn: idx[0],
            fn_: idx[1],
            fp: idx[2],
            tp: idx[3],
        })
    }

    /// Componentwise sum; fails on counter overflow.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(|| Error::Metrics("confusion counter overflow".into()));
        let out = Self {
            tp: add(self.tp, other.tp)?,
            tn: add(self.tn, other.tn)?,
            fp: add(self.fp, other.fp)?,
            fn_: add(self.fn_, other.fn_)?,
        };
        out.tp
            .checked_add(out.tn)
            .and_then(|v| v.checked_add(out.fp))
            .and_then(|v| v.checked_add(out.fn_))
            .ok_or_else(|| Error::Metrics("confusion total overflow".into()))?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub iou: f64,
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    pub beta: f64,
}

fn ratio(num: u64, den: u64, empty: bool) -> f64 {
    if empty {
        1.0
    } else if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, IoU and F-beta (reported as `f2`) from accumulated counts.
pub fn compute(counts: &ConfusionCounts, beta: f64) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::Metrics("no pixels accumulated".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Metrics(format!("beta must be positive, got {beta}")));
    }
    let ConfusionCounts { tp, tn, fp, fn_ } = *counts;
    let empty = tp + fp + fn_ == 0;
    let precision = ratio(tp, tp + fp, empty);
    let recall = ratio(tp, tp + fn_, empty);
    let b2 = beta * beta;
    let f = if empty {
        1.0
    } else if tp == 0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    };
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / counts.total() as f64,
        iou: ratio(tp, tp + fp + fn_, empty),
        f2: f,
        precision,
        recall,
        beta,
    })
}

fn percent(v: f64) -> f64 {
    (v * 1_000_000.0).round() / 10_000.0
}

/// Serialized form: scores in percent with four decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportJson {
    pub accuracy: f64,
    pub iou: f64,
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    pub beta: f64,
    pub conventions: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> ReportJson {
        ReportJson {
            accuracy: percent(self.accuracy),
            iou: percent(self.iou),
            f2: percent(self.f2),
            precision: percent(self.precision),
            recall: percent(self.recall),
            beta: self.beta,
            conventions: CONVENTIONS.to_string(),
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("plain struct");
        s.push('\n');
        s
    }
}

/// Secondary statistics written next to the main report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub counts: ConfusionCounts,
    /// Mean of background and gas recall.
    pub mean_class_accuracy: f64,
    pub background_accuracy: f64,
    pub gas_recall: f64,
    pub images: usize,
    /// Per-image scores averaged over images.
    pub macro_accuracy: f64,
    pub macro_iou: f64,
    pub macro_f2: f64,
}

/// Running totals plus per-image counts.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    pub total: ConfusionCounts,
    pub per_image: Vec<(String, ConfusionCounts)>,
}

impl Accumulator {
    pub fn add(&mut self, id: &str, pred: &[u8], gt: &[u8]) -> Result<()> {
        let c = ConfusionCounts::from_masks(pred, gt)?;
        self.total = self.total.merge(&c)?;
        self.per_image.push((id.to_string(), c));
        Ok(())
    }

    pub fn report(&self, beta: f64) -> Result<MetricsReport> {
        compute(&self.total, beta)
    }

    pub fn diagnostics(&self, beta: f64) -> Result<Diagnostics> {
        let c = self.total;
        let background_accuracy = ratio(c.tn, c.tn + c.fp, false);
        let gas_recall = ratio(c.tp, c.tp + c.fn_, c.tp + c.fn_ == 0);
        let mut sums = [0.0; 3];
        for (_, counts) in &self.per_image {
            let r = compute(counts, beta)?;
            sums[0] += r.accuracy;
            sums[1] += r.iou;
            sums[2] += r.f2;
        }
        let n = self.per_image.len().max(1) as f64;
        Ok(Diagnostics {
            counts: c,
            mean_class_accuracy: 0.5 * (background_accuracy + gas_recall),
            background_accuracy,
            gas_recall,
            images: self.per_image.len(),
            macro_accuracy: sums[0] / n,
            macro_iou: sums[1] / n,
            macro_f2: sums[2] / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn update_cases() {
        let mut c = ConfusionCounts::default();
        c.update(&[1; 16], &[1; 16]).unwrap();
        assert_eq!(c, ConfusionCounts::new(16, 0, 0, 0));
        let mut c = ConfusionCounts::default();
        c.update(&[1; 4], &[0; 4]).unwrap();
        assert_eq!(c, ConfusionCounts::new(0, 0, 4, 0));
        assert!(c.update(&[1; 4], &[0; 5]).is_err());
        assert!(c.update(&[2], &[0]).is_err());
    }

    #[test]
    fn hand_computed_scores() {
        let r = compute(&ConfusionCounts::new(6, 2, 1, 1), 2.0).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.iou - 0.75).abs() < 1e-12);
        assert!((r.f2 - 6.0 / 7.0).abs() < 1e-12);
        let perfect = compute(&ConfusionCounts::new(5, 3, 0, 0), 2.0).unwrap();
        assert_eq!((perfect.accuracy, perfect.iou, perfect.f2), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominator_conventions() {
        let empty = compute(&ConfusionCounts::new(0, 10, 0, 0), 2.0).unwrap();
        assert_eq!((empty.iou, empty.f2, empty.precision, empty.recall), (1.0, 1.0, 1.0, 1.0));
        let missed = compute(&ConfusionCounts::new(0, 5, 0, 3), 2.0).unwrap();
        assert_eq!((missed.iou, missed.f2, missed.precision, missed.recall), (0.0, 0.0, 0.0, 0.0));
        assert!(compute(&ConfusionCounts::default(), 2.0).is_err());
    }

    #[test]
    fn merge_overflow_is_an_error() {
        let big = ConfusionCounts::new(u64::MAX, 0, 0, 0);
        assert!(big.merge(&ConfusionCounts::new(1, 0, 0, 0)).is_err());
        let half = ConfusionCounts::new(u64::MAX / 2 + 1, 0, 0, 0);
        assert!(half.merge(&ConfusionCounts::new(0, u64::MAX / 2 + 1, 0, 0)).is_err());
    }

    #[test]
    fn json_schema_and_rounding() {
        let r = compute(&ConfusionCounts::new(6, 2, 1, 1), 2.0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut want = vec!["accuracy", "iou", "f2", "precision", "recall", "beta", "conventions"];
        want.sort();
        let mut got = keys.clone();
        got.sort();
        assert_eq!(got, want);
        assert_eq!(v["f2"].as_f64().unwrap(), 85.7143);
        assert_eq!(v["iou"].as_f64().unwrap(), 75.0);
        assert_eq!(v["beta"].as_f64().unwrap(), 2.0);
    }

    #[test]
    fn diagnostics_report_mean_class_accuracy() {
        let mut acc = Accumulator::default();
        acc.add("a", &[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        acc.add("b", &[0, 0, 0, 0], &[0, 0, 0, 1]).unwrap();
        let d = acc.diagnostics(2.0).unwrap();
        assert_eq!(d.counts, ConfusionCounts::new(1, 5, 1, 1));
        assert!((d.background_accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((d.gas_recall - 0.5).abs() < 1e-15);
        assert!((d.mean_class_accuracy - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!((d.macro_iou - 0.25).abs() < 1e-15);
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000).prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn merge_is_commutative_associative_with_identity(a in counts(), b in counts(), c in counts()) {
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
            prop_assert_eq!(a.merge(&b).unwrap().merge(&c).unwrap(), a.merge(&b.merge(&c).unwrap()).unwrap());
            prop_assert_eq!(a.merge(&ConfusionCounts::default()).unwrap(), a);
        }

        #[test]
        fn scores_in_unit_interval_and_f1_is_harmonic_mean(c in counts()) {
            prop_assume!(c.total() > 0);
            let r = compute(&c, 2.0).unwrap();
            for v in [r.accuracy, r.iou, r.f2, r.precision, r.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let f1 = compute(&c, 1.0).unwrap().f2;
            let (p, q) = (r.precision, r.recall);
            let h = if c.tp + c.fp + c.fn_ == 0 { 1.0 } else if p + q == 0.0 { 0.0 } else { 2.0 * p * q / (p + q) };
            prop_assert!((f1 - h).abs() < 1e-12);
        }
    }
}
