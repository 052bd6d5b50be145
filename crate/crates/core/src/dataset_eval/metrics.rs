//! Binary segmentation metrics with foreground as the positive class.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    /// Counts over two binary masks; any nonzero value is foreground.
    pub fn from_masks(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merged(&self, o: &Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Ratio with an explicit value for `0/0`.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl Scores {
    /// An empty class on both sides counts as a perfect match for its IoU,
    /// precision and recall; F1 is 0 when precision and recall are both 0.
    pub fn from_counts(c: &PixelCounts) -> Self {
        let iou_fg = ratio(c.tp, c.tp + c.fp + c.fn_, 1.0);
        let iou_bg = ratio(c.tn, c.tn + c.fp + c.fn_, 1.0);
        let precision = ratio(c.tp, c.tp + c.fp, 1.0);
        let recall = ratio(c.tp, c.tp + c.fn_, 1.0);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            iou_fg,
            iou_bg,
            miou: 0.5 * (iou_fg + iou_bg),
            f1,
            precision,
            recall,
            accuracy: ratio(c.tp + c.tn, c.total(), 1.0),
        }
    }

    fn mean(all: &[Scores]) -> Self {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Self {
            iou_fg: avg(|s| s.iou_fg),
            iou_bg: avg(|s| s.iou_bg),
            miou: avg(|s| s.miou),
            f1: avg(|s| s.f1),
            precision: avg(|s| s.precision),
            recall: avg(|s| s.recall),
            accuracy: avg(|s| s.accuracy),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pixel counts pooled over all images before taking ratios.
    #[default]
    Micro,
    /// Per-image scores averaged.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub aggregation: Aggregation,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub counts: PixelCounts,
    pub per_image: Vec<PixelCounts>,
    #[serde(default)]
    pub ids: Vec<String>,
}

impl SegReport {
    pub fn from_counts(per_image: Vec<PixelCounts>, aggregation: Aggregation) -> Self {
        let counts = per_image.iter().fold(PixelCounts::default(), |a, c| a.merged(c));
        let s = match aggregation {
            Aggregation::Micro => Scores::from_counts(&counts),
            Aggregation::Macro => {
                let all: Vec<Scores> = per_image.iter().map(Scores::from_counts).collect();
                Scores::mean(&all)
            }
        };
        Self {
            aggregation,
            iou_fg: s.iou_fg,
            iou_bg: s.iou_bg,
            miou: s.miou,
            f1: s.f1,
            precision: s.precision,
            recall: s.recall,
            accuracy: s.accuracy,
            counts,
            per_image,
            ids: Vec::new(),
        }
    }

    pub fn scores(&self) -> Scores {
        Scores {
            iou_fg: self.iou_fg,
            iou_bg: self.iou_bg,
            miou: self.miou,
            f1: self.f1,
            precision: self.precision,
            recall: self.recall,
            accuracy: self.accuracy,
        }
    }

    /// Recomputes the scores from the stored counts.
    pub fn recomputed(&self) -> Scores {
        Self::from_counts(self.per_image.clone(), self.aggregation).scores()
    }
}

pub fn compute_metrics(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<SegReport> {
    Ok(SegReport::from_counts(vec![PixelCounts::from_masks(pred, gt)?], Aggregation::Micro))
}

pub fn compute_metrics_batch(preds: &[Array2<u8>], gts: &[Array2<u8>], aggregation: Aggregation) -> Result<SegReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("no masks to score".into()));
    }
    let per = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| PixelCounts::from_masks(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegReport::from_counts(per, aggregation))
}
