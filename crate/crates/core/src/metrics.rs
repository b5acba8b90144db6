//! Counting and detection metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub count: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageTruth {
    pub count: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// MAE and RMSE only.
    Counting,
    /// Counting metrics plus AP and AP50.
    #[default]
    Detection,
}

/// Predicted and true count of one class in one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPair {
    pub pred: usize,
    pub gt: usize,
}

/// Optional prompt-sensitivity trials.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptTrials {
    /// Count predicted for a class absent from the image (`pred`) against
    /// the count of the class that is present (`gt`).
    pub absent: Vec<CountPair>,
    /// Present-class counts, for PCCN.
    pub present: Vec<CountPair>,
    /// Per-scene, per-class counts on multi-class scenes.
    pub multi_class: Vec<Vec<CountPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub nmn: Option<f64>,
    pub pccn: Option<f64>,
    pub cnt_precision: Option<f64>,
    pub cnt_recall: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "{:<14}{:>10}", "metric", "value")?;
        writeln!(f, "{:<14}{:>10}", "images", self.images)?;
        writeln!(f, "{:<14}{:>10.4}", "MAE", self.mae)?;
        writeln!(f, "{:<14}{:>10.4}", "RMSE", self.rmse)?;
        writeln!(f, "{:<14}{:>10}", "AP", opt(self.ap))?;
        writeln!(f, "{:<14}{:>10}", "AP50", opt(self.ap50))?;
        writeln!(f, "{:<14}{:>10}", "NMN", opt(self.nmn))?;
        writeln!(f, "{:<14}{:>10}", "PCCN", opt(self.pccn))?;
        writeln!(f, "{:<14}{:>10}", "CntP", opt(self.cnt_precision))?;
        write!(f, "{:<14}{:>10}", "CntR", opt(self.cnt_recall))
    }
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    (pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Average precision at one IoU threshold with 101-point interpolation.
/// Detections are pooled over images and processed by descending score; each
/// is matched to the unmatched ground truth of its image with the highest
/// IoU, if that IoU reaches `threshold`.
pub fn average_precision(preds: &[ImagePrediction], gts: &[ImageTruth], threshold: f64) -> f64 {
    let total_gt: usize = gts.iter().map(|g| g.boxes.len()).sum();
    let mut dets: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, p)| p.scores.iter().enumerate().map(move |(d, s)| (*s, img, d)))
        .collect();
    if total_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
    for (_, img, d) in dets {
        let pb = &preds[img].boxes[d];
        let mut best = (f64::NEG_INFINITY, None);
        for (j, gb) in gts[img].boxes.iter().enumerate() {
            if used[img][j] {
                continue;
            }
            let v = iou_unchecked(pb, gb);
            if v > best.0 {
                best = (v, Some(j));
            }
        }
        match best {
            (v, Some(j)) if v >= threshold => {
                used[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn relative_term(num: f64, gt: usize) -> f64 {
    if gt == 0 {
        log::warn!("ground-truth count 0 in a relative metric; using unit normaliser");
        num
    } else {
        num / gt as f64
    }
}

pub fn evaluate(preds: &[ImagePrediction], gts: &[ImageTruth], mode: EvalMode, trials: Option<&PromptTrials>) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    for p in preds {
        if p.boxes.len() != p.scores.len() {
            return Err(Error::Shape("prediction boxes and scores differ in length".into()));
        }
    }
    let pc: Vec<f64> = preds.iter().map(|p| p.count as f64).collect();
    let gc: Vec<f64> = gts.iter().map(|g| g.count as f64).collect();
    let (ap, ap50) = match mode {
        EvalMode::Counting => (None, None),
        EvalMode::Detection => {
            let per: Vec<f64> = iou_thresholds().iter().map(|&t| average_precision(preds, gts, t)).collect();
            (Some(per.iter().sum::<f64>() / per.len() as f64), Some(per[0]))
        }
    };
    let mut report = EvalReport {
        images: preds.len(),
        mae: mae(&pc, &gc),
        rmse: rmse(&pc, &gc),
        ap,
        ap50,
        nmn: None,
        pccn: None,
        cnt_precision: None,
        cnt_recall: None,
    };
    if let Some(t) = trials {
        if !t.absent.is_empty() {
            report.nmn = Some(t.absent.iter().map(|c| relative_term(c.pred as f64, c.gt)).sum::<f64>() / t.absent.len() as f64);
        }
        if !t.present.is_empty() {
            let s: f64 = t
                .present
                .iter()
                .map(|c| (1.0 - relative_term((c.pred as f64 - c.gt as f64).abs(), c.gt)).max(0.0))
                .sum();
            report.pccn = Some(100.0 * s / t.present.len() as f64);
        }
        if !t.multi_class.is_empty() {
            let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
            for c in t.multi_class.iter().flatten() {
                tp += c.pred.min(c.gt);
                fp += c.pred.saturating_sub(c.gt);
                fnn += c.gt.saturating_sub(c.pred);
            }
            let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
            report.cnt_precision = Some(ratio(tp, fp));
            report.cnt_recall = Some(ratio(tp, fnn));
        }
    }
    Ok(report)
}
