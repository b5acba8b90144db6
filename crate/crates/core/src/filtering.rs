//! Positive/negative query filtering, counting and pseudo-exemplar selection.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::model::{Inference, QueryBatch};
use crate::prompts::{Polarity, TokenGroupMap};

/// Confidence threshold used unless overridden.
pub const DEFAULT_SIGMA: f64 = 0.23;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Query similarities against positive and negative prompt features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    /// `K x M+`.
    pub pos: Array2<f64>,
    /// `K x M-`; zero columns when there are no negatives.
    pub neg: Array2<f64>,
}

fn row_max(m: &Array2<f64>, i: usize) -> f64 {
    m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl SimilarityPair {
    pub fn new(pos: Array2<f64>, neg: Array2<f64>) -> Result<Self> {
        if pos.nrows() != neg.nrows() {
            return Err(Error::Shape(format!("{} positive rows vs {} negative rows", pos.nrows(), neg.nrows())));
        }
        if pos.ncols() == 0 {
            return Err(Error::Shape("no positive prompt features".into()));
        }
        if pos.iter().chain(neg.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("similarity logits".into()));
        }
        Ok(Self { pos, neg })
    }

    /// Splits `K x M` logits by group. `negatives` restricts which negative
    /// groups contribute columns; `None` keeps them all.
    pub fn from_logits(logits: &Array2<f64>, groups: &TokenGroupMap, negatives: Option<&[usize]>) -> Result<Self> {
        let fg = groups.feature_groups();
        if fg.len() != logits.ncols() {
            return Err(Error::Shape(format!("{} logit columns for {} prompt features", logits.ncols(), fg.len())));
        }
        let pos_cols: Vec<usize> = (0..fg.len()).filter(|&c| fg[c] == 0).collect();
        let neg_cols: Vec<usize> = (0..fg.len())
            .filter(|&c| fg[c] != 0 && negatives.is_none_or(|keep| keep.contains(&fg[c])))
            .collect();
        let pick = |cols: &[usize]| Array2::from_shape_fn((logits.nrows(), cols.len()), |(i, j)| logits[[i, cols[j]]]);
        Self::new(pick(&pos_cols), pick(&neg_cols))
    }

    pub fn queries(&self) -> usize {
        self.pos.nrows()
    }

    pub fn max_pos(&self, i: usize) -> f64 {
        row_max(&self.pos, i)
    }

    /// `-inf` when there are no negative columns.
    pub fn max_neg(&self, i: usize) -> f64 {
        row_max(&self.neg, i)
    }
}

impl Inference {
    pub fn similarity(&self) -> Result<SimilarityPair> {
        SimilarityPair::from_logits(&self.logits, &self.groups, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    BelowThreshold,
    NegativeDominates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    /// Kept query indices, increasing.
    pub kept: Vec<usize>,
    /// Per query: sigmoid of the best positive logit.
    pub scores: Vec<f64>,
    /// Per query: why it was dropped, `None` if kept.
    pub reasons: Vec<Option<Rejection>>,
}

impl FilterDecision {
    pub fn rejected(&self, reason: Rejection) -> usize {
        self.reasons.iter().filter(|r| **r == Some(reason)).count()
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must lie in (0, 1), got {sigma}")))
    }
}

/// Keeps query `i` iff `sigmoid(max pos) > sigma` and `max pos > max neg`.
/// A query failing the first condition is reported as below threshold.
pub fn filter_queries(sim: &SimilarityPair, sigma: f64) -> Result<FilterDecision> {
    check_sigma(sigma)?;
    if sim.pos.iter().chain(sim.neg.iter()).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("similarity logits".into()));
    }
    let k = sim.queries();
    let mut kept = Vec::new();
    let mut scores = Vec::with_capacity(k);
    let mut reasons = Vec::with_capacity(k);
    for i in 0..k {
        let mp = sim.max_pos(i);
        let score = sigmoid(mp);
        scores.push(score);
        let reason = if !(score > sigma) {
            Some(Rejection::BelowThreshold)
        } else if !(mp > sim.max_neg(i)) {
            Some(Rejection::NegativeDominates)
        } else {
            kept.push(i);
            None
        };
        reasons.push(reason);
    }
    Ok(FilterDecision { kept, scores, reasons })
}

pub fn count(decision: &FilterDecision) -> usize {
    decision.kept.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub below_threshold: usize,
    pub negative_dominates: usize,
}

/// Counting output exchanged with the CLI and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub rejected: RejectionCounts,
}

impl CountResult {
    pub fn empty() -> Self {
        Self { count: 0, boxes: vec![], scores: vec![], rejected: RejectionCounts::default() }
    }

    pub fn from_decision(decision: &FilterDecision, boxes: &[BBox]) -> Self {
        Self {
            count: count(decision),
            boxes: decision.kept.iter().map(|&i| boxes[i]).collect(),
            scores: decision.kept.iter().map(|&i| decision.scores[i]).collect(),
            rejected: RejectionCounts {
                below_threshold: decision.rejected(Rejection::BelowThreshold),
                negative_dominates: decision.rejected(Rejection::NegativeDominates),
            },
        }
    }

    /// Kept boxes ordered by descending score, ties by position.
    pub fn ranked_boxes(&self) -> Vec<BBox> {
        let mut idx: Vec<usize> = (0..self.boxes.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.boxes[i]).collect()
    }
}

/// Greedy non-maximum suppression over a result's boxes; optional
/// post-processing, never applied by default.
pub fn nms(result: &CountResult, iou_threshold: f64) -> CountResult {
    let mut idx: Vec<usize> = (0..result.boxes.len()).collect();
    idx.sort_by(|&a, &b| result.scores[b].total_cmp(&result.scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in idx {
        if keep.iter().all(|&j| iou_unchecked(&result.boxes[i], &result.boxes[j]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep.sort_unstable();
    CountResult {
        count: keep.len(),
        boxes: keep.iter().map(|&i| result.boxes[i]).collect(),
        scores: keep.iter().map(|&i| result.scores[i]).collect(),
        rejected: result.rejected,
    }
}

/// Top-`n` boxes for use as exemplars. Positive polarity ranks queries that
/// pass the filter by positive score; negative polarity ranks queries whose
/// best negative logit clears `sigma` and beats the best positive logit.
pub fn select_pseudo_exemplars(
    batch: &QueryBatch,
    sim: &SimilarityPair,
    sigma: f64,
    n: usize,
    polarity: Polarity,
) -> Result<Vec<BBox>> {
    check_sigma(sigma)?;
    if n == 0 {
        return Err(Error::Config("pseudo-exemplar budget must be at least 1".into()));
    }
    if batch.boxes.len() != sim.queries() {
        return Err(Error::Shape("query batch and similarity rows differ".into()));
    }
    let mut cand: Vec<(usize, f64)> = match polarity {
        Polarity::Positive => {
            let d = filter_queries(sim, sigma)?;
            d.kept.iter().map(|&i| (i, d.scores[i])).collect()
        }
        Polarity::Negative => {
            if sim.neg.ncols() == 0 {
                return Err(Error::InvalidPrompt("negative pseudo-exemplars need negative prompts".into()));
            }
            (0..sim.queries())
                .filter_map(|i| {
                    let (mp, mn) = (sim.max_pos(i), sim.max_neg(i));
                    let s = sigmoid(mn);
                    (s > sigma && mn > mp).then_some((i, s))
                })
                .collect()
        }
    };
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(cand.into_iter().take(n).map(|(i, _)| batch.boxes[i]).collect())
}
