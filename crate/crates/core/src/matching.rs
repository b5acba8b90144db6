//! Minimum-cost bipartite assignment between queries and ground truths.

use ndarray::Array2;

use crate::autograd::focal_term;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::prompts::TokenGroupMap;

/// Optimal assignment of a rectangular cost matrix. Returns `(row, col)`
/// pairs sorted by row, covering `min(rows, cols)` entries, and their total.
///
/// Shortest-augmenting-path Hungarian algorithm with potentials, O(n^2 m).
pub fn hungarian(cost: &Array2<f64>) -> Result<(Vec<(usize, usize)>, f64)> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let (r, c) = cost.dim();
    if r == 0 || c == 0 {
        return Ok((vec![], 0.0));
    }
    let transposed = r > c;
    let a = if transposed { cost.t().to_owned() } else { cost.clone() };
    let (n, m) = a.dim();

    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
    Ok((pairs, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, ground truth)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn from_pairs(pairs: Vec<(usize, usize)>, queries: usize, total_cost: f64) -> Self {
        let mut matched = vec![false; queries];
        for &(q, _) in &pairs {
            matched[q] = true;
        }
        let unmatched = (0..queries).filter(|&q| !matched[q]).collect();
        Self { pairs, unmatched, total_cost }
    }
}

/// Weights and focal parameters of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCost {
    pub lambda_cls: f64,
    pub lambda_loc: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self { lambda_cls: 2.0, lambda_loc: 5.0, alpha: 0.25, gamma: 2.0 }
    }
}

/// Classification cost of labelling a query with logits `row` as the class
/// owning `cols`: mean over those columns of the focal term for a positive
/// label minus the focal term for a negative label.
pub fn class_cost(row: &[f64], cols: &[usize], alpha: f64, gamma: f64) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    cols.iter()
        .map(|&j| focal_term(row[j], 1.0, alpha, gamma) - focal_term(row[j], 0.0, alpha, gamma))
        .sum::<f64>()
        / cols.len() as f64
}

/// `K x G` cost matrix: `lambda_cls * class cost + lambda_loc * L1 centre
/// distance`. `boxes` holds `(cx, cy, w, h)` rows.
pub fn cost_matrix(
    boxes: &Array2<f64>,
    logits: &Array2<f64>,
    gt: &[(BBox, usize)],
    groups: &TokenGroupMap,
    w: MatchCost,
) -> Result<Array2<f64>> {
    let k = boxes.nrows();
    if logits.nrows() != k || boxes.ncols() != 4 {
        return Err(Error::Shape("match inputs disagree on query count".into()));
    }
    let cols: Vec<Vec<usize>> = (0..groups.num_groups).map(|g| groups.columns_of(g)).collect();
    for &(_, c) in gt {
        if cols.get(c).is_none_or(|v| v.is_empty()) {
            return Err(Error::InvalidPrompt(format!("ground-truth class {c} has no prompt tokens")));
        }
    }
    let mut cost = Array2::zeros((k, gt.len()));
    for i in 0..k {
        let row = logits.row(i).to_vec();
        for (j, (b, c)) in gt.iter().enumerate() {
            let loc = (boxes[[i, 0]] - b.cx).abs() + (boxes[[i, 1]] - b.cy).abs();
            cost[[i, j]] = w.lambda_cls * class_cost(&row, &cols[*c], w.alpha, w.gamma) + w.lambda_loc * loc;
        }
    }
    Ok(cost)
}

/// Globally optimal query/ground-truth assignment.
pub fn match_queries(
    boxes: &Array2<f64>,
    logits: &Array2<f64>,
    gt: &[(BBox, usize)],
    groups: &TokenGroupMap,
    w: MatchCost,
) -> Result<MatchResult> {
    let k = boxes.nrows();
    if k == 0 {
        return Err(Error::Shape("matching needs at least one query".into()));
    }
    if gt.is_empty() {
        return Ok(MatchResult::from_pairs(vec![], k, 0.0));
    }
    let cost = cost_matrix(boxes, logits, gt, groups, w)?;
    let (pairs, total) = hungarian(&cost)?;
    Ok(MatchResult::from_pairs(pairs, k, total))
}
