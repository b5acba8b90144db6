//! Box algebra, overlap measures and RoI feature pooling.
//!
//! Boxes are stored in normalized center form `(cx, cy, w, h)`; corner form is
//! derived on demand. Every consumer (exemplar extraction, losses, metrics,
//! cropping) goes through the helpers here.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on normalized box bounds.
pub const BOX_EPS: f64 = 1e-6;

/// Axis-aligned rectangle in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box and checks it against the normalized-frame invariants.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box without validation. Callers must uphold the invariants.
    pub const fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Corner form `[x0, y0, x1, y1]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidGeometry(format!("degenerate box {self:?}")));
        }
        let lo = -BOX_EPS;
        let hi = 1.0 + BOX_EPS;
        if self.corners().iter().any(|&c| c < lo || c > hi) {
            return Err(Error::InvalidGeometry(format!("box {self:?} outside the unit frame")));
        }
        Ok(())
    }

    /// Clamps an arbitrary (possibly out-of-frame) center box into the unit
    /// frame, keeping a minimum extent of `min_size`.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64, min_size: f64) -> Self {
        let clamp_axis = |c: f64, s: f64| {
            let s = if s.is_finite() { s.abs() } else { min_size };
            let c = if c.is_finite() { c } else { 0.5 };
            let mut lo = (c - s / 2.0).clamp(0.0, 1.0);
            let mut hi = (c + s / 2.0).clamp(0.0, 1.0);
            if hi - lo < min_size {
                let mid = ((lo + hi) / 2.0).clamp(min_size / 2.0, 1.0 - min_size / 2.0);
                lo = mid - min_size / 2.0;
                hi = mid + min_size / 2.0;
            }
            ((lo + hi) / 2.0, hi - lo)
        };
        let (cx, w) = clamp_axis(cx, w);
        let (cy, h) = clamp_axis(cy, h);
        Self { cx, cy, w, h }
    }

    /// Maps a box living inside `frame` (itself a box of a larger image) back
    /// into the larger image's normalized coordinates.
    pub fn to_parent(&self, frame: &BBox) -> BBox {
        let [fx0, fy0, _, _] = frame.corners();
        BBox {
            cx: fx0 + self.cx * frame.w,
            cy: fy0 + self.cy * frame.h,
            w: self.w * frame.w,
            h: self.h * frame.h,
        }
    }
}

fn check_pair(a: &BBox, b: &BBox) -> Result<()> {
    a.validate()?;
    b.validate()
}

fn intersection_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

fn hull_area(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0))
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_pair(a, b)?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; boxes must have positive area.
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_pair(a, b)?;
    let (inter, union) = intersection_union(a, b);
    let hull = hull_area(a, b);
    Ok(inter / union - (hull - union) / hull)
}

/// A `height x width` lattice of `channels`-dimensional features, stored as a
/// `(height*width) x channels` matrix in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Array2<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, stride: usize, values: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || stride == 0 {
            return Err(Error::Shape("feature grid dimensions must be positive".into()));
        }
        if values.nrows() != height * width || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature grid values {:?} do not match {height}x{width}",
                values.dim()
            )));
        }
        Ok(Self { height, width, stride, values })
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Default RoIAlign sampling resolution per side.
pub const ROI_OUT_SIZE: usize = 7;

/// Sparse bilinear weights (cell index, weight) that [`roi_pool`] applies to a
/// `height x width` grid. Weights sum to one.
///
/// Sample points form an `out_size x out_size` lattice at the centres of the
/// sub-bins of `bbox`; cell centres sit at half-integer grid coordinates and
/// samples outside the centre hull are clamped to the border cells.
pub fn roi_weights(height: usize, width: usize, bbox: &BBox, out_size: usize) -> Vec<(usize, f64)> {
    let out_size = out_size.max(1);
    let [x0, y0, _, _] = bbox.corners();
    let norm = 1.0 / (out_size * out_size) as f64;
    let mut acc = vec![0.0f64; height * width];
    let axis = |start: f64, extent: f64, i: usize, cells: usize| -> (usize, usize, f64) {
        let p = start + (i as f64 + 0.5) / out_size as f64 * extent;
        let g = (p * cells as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
        let lo = g.floor() as usize;
        let hi = (lo + 1).min(cells - 1);
        (lo, hi, g - lo as f64)
    };
    for iy in 0..out_size {
        let (r0, r1, fy) = axis(y0, bbox.h, iy, height);
        for ix in 0..out_size {
            let (c0, c1, fx) = axis(x0, bbox.w, ix, width);
            acc[r0 * width + c0] += norm * (1.0 - fy) * (1.0 - fx);
            acc[r0 * width + c1] += norm * (1.0 - fy) * fx;
            acc[r1 * width + c0] += norm * fy * (1.0 - fx);
            acc[r1 * width + c1] += norm * fy * fx;
        }
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, w)| *w != 0.0)
        .collect()
}

/// RoIAlign-style pooling of `grid` over `bbox` to one channel vector: an
/// `out_size x out_size` lattice of bilinear samples averaged together.
pub fn roi_pool(grid: &FeatureGrid, bbox: &BBox, out_size: usize) -> Result<Array1<f64>> {
    bbox.validate()?;
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature grid".into()));
    }
    let mut out = Array1::zeros(grid.channels());
    for (cell, w) in roi_weights(grid.height, grid.width, bbox, out_size) {
        out.scaled_add(w, &grid.values.row(cell));
    }
    Ok(out)
}
