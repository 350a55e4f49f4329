//! Axis-aligned boxes and pairwise similarity metrics.
//!
//! Boxes are stored in center form `(cx, cy, w, h)`. Corner form
//! `(x1, y1, x2, y2)` is only used at I/O boundaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default normalizing constant for [`nwd`], in pixels.
pub const DEFAULT_NWD_C: f64 = 28.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite component in ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1)
    }

    /// `[x1, y1, x2, y2]`
    pub fn to_corners(&self) -> [f64; 4] {
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Square root of the area, the size measure used for size buckets.
    pub fn size(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// Scale about the origin.
    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Clip to `[0, width] x [0, height]`. `None` when nothing positive-area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let [x1, y1, x2, y2] = self.to_corners();
        let (x1, y1) = (x1.clamp(0.0, width), y1.clamp(0.0, height));
        let (x2, y2) = (x2.clamp(0.0, width), y2.clamp(0.0, height));
        Self::from_corners(x1, y1, x2, y2).ok()
    }

    fn intersection(&self, other: &Self) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.to_corners();
        let [bx1, by1, bx2, by2] = other.to_corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// Corners of the smallest box enclosing both.
    fn hull(&self, other: &Self) -> [f64; 4] {
        let [ax1, ay1, ax2, ay2] = self.to_corners();
        let [bx1, by1, bx2, by2] = other.to_corners();
        [ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NwdConfig {
    c: f64,
}

impl NwdConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "NWD constant must be positive, got {c}"
            )));
        }
        Ok(Self { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

impl Default for NwdConfig {
    fn default() -> Self {
        Self { c: DEFAULT_NWD_C }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let [x1, y1, x2, y2] = a.hull(b);
    let hull = (x2 - x1) * (y2 - y1);
    inter / union - (hull - union).max(0.0) / hull
}

pub fn diou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [x1, y1, x2, y2] = a.hull(b);
    let diag2 = (x2 - x1).powi(2) + (y2 - y1).powi(2);
    let dist2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    iou(a, b) - dist2 / diag2
}

/// Wasserstein distance between the Gaussians fitted to two boxes,
/// i.e. the L2 distance between `[cx, cy, w/2, h/2]` vectors.
pub fn w2(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let d = [a.cx - b.cx, a.cy - b.cy, (a.w - b.w) * 0.5, (a.h - b.h) * 0.5];
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn nwd(a: &BoundingBox, b: &BoundingBox, cfg: &NwdConfig) -> f64 {
    nwd_from_w2(w2(a, b), cfg)
}

pub fn nwd_from_w2(distance: f64, cfg: &NwdConfig) -> f64 {
    (-distance / cfg.c).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Iou,
    Giou,
    Diou,
    W2,
    Nwd(NwdConfig),
}

impl Metric {
    pub fn eval(&self, a: &BoundingBox, b: &BoundingBox) -> f64 {
        match self {
            Metric::Iou => iou(a, b),
            Metric::Giou => giou(a, b),
            Metric::Diou => diou(a, b),
            Metric::W2 => w2(a, b),
            Metric::Nwd(cfg) => nwd(a, b, cfg),
        }
    }
}

/// Row-major `rows x cols` matrix of metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Element `(i, j)` is `metric(a[i], b[j])`. Rows are filled in parallel;
/// each element is computed independently so the result does not depend
/// on the thread count.
pub fn pairwise_matrix(metric: Metric, a: &[BoundingBox], b: &[BoundingBox]) -> Result<Matrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("pairwise_matrix requires non-empty box lists"));
    }
    let cols = b.len();
    let mut data = vec![0.0; a.len() * cols];
    data.par_chunks_mut(cols).zip(a.par_iter()).for_each(|(row, ba)| {
        for (out, bb) in row.iter_mut().zip(b) {
            *out = metric.eval(ba, bb);
        }
    });
    Ok(Matrix {
        rows: a.len(),
        cols,
        data,
    })
}
