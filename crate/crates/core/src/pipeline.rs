//! Region proposal plumbing: anchor tiling, max-IoU label assignment,
//! box delta coding, NMS and top-k selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::losses::{rectify_score, LossWeights};

/// Largest log size ratio accepted by [`decode_deltas`].
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorGrid {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub feature_h: usize,
    pub feature_w: usize,
}

impl AnchorGrid {
    /// Grid for an image of the given size; the feature map is `ceil(size / stride)`.
    pub fn for_image(
        width: usize,
        height: usize,
        stride: usize,
        scales: Vec<f64>,
        aspect_ratios: Vec<f64>,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("anchor stride must be positive".into()));
        }
        Ok(Self {
            stride,
            scales,
            aspect_ratios,
            feature_h: height.div_ceil(stride),
            feature_w: width.div_ceil(stride),
        })
    }

    pub fn anchors_per_position(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn len(&self) -> usize {
        self.feature_h * self.feature_w * self.anchors_per_position()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat anchor index of `(row, col, a)` where `a = scale * ratios + ratio`.
    pub fn index(&self, row: usize, col: usize, a: usize) -> usize {
        (row * self.feature_w + col) * self.anchors_per_position() + a
    }
}

/// Anchors in row-major position order, then scale, then aspect ratio.
/// Aspect ratio is `h / w`; each anchor keeps area `scale^2`.
pub fn generate_anchors(grid: &AnchorGrid) -> Result<Vec<BoundingBox>> {
    if grid.scales.is_empty() || grid.aspect_ratios.is_empty() {
        return Err(Error::InvalidArgument(
            "anchor grid needs at least one scale and one aspect ratio".into(),
        ));
    }
    if grid.stride == 0 || grid.feature_h == 0 || grid.feature_w == 0 {
        return Err(Error::InvalidArgument(
            "anchor grid needs positive stride and feature size".into(),
        ));
    }
    let s = grid.stride as f64;
    let mut anchors = Vec::with_capacity(grid.len());
    for row in 0..grid.feature_h {
        for col in 0..grid.feature_w {
            let cx = (col as f64 + 0.5) * s;
            let cy = (row as f64 + 0.5) * s;
            for &scale in &grid.scales {
                for &ratio in &grid.aspect_ratios {
                    let r = ratio.sqrt();
                    anchors.push(BoundingBox::new(cx, cy, scale / r, scale * r)?);
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub label_threshold: f64,
    pub negative_threshold: f64,
    /// Force each ground truth's best anchor to be positive.
    pub rescue_best_anchor: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            label_threshold: 0.5,
            negative_threshold: 0.5,
            rescue_best_anchor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground truth, set for positives.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl AssignmentResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Demote negatives overlapping any of `regions` to ignore.
    pub fn ignore_regions(&mut self, anchors: &[BoundingBox], regions: &[BoundingBox]) {
        if regions.is_empty() {
            return;
        }
        for (label, anchor) in self.labels.iter_mut().zip(anchors) {
            if *label == AnchorLabel::Negative && regions.iter().any(|r| iou(anchor, r) > 0.0) {
                *label = AnchorLabel::Ignore;
            }
        }
    }
}

/// Max-IoU label assignment.
///
/// An anchor is positive when its best IoU reaches `label_threshold`,
/// negative below `negative_threshold`, ignored in between. With rescue
/// enabled, every ground truth additionally claims its highest-IoU anchor
/// (lowest index on ties; ground truths processed in order).
pub fn assign_labels(anchors: &[BoundingBox], gts: &[BoundingBox], cfg: &AssignConfig) -> Result<AssignmentResult> {
    let (pos_t, neg_t) = (cfg.label_threshold, cfg.negative_threshold);
    if !(0.0..=1.0).contains(&pos_t) || !(0.0..=1.0).contains(&neg_t) || neg_t > pos_t {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= negative_threshold ({neg_t}) <= label_threshold ({pos_t}) <= 1"
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gts.is_empty() {
        return Ok(AssignmentResult {
            labels,
            matched,
            max_iou,
        });
    }

    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (i, anchor) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best.1 {
                best = (g, v);
            }
            if v > best_anchor[g].1 {
                best_anchor[g] = (i, v);
            }
        }
        max_iou[i] = best.1;
        if best.1 >= pos_t {
            labels[i] = AnchorLabel::Positive;
            matched[i] = Some(best.0);
        } else if best.1 >= neg_t {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    if cfg.rescue_best_anchor {
        for (g, &(i, v)) in best_anchor.iter().enumerate() {
            if v > 0.0 {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(g);
            }
        }
    }
    Ok(AssignmentResult {
        labels,
        matched,
        max_iou,
    })
}

/// Center offsets normalized by anchor size, log size ratios.
pub fn encode_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    [
        (gt.cx() - anchor.cx()) / anchor.w(),
        (gt.cy() - anchor.cy()) / anchor.h(),
        (gt.w() / anchor.w()).ln(),
        (gt.h() / anchor.h()).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; log ratios are clamped to
/// `[-MAX_LOG_RATIO, MAX_LOG_RATIO]`.
pub fn decode_deltas(anchor: &BoundingBox, deltas: &[f64; 4]) -> Result<BoundingBox> {
    let dw = deltas[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    let dh = deltas[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    BoundingBox::new(
        anchor.cx() + deltas[0] * anchor.w(),
        anchor.cy() + deltas[1] * anchor.h(),
        anchor.w() * dw.exp(),
        anchor.h() * dh.exp(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub s_cls: f64,
    pub p_nwd: Option<f64>,
    pub s_final: f64,
    /// Index of the anchor this proposal was regressed from.
    pub anchor: usize,
}

impl Proposal {
    pub fn new(
        bbox: BoundingBox,
        s_cls: f64,
        p_nwd: Option<f64>,
        weights: &LossWeights,
        anchor: usize,
    ) -> Result<Self> {
        let s_final = match p_nwd {
            Some(p) => rectify_score(s_cls, p, weights)?,
            None => s_cls,
        };
        Ok(Self {
            bbox,
            s_cls,
            p_nwd,
            s_final,
            anchor,
        })
    }

    pub fn score(&self, key: ScoreKey) -> f64 {
        match key {
            ScoreKey::Cls => self.s_cls,
            ScoreKey::Final => self.s_final,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKey {
    Cls,
    #[default]
    Final,
}

/// Indices sorted by descending score; equal scores keep input order.
fn order_by_score(proposals: &[Proposal], key: ScoreKey) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score(key)
            .partial_cmp(&proposals[a].score(key))
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Greedy non-maximum suppression. A proposal is dropped when its IoU with
/// an already kept, higher-ranked proposal exceeds `iou_threshold`.
pub fn nms(proposals: &[Proposal], iou_threshold: f64, key: ScoreKey) -> Vec<Proposal> {
    let order = order_by_score(proposals, key);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let b = &proposals[i].bbox;
        if keep.iter().all(|&k| iou(&proposals[k].bbox, b) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| proposals[i].clone()).collect()
}

/// Drop proposals scoring below `threshold`, then keep the best `k`.
pub fn select_topk(proposals: &[Proposal], k: usize, threshold: f64, key: ScoreKey) -> Vec<Proposal> {
    order_by_score(proposals, key)
        .into_iter()
        .filter(|&i| proposals[i].score(key) >= threshold)
        .take(k)
        .map(|i| proposals[i].clone())
        .collect()
}
