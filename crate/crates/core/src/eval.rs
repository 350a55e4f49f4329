//! Detection metrics and the score analyses: AP/AR at a single IoU
//! threshold with size buckets, the classification-confidence falloff
//! curve, and score/IoU Pearson correlations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::heads::{HeadOutput, ProposalNet};
use crate::losses::sigmoid;
use crate::pipeline::{AnchorGrid, Proposal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub max_detections: usize,
    /// Size edges on `sqrt(area)`: small `< small_edge <=` medium `< large_edge <=` large.
    pub small_edge: f64,
    pub large_edge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_detections: 100,
            small_edge: 32.0,
            large_edge: 96.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::InvalidArgument("max_detections must be positive".into()));
        }
        if !(0.0 < self.small_edge && self.small_edge < self.large_edge) {
            return Err(Error::InvalidArgument("need 0 < small_edge < large_edge".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 4] = [
        SizeBucket::All,
        SizeBucket::Small,
        SizeBucket::Medium,
        SizeBucket::Large,
    ];

    pub fn contains(&self, b: &BoundingBox, cfg: &EvalConfig) -> bool {
        let s = b.size();
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => s < cfg.small_edge,
            SizeBucket::Medium => s >= cfg.small_edge && s < cfg.large_edge,
            SizeBucket::Large => s >= cfg.large_edge,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub category: String,
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

struct Matched {
    /// `(score, outcome)` per considered detection, in descending score order.
    detections: Vec<(f64, Outcome)>,
    positives: usize,
    recalled: usize,
}

/// Greedy matching of one image and category. Ground truths outside the
/// bucket are ignored: detections matched to them, and unmatched detections
/// outside the bucket, count neither way.
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], bucket: SizeBucket, cfg: &EvalConfig) -> Matched {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(cfg.max_detections);
    let ignored: Vec<bool> = gts.iter().map(|g| !bucket.contains(&g.bbox, cfg)).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for &d in &order {
        let det = dets[d];
        // prefer unignored ground truths; among a class prefer the highest IoU, then the lowest index
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v < cfg.iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bv)) => (ignored[b] && !ignored[g]) || (ignored[b] == ignored[g] && v > bv),
            };
            if better {
                best = Some((g, v));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                taken[g] = true;
                if ignored[g] {
                    Outcome::Ignored
                } else {
                    Outcome::TruePositive
                }
            }
            None if !bucket.contains(&det.bbox, cfg) => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        out.push((det.score, outcome));
    }
    let positives = ignored.iter().filter(|i| !**i).count();
    let recalled = taken.iter().zip(&ignored).filter(|(t, i)| **t && !**i).count();
    Matched {
        detections: out,
        positives,
        recalled,
    }
}

/// 101-point interpolated AP from per-detection outcomes. Ties in score keep
/// image order, then detection order.
fn interpolated_ap(mut dets: Vec<(f64, Outcome)>, positives: usize) -> f64 {
    dets.retain(|(_, o)| *o != Outcome::Ignored);
    // stable: equal scores keep their input order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (i, (_, o)) in dets.iter().enumerate() {
        if *o == Outcome::TruePositive {
            tp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScores {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub ground_truths: usize,
}

fn evaluate_category(images: &[ImageResult], category: &str, bucket: SizeBucket, cfg: &EvalConfig) -> BucketScores {
    let mut all = Vec::new();
    let (mut positives, mut recalled) = (0, 0);
    for im in images {
        let dets: Vec<&Detection> = im.detections.iter().filter(|d| d.category == category).collect();
        let gts: Vec<&GroundTruth> = im.ground_truths.iter().filter(|g| g.category == category).collect();
        let m = match_image(&dets, &gts, bucket, cfg);
        all.extend(m.detections);
        positives += m.positives;
        recalled += m.recalled;
    }
    if positives == 0 {
        return BucketScores {
            ap: None,
            ar: None,
            ground_truths: 0,
        };
    }
    BucketScores {
        ap: Some(interpolated_ap(all, positives)),
        ar: Some(recalled as f64 / positives as f64),
        ground_truths: positives,
    }
}

/// Scores for one category (or the category mean) in every size bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub all: BucketScores,
    pub small: BucketScores,
    pub medium: BucketScores,
    pub large: BucketScores,
}

impl CategoryScores {
    pub fn bucket(&self, b: SizeBucket) -> &BucketScores {
        match b {
            SizeBucket::All => &self.all,
            SizeBucket::Small => &self.small,
            SizeBucket::Medium => &self.medium,
            SizeBucket::Large => &self.large,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub max_detections: usize,
    pub images: usize,
    pub detections: usize,
    /// Mean over categories with at least one ground truth in the bucket.
    pub overall: CategoryScores,
    pub per_category: BTreeMap<String, CategoryScores>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(images: &[ImageResult], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut categories: Vec<&str> = images
        .iter()
        .flat_map(|im| {
            im.ground_truths
                .iter()
                .map(|g| g.category.as_str())
                .chain(im.detections.iter().map(|d| d.category.as_str()))
        })
        .collect();
    categories.sort_unstable();
    categories.dedup();
    let per_category: BTreeMap<String, CategoryScores> = categories
        .iter()
        .map(|c| {
            let s = |b| evaluate_category(images, c, b, cfg);
            (
                c.to_string(),
                CategoryScores {
                    all: s(SizeBucket::All),
                    small: s(SizeBucket::Small),
                    medium: s(SizeBucket::Medium),
                    large: s(SizeBucket::Large),
                },
            )
        })
        .collect();
    let overall_bucket = |b: SizeBucket| BucketScores {
        ap: mean_defined(per_category.values().map(|c| c.bucket(b).ap)),
        ar: mean_defined(per_category.values().map(|c| c.bucket(b).ar)),
        ground_truths: per_category.values().map(|c| c.bucket(b).ground_truths).sum(),
    };
    let overall = CategoryScores {
        all: overall_bucket(SizeBucket::All),
        small: overall_bucket(SizeBucket::Small),
        medium: overall_bucket(SizeBucket::Medium),
        large: overall_bucket(SizeBucket::Large),
    };
    Ok(EvalReport {
        iou_threshold: cfg.iou_threshold,
        max_detections: cfg.max_detections,
        images: images.len(),
        detections: images.iter().map(|im| im.detections.len()).sum(),
        overall,
        per_category,
    })
}

/// AP of one bucket over all categories; `None` when the bucket has no ground truths.
pub fn average_precision(images: &[ImageResult], cfg: &EvalConfig, bucket: SizeBucket) -> Result<Option<f64>> {
    Ok(evaluate(images, cfg)?.overall.bucket(bucket).ap)
}

pub fn average_recall(images: &[ImageResult], cfg: &EvalConfig, bucket: SizeBucket) -> Result<Option<f64>> {
    Ok(evaluate(images, cfg)?.overall.bucket(bucket).ar)
}

/// Per-anchor classification probabilities laid out `(A, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub anchors: usize,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn from_output(out: &HeadOutput) -> Result<Self> {
        let (a, h, w) = out.cls_logits.chw()?;
        Ok(Self {
            anchors: a,
            height: h,
            width: w,
            scores: out.cls_logits.data().iter().map(|&v| sigmoid(v)).collect(),
        })
    }

    pub fn get(&self, anchor: usize, row: usize, col: usize) -> f64 {
        self.scores[(anchor * self.height + row) * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCurve {
    pub distances: Vec<usize>,
    pub delta_scores: Vec<f64>,
    /// Ground truths contributing at each distance.
    pub support: Vec<usize>,
}

impl GradientCurve {
    /// Mean of `delta_scores` over distances `>= from`.
    pub fn mean_from(&self, from: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .distances
            .iter()
            .zip(&self.delta_scores)
            .filter(|(d, _)| **d >= from)
            .map(|(_, s)| *s)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Feature-map cell containing the box center and the anchor shape there
/// overlapping the box most (lowest index on ties).
pub fn locate(gt: &BoundingBox, grid: &AnchorGrid, anchors: &[BoundingBox]) -> Result<(usize, usize, usize)> {
    let s = grid.stride as f64;
    let (col, row) = ((gt.cx() / s).floor(), (gt.cy() / s).floor());
    if col < 0.0 || row < 0.0 || col as usize >= grid.feature_w || row as usize >= grid.feature_h {
        return Err(Error::InvalidArgument(format!(
            "ground truth center ({}, {}) falls outside the {}x{} feature map",
            gt.cx(),
            gt.cy(),
            grid.feature_w,
            grid.feature_h
        )));
    }
    let (row, col) = (row as usize, col as usize);
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..grid.anchors_per_position() {
        let v = iou(&anchors[grid.index(row, col, a)], gt);
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok((row, col, best.0))
}

/// Score falloff `s(x) - s(0)` with Manhattan distance `x` from each ground
/// truth's cell, read on the ground truth's anchor. Averaged over all cells
/// at distance `x` for one ground truth, then over ground truths.
pub fn gradient_curve(entries: &[(ScoreMap, Vec<(usize, usize, usize)>)], max_distance: usize) -> GradientCurve {
    let mut sums = vec![0.0; max_distance + 1];
    let mut support = vec![0usize; max_distance + 1];
    for (map, cells) in entries {
        for &(row, col, a) in cells {
            let s0 = map.get(a, row, col);
            let mut per = vec![(0.0, 0usize); max_distance + 1];
            for r in 0..map.height {
                for c in 0..map.width {
                    let d = r.abs_diff(row) + c.abs_diff(col);
                    if d <= max_distance {
                        per[d].0 += map.get(a, r, c) - s0;
                        per[d].1 += 1;
                    }
                }
            }
            for (d, (s, n)) in per.into_iter().enumerate() {
                if n > 0 {
                    sums[d] += s / n as f64;
                    support[d] += 1;
                }
            }
        }
    }
    let delta_scores = sums
        .iter()
        .zip(&support)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    GradientCurve {
        distances: (0..=max_distance).collect(),
        delta_scores,
        support,
    }
}

/// Run the model on each `(input, ground truths, grid, anchors)` and build the falloff curve.
pub fn confidence_gradient_curve(
    net: &ProposalNet,
    items: &[(crate::nn::Tensor, Vec<BoundingBox>, AnchorGrid, Vec<BoundingBox>)],
    max_distance: usize,
) -> Result<GradientCurve> {
    use rayon::prelude::*;
    let entries = items
        .par_iter()
        .map(|(input, gts, grid, anchors)| {
            let map = ScoreMap::from_output(&net.infer(input)?)?;
            let cells = gts
                .iter()
                .map(|g| locate(g, grid, anchors))
                .collect::<Result<Vec<_>>>()?;
            Ok((map, cells))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gradient_curve(&entries, max_distance))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant variable".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// A proposal and its IoU with the best-overlapping ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub iou: f64,
}

pub fn match_proposals(proposals: &[Proposal], gts: &[BoundingBox]) -> Vec<ScoredProposal> {
    proposals
        .iter()
        .map(|p| ScoredProposal {
            proposal: p.clone(),
            iou: gts.iter().map(|g| iou(&p.bbox, g)).fold(0.0, f64::max),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTriple {
    pub s_cls: f64,
    pub p_nwd: f64,
    pub s_final: f64,
    pub proposals: usize,
}

/// Pearson correlation of IoU with the classification score, the predicted
/// localization confidence and the rectified score.
pub fn score_iou_correlation(items: &[ScoredProposal]) -> Result<CorrelationTriple> {
    let ious: Vec<f64> = items.iter().map(|s| s.iou).collect();
    let cls: Vec<f64> = items.iter().map(|s| s.proposal.s_cls).collect();
    let nwd: Vec<f64> = items
        .iter()
        .map(|s| {
            s.proposal
                .p_nwd
                .ok_or_else(|| Error::Undefined("proposal without a localization confidence".into()))
        })
        .collect::<Result<_>>()?;
    let fin: Vec<f64> = items.iter().map(|s| s.proposal.s_final).collect();
    Ok(CorrelationTriple {
        s_cls: pearson(&cls, &ious)?,
        p_nwd: pearson(&nwd, &ious)?,
        s_final: pearson(&fin, &ious)?,
        proposals: items.len(),
    })
}
