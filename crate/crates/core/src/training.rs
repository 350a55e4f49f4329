//! Anchor sampling, the combined proposal loss, SGD training and inference.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{diou, giou, iou, nwd, BoundingBox, NwdConfig, DEFAULT_NWD_C};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::heads::{
    anchor_deltas, anchor_offset, clamp_prob, head_to_proposals, ConfidenceLoss, ConfidenceMetric, HeadOutput,
    HeadOutputGrad, NetCache, ProposalNet, BACKBONE_STRIDE,
};
use crate::losses::{cls_loss, l1_loss, loc_loss, rpn_total_loss, sbce, LossWeights, Reduction, SbceBatch};
use crate::nn::{Sgd, SgdConfig, Tensor};
use crate::pipeline::{
    assign_labels, encode_deltas, generate_anchors, nms, select_topk, AnchorGrid, AssignConfig, AssignmentResult,
    Proposal, ScoreKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: BACKBONE_STRIDE,
            scales: vec![16.0, 32.0],
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn grid(&self, width: usize, height: usize) -> Result<AnchorGrid> {
        if self.stride != BACKBONE_STRIDE {
            return Err(Error::InvalidArgument(format!(
                "anchor stride {} must equal the backbone stride {BACKBONE_STRIDE}",
                self.stride
            )));
        }
        AnchorGrid::for_image(
            width,
            height,
            self.stride,
            self.scales.clone(),
            self.aspect_ratios.clone(),
        )
    }

    pub fn per_position(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub anchors_per_image: usize,
    pub positive_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            anchors_per_image: 256,
            positive_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub assign: AssignConfig,
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    /// Normalizing constant of the NWD target.
    pub nwd_c: f64,
    pub confidence_reduction: Reduction,
    /// Linear learning-rate warmup length in steps (0 disables).
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            assign: AssignConfig::default(),
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            nwd_c: DEFAULT_NWD_C,
            confidence_reduction: Reduction::Mean,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.weights.validate()?;
        NwdConfig::new(self.nwd_c)?;
        if !(0.0..=1.0).contains(&self.sampling.positive_fraction) || self.sampling.anchors_per_image == 0 {
            return Err(Error::InvalidArgument(
                "sampling needs anchors_per_image > 0 and positive_fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub pre_nms_topk: usize,
    pub nms_threshold: f64,
    pub post_nms_topk: usize,
    pub proposal_threshold: f64,
    pub score_key: ScoreKey,
}

impl InferenceConfig {
    /// Proposal generation as used while training: NMS 0.7, 2000 / 1000.
    pub fn proposals() -> Self {
        Self {
            pre_nms_topk: 2000,
            nms_threshold: 0.7,
            post_nms_topk: 1000,
            proposal_threshold: 0.0,
            score_key: ScoreKey::Final,
        }
    }

    /// Final detections: NMS 0.5, at most 200 per image.
    pub fn detections() -> Self {
        Self {
            nms_threshold: 0.5,
            post_nms_topk: 200,
            ..Self::proposals()
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::detections()
    }
}

/// A sample with its anchors and label assignment precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: Tensor,
    pub anchors: Vec<BoundingBox>,
    pub assignment: AssignmentResult,
    pub gts: Vec<BoundingBox>,
    pub id: u64,
}

pub fn prepare(sample: &Sample, anchors: &AnchorConfig, assign: &AssignConfig) -> Result<PreparedSample> {
    let grid = anchors.grid(sample.width, sample.height)?;
    let boxes = generate_anchors(&grid)?;
    let mut assignment = assign_labels(&boxes, &sample.gts, assign)?;
    assignment.ignore_regions(&boxes, &sample.ignore);
    Ok(PreparedSample {
        input: sample.input(),
        anchors: boxes,
        assignment,
        gts: sample.gts.clone(),
        id: sample.id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledAnchors {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Up to `anchors_per_image` anchors with at most `positive_fraction`
/// positives; the remainder is filled with negatives.
pub fn sample_anchors(assign: &AssignmentResult, cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> SampledAnchors {
    let pos: Vec<usize> = assign.positives().collect();
    let neg: Vec<usize> = assign
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == crate::pipeline::AnchorLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    let max_pos = (cfg.anchors_per_image as f64 * cfg.positive_fraction) as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(cfg.anchors_per_image - n_pos);
    let pick = |pool: &[usize], n: usize, rng: &mut ChaCha8Rng| {
        let mut v: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        v.sort_unstable();
        v
    };
    let positives = pick(&pos, n_pos, rng);
    let negatives = pick(&neg, n_neg, rng);
    SampledAnchors { positives, negatives }
}

impl ConfidenceMetric {
    /// Target in `[0, 1]`; GIoU and DIoU are mapped from `[-1, 1]` by `(v + 1) / 2`.
    pub fn target(&self, pred: &BoundingBox, gt: &BoundingBox, c: &NwdConfig) -> f64 {
        match self {
            ConfidenceMetric::Iou => iou(pred, gt),
            ConfidenceMetric::Giou => (giou(pred, gt) + 1.0) * 0.5,
            ConfidenceMetric::Diou => (diou(pred, gt) + 1.0) * 0.5,
            ConfidenceMetric::Nwd => nwd(pred, gt, c),
        }
    }
}

/// Confidence-branch targets for the sampled positives: the chosen metric
/// between each decoded prediction and its matched ground truth. Treated as
/// constants by the backward pass.
pub fn confidence_targets(
    net: &ProposalNet,
    output: &HeadOutput,
    prepared: &PreparedSample,
    sampled: &SampledAnchors,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let c = NwdConfig::new(cfg.nwd_c)?;
    let metric = net.config().head.confidence_metric;
    sampled
        .positives
        .iter()
        .map(|&i| {
            let anchor = &prepared.anchors[i];
            let gt = &prepared.gts[prepared.assignment.matched[i].expect("positive has a match")];
            let pred = crate::pipeline::decode_deltas(anchor, &anchor_deltas(output, i))?;
            Ok(metric.target(&pred, gt, &c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub cls: f64,
    pub loc: f64,
    pub nwd: f64,
    pub total: f64,
}

/// Loss components and the gradient of the total with respect to the head outputs.
pub fn loss_and_grad(
    net: &ProposalNet,
    output: &HeadOutput,
    prepared: &PreparedSample,
    sampled: &SampledAnchors,
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<(StepLosses, HeadOutputGrad)> {
    let mut grad = HeadOutputGrad::zeros_like(output);
    let (a, h, w) = output.cls_logits.chw()?;
    let hw = h * w;

    // classification over all sampled anchors
    let idx: Vec<usize> = sampled.positives.iter().chain(&sampled.negatives).copied().collect();
    let logits: Vec<f64> = idx
        .iter()
        .map(|&i| output.cls_logits.data()[anchor_offset(a, hw, i)])
        .collect();
    let labels: Vec<f64> = (0..idx.len())
        .map(|k| if k < sampled.positives.len() { 1.0 } else { 0.0 })
        .collect();
    let cls = cls_loss(&logits, &labels)?;
    for (&i, g) in idx.iter().zip(&cls.grad) {
        grad.cls_logits.data_mut()[anchor_offset(a, hw, i)] += g;
    }

    // box regression on positives
    let pred: Vec<[f64; 4]> = sampled.positives.iter().map(|&i| anchor_deltas(output, i)).collect();
    let target: Vec<[f64; 4]> = sampled
        .positives
        .iter()
        .map(|&i| {
            let gt = &prepared.gts[prepared.assignment.matched[i].expect("positive has a match")];
            encode_deltas(&prepared.anchors[i], gt)
        })
        .collect();
    let (loc, loc_grad) = loc_loss(&pred, &target)?;
    for (&i, g) in sampled.positives.iter().zip(&loc_grad) {
        let (pos, k) = (i / a, i % a);
        for (c, gv) in g.iter().enumerate() {
            grad.box_deltas.data_mut()[(4 * k + c) * hw + pos] += gv;
        }
    }

    // localization confidence on positives
    let mut nwd_value = 0.0;
    if let (Some(p_map), Some(g_map)) = (&output.nwd_pred, &mut grad.nwd_pred) {
        if !sampled.positives.is_empty() {
            if targets.len() != sampled.positives.len() {
                return Err(Error::LengthMismatch {
                    left: targets.len(),
                    right: sampled.positives.len(),
                });
            }
            let p: Vec<f64> = sampled
                .positives
                .iter()
                .map(|&i| clamp_prob(p_map.data()[anchor_offset(a, hw, i)]))
                .collect();
            let lg = match net.config().head.confidence_loss {
                ConfidenceLoss::Sbce => sbce(&SbceBatch::new(p, targets.to_vec())?, cfg.confidence_reduction),
                ConfidenceLoss::L1 => l1_loss(&p, targets, cfg.confidence_reduction)?,
            };
            nwd_value = lg.value;
            for (&i, g) in sampled.positives.iter().zip(&lg.grad) {
                g_map.data_mut()[anchor_offset(a, hw, i)] += cfg.weights.lambda_nwd * g;
            }
        }
    }

    let total = rpn_total_loss(cls.value, loc, nwd_value, &cfg.weights)?;
    Ok((
        StepLosses {
            cls: cls.value,
            loc,
            nwd: nwd_value,
            total,
        },
        grad,
    ))
}

/// Forward, loss, backward, SGD update. Returns the loss components.
pub fn training_step(
    net: &mut ProposalNet,
    prepared: &PreparedSample,
    cfg: &TrainConfig,
    sgd_cfg: &SgdConfig,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let (output, cache): (HeadOutput, NetCache) = net.forward(&prepared.input)?;
    let finite = |t: &Tensor| t.data().iter().all(|v| v.is_finite());
    if !finite(&output.cls_logits) || !finite(&output.box_deltas) || !output.nwd_pred.as_ref().is_none_or(finite) {
        return Err(Error::NonFinite("non-finite network output".into()));
    }
    let sampled = sample_anchors(&prepared.assignment, &cfg.sampling, rng);
    let targets = confidence_targets(net, &output, prepared, &sampled, cfg)?;
    let (losses, grad) = loss_and_grad(net, &output, prepared, &sampled, &targets, cfg)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss {} (cls {}, loc {}, nwd {})",
            losses.total, losses.cls, losses.loc, losses.nwd
        )));
    }
    net.zero_grad();
    net.backward(&cache, &grad)?;
    let mut params: Vec<&mut Tensor> = net.named_params_mut().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut params, sgd_cfg)?;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub image_id: u64,
    pub cls: f64,
    pub loc: f64,
    pub nwd: f64,
    pub total: f64,
}

/// Train for `cfg.sgd.epochs` passes over `samples`, one image per step,
/// visiting images in a seeded shuffled order each epoch.
pub fn train(
    net: &mut ProposalNet,
    samples: &[Sample],
    anchors: &AnchorConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let prepared: Vec<PreparedSample> = samples
        .par_iter()
        .map(|s| prepare(s, anchors, &cfg.assign))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a1e);
    let mut opt = Sgd::new();
    let mut history = Vec::with_capacity(cfg.sgd.epochs * samples.len());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.sgd.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let mut sgd = cfg.sgd.clone();
            if step < cfg.warmup_steps {
                sgd.lr *= (step + 1) as f64 / cfg.warmup_steps as f64;
            }
            let l = training_step(net, &prepared[i], cfg, &sgd, &mut opt, &mut rng).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                other => other,
            })?;
            let rec = StepRecord {
                step,
                epoch,
                image_id: prepared[i].id,
                cls: l.cls,
                loc: l.loc,
                nwd: l.nwd,
                total: l.total,
            };
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
    }
    Ok(history)
}

/// Proposals for one image: decode all anchors, clip to the image, keep the
/// top `pre_nms_topk`, run NMS, keep the top `post_nms_topk` above the
/// proposal threshold.
pub fn infer_proposals(
    net: &ProposalNet,
    sample: &Sample,
    anchors: &AnchorConfig,
    weights: &LossWeights,
    icfg: &InferenceConfig,
) -> Result<Vec<Proposal>> {
    let grid = anchors.grid(sample.width, sample.height)?;
    let boxes = generate_anchors(&grid)?;
    let output = net.infer(&sample.input())?;
    let (w, h) = (sample.width as f64, sample.height as f64);
    let all: Vec<Proposal> = head_to_proposals(&output, &boxes, weights)?
        .into_iter()
        .filter_map(|mut p| {
            p.bbox = p.bbox.clip(w, h)?;
            Some(p)
        })
        .collect();
    let pre = select_topk(&all, icfg.pre_nms_topk, 0.0, icfg.score_key);
    let kept = nms(&pre, icfg.nms_threshold, icfg.score_key);
    Ok(select_topk(
        &kept,
        icfg.post_nms_topk,
        icfg.proposal_threshold,
        icfg.score_key,
    ))
}

/// Run inference on every sample in parallel; results keep sample order.
pub fn infer_dataset(
    net: &ProposalNet,
    samples: &[Sample],
    anchors: &AnchorConfig,
    weights: &LossWeights,
    icfg: &InferenceConfig,
) -> Result<Vec<Vec<Proposal>>> {
    samples
        .par_iter()
        .map(|s| infer_proposals(net, s, anchors, weights, icfg))
        .collect()
}
