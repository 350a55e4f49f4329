//! Proposal heads: the vanilla RPN head, the spatial aware double head
//! (SADH) and the localization-confidence (NWD) prediction branch, plus the
//! small strided backbone they sit on.
//!
//! Vanilla: one shared 3x3 conv + ReLU feeds sibling 1x1 convs for class
//! logits and box deltas, so neighbouring class scores share inputs.
//!
//! SADH: the classification path is a 1x1 conv (+GN) + ReLU + 1x1 conv, so a
//! class logit depends only on the feature vector at its own position; the
//! localization path is a 3x3 conv (+GN) + ReLU + 1x1 conv. The optional NWD
//! branch is a 1x1 conv + sigmoid on the localization intermediate map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::BoundingBox;
use crate::error::{Error, Result};
use crate::losses::{sigmoid, LossWeights};
use crate::nn::norm::{default_groups, DEFAULT_GN_EPS};
use crate::nn::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, Checkpoint, Conv2d, GroupNorm, GroupNormCache,
    Tensor,
};
use crate::pipeline::{decode_deltas, Proposal};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` before they reach
/// score rectification or SBCE.
pub const PROB_EPS: f64 = 1e-12;

/// Prior foreground probability used to initialize the class-logit bias.
pub const PRIOR_PROB: f64 = 0.01;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    VanillaRpn,
    Sadh,
}

/// Loss used to train the NWD branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceLoss {
    L1,
    Sbce,
}

/// Localization-quality target learned by the NWD branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMetric {
    Iou,
    Giou,
    Diou,
    Nwd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Kernel of the SADH classification intermediate conv (1 or 3).
    pub cls_kernel: usize,
    pub nwd_branch: bool,
    pub channels: usize,
    pub anchors_per_position: usize,
    pub group_norm: bool,
    pub confidence_loss: ConfidenceLoss,
    pub confidence_metric: ConfidenceMetric,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::Sadh,
            cls_kernel: 1,
            nwd_branch: true,
            channels: 32,
            anchors_per_position: 2,
            group_norm: true,
            confidence_loss: ConfidenceLoss::Sbce,
            confidence_metric: ConfidenceMetric::Nwd,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.cls_kernel, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "cls_kernel must be 1 or 3, got {}",
                self.cls_kernel
            )));
        }
        if self.channels == 0 || self.anchors_per_position == 0 {
            return Err(Error::InvalidArgument(
                "head needs positive channels and anchors_per_position".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output widths of the three stride-2 conv layers; the last must equal
    /// the head's `channels`.
    pub widths: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [8, 16, 32],
        }
    }
}

/// Total stride of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

/// conv (+GN) + ReLU.
#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    conv: Conv2d,
    gn: Option<GroupNorm>,
}

#[derive(Debug, Clone)]
struct ConvBlockCache {
    input: Tensor,
    pre_act: Tensor,
    gn: Option<GroupNormCache>,
}

impl ConvBlock {
    fn new(conv: Conv2d, group_norm: bool) -> Result<Self> {
        let ch = conv.weight.shape()[0];
        let gn = if group_norm {
            Some(GroupNorm::new(ch, default_groups(ch), DEFAULT_GN_EPS)?)
        } else {
            None
        };
        Ok(Self { conv, gn })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvBlockCache)> {
        let y = self.conv.forward(x)?;
        let (pre_act, gn) = match &self.gn {
            Some(gn) => {
                let (z, c) = gn.forward(&y)?;
                (z, Some(c))
            }
            None => (y, None),
        };
        let out = relu_forward(&pre_act);
        Ok((
            out,
            ConvBlockCache {
                input: x.clone(),
                pre_act,
                gn,
            },
        ))
    }

    fn backward(&mut self, cache: &ConvBlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = relu_backward(&cache.pre_act, grad_out)?;
        if let (Some(gn), Some(c)) = (&mut self.gn, &cache.gn) {
            g = gn.backward(c, &g)?;
        }
        self.conv.backward(&cache.input, &g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.conv.weight"), &self.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &self.conv.bias));
        if let Some(gn) = &self.gn {
            out.push((format!("{prefix}.gn.gamma"), &gn.gamma));
            out.push((format!("{prefix}.gn.beta"), &gn.beta));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &mut self.conv.bias));
        if let Some(gn) = &mut self.gn {
            out.push((format!("{prefix}.gn.gamma"), &mut gn.gamma));
            out.push((format!("{prefix}.gn.beta"), &mut gn.beta));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    layers: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    layers: Vec<ConvBlockCache>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut cin = cfg.in_channels;
        for &w in &cfg.widths {
            layers.push(ConvBlock::new(Conv2d::new(cin, w, 3, 2, rng)?, false)?);
            cin = w;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, BackboneCache { layers: caches }))
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (l, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = l.backward(c, &g)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `(A, H, W)` classification logits.
    pub cls_logits: Tensor,
    /// `(4A, H, W)`; channel `4a + k` holds coordinate `k` of anchor `a`.
    pub box_deltas: Tensor,
    /// `(A, H, W)` predicted localization confidence, after the sigmoid.
    pub nwd_pred: Option<Tensor>,
}

/// Gradients of a scalar loss with respect to the head outputs.
#[derive(Debug, Clone)]
pub struct HeadOutputGrad {
    pub cls_logits: Tensor,
    pub box_deltas: Tensor,
    /// Gradient with respect to the post-sigmoid prediction.
    pub nwd_pred: Option<Tensor>,
}

impl HeadOutputGrad {
    pub fn zeros_like(out: &HeadOutput) -> Self {
        Self {
            cls_logits: Tensor::zeros(out.cls_logits.shape()),
            box_deltas: Tensor::zeros(out.box_deltas.shape()),
            nwd_pred: out.nwd_pred.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    cfg: HeadConfig,
    /// Vanilla: the shared 3x3 intermediate. SADH: the localization path.
    loc_block: ConvBlock,
    /// SADH classification intermediate.
    cls_block: Option<ConvBlock>,
    cls_out: Conv2d,
    box_out: Conv2d,
    nwd_out: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    loc: ConvBlockCache,
    loc_feat: Tensor,
    cls: Option<(ConvBlockCache, Tensor)>,
    nwd_pred: Option<Tensor>,
}

impl Head {
    pub fn new(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, a) = (cfg.channels, cfg.anchors_per_position);
        let loc_block = ConvBlock::new(Conv2d::new(c, c, 3, 1, rng)?, cfg.group_norm)?;
        let cls_block = match cfg.variant {
            HeadVariant::Sadh => Some(ConvBlock::new(
                Conv2d::new(c, c, cfg.cls_kernel, 1, rng)?,
                cfg.group_norm,
            )?),
            HeadVariant::VanillaRpn => None,
        };
        let mut cls_out = Conv2d::new(c, a, 1, 1, rng)?;
        cls_out.bias.data_mut().fill(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        let box_out = Conv2d::new(c, 4 * a, 1, 1, rng)?;
        let nwd_out = if cfg.nwd_branch {
            Some(Conv2d::new(c, a, 1, 1, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            loc_block,
            cls_block,
            cls_out,
            box_out,
            nwd_out,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    fn check_input(&self, feature: &Tensor) -> Result<()> {
        let (c, _, _) = feature.chw()?;
        if c != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.channels],
                got: feature.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, feature: &Tensor) -> Result<(HeadOutput, HeadCache)> {
        self.check_input(feature)?;
        let (loc_feat, loc) = self.loc_block.forward(feature)?;
        let (cls_logits, cls) = match &self.cls_block {
            Some(block) => {
                let (cls_feat, c) = block.forward(feature)?;
                (self.cls_out.forward(&cls_feat)?, Some((c, cls_feat)))
            }
            None => (self.cls_out.forward(&loc_feat)?, None),
        };
        let box_deltas = self.box_out.forward(&loc_feat)?;
        let nwd_pred = match &self.nwd_out {
            Some(conv) => Some(sigmoid_forward(&conv.forward(&loc_feat)?)),
            None => None,
        };
        Ok((
            HeadOutput {
                cls_logits,
                box_deltas,
                nwd_pred: nwd_pred.clone(),
            },
            HeadCache {
                loc,
                loc_feat,
                cls,
                nwd_pred,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient for the input feature map.
    pub fn backward(&mut self, cache: &HeadCache, grad: &HeadOutputGrad) -> Result<Tensor> {
        let mut g_loc_feat = self.box_out.backward(&cache.loc_feat, &grad.box_deltas)?;
        if let (Some(conv), Some(p), Some(gp)) = (&mut self.nwd_out, &cache.nwd_pred, &grad.nwd_pred) {
            let g_logit = sigmoid_backward(p, gp)?;
            add_into(&mut g_loc_feat, &conv.backward(&cache.loc_feat, &g_logit)?);
        }
        let mut g_feature = match (&mut self.cls_block, &cache.cls) {
            (Some(block), Some((c, cls_feat))) => {
                let g_cls_feat = self.cls_out.backward(cls_feat, &grad.cls_logits)?;
                block.backward(c, &g_cls_feat)?
            }
            _ => {
                let g = self.cls_out.backward(&cache.loc_feat, &grad.cls_logits)?;
                add_into(&mut g_loc_feat, &g);
                Tensor::zeros(cache.loc.input.shape())
            }
        };
        add_into(&mut g_feature, &self.loc_block.backward(&cache.loc, &g_loc_feat)?);
        Ok(g_feature)
    }

    fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        let loc_name = match self.cfg.variant {
            HeadVariant::VanillaRpn => "head.shared",
            HeadVariant::Sadh => "head.loc",
        };
        self.loc_block.params(loc_name, out);
        if let Some(b) = &self.cls_block {
            b.params("head.cls", out);
        }
        out.push(("head.cls_out.weight".into(), &self.cls_out.weight));
        out.push(("head.cls_out.bias".into(), &self.cls_out.bias));
        out.push(("head.box_out.weight".into(), &self.box_out.weight));
        out.push(("head.box_out.bias".into(), &self.box_out.bias));
        if let Some(c) = &self.nwd_out {
            out.push(("head.nwd_out.weight".into(), &c.weight));
            out.push(("head.nwd_out.bias".into(), &c.bias));
        }
    }

    fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let loc_name = match self.cfg.variant {
            HeadVariant::VanillaRpn => "head.shared",
            HeadVariant::Sadh => "head.loc",
        };
        self.loc_block.params_mut(loc_name, out);
        if let Some(b) = &mut self.cls_block {
            b.params_mut("head.cls", out);
        }
        out.push(("head.cls_out.weight".into(), &mut self.cls_out.weight));
        out.push(("head.cls_out.bias".into(), &mut self.cls_out.bias));
        out.push(("head.box_out.weight".into(), &mut self.box_out.weight));
        out.push(("head.box_out.bias".into(), &mut self.box_out.bias));
        if let Some(c) = &mut self.nwd_out {
            out.push(("head.nwd_out.weight".into(), &mut c.weight));
            out.push(("head.nwd_out.bias".into(), &mut c.bias));
        }
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Backbone + head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalNet {
    cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct NetCache {
    backbone: BackboneCache,
    head: HeadCache,
}

impl ProposalNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.backbone.widths[2] != cfg.head.channels {
            return Err(Error::InvalidArgument(format!(
                "backbone output width {} must equal head channels {}",
                cfg.backbone.widths[2], cfg.head.channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(&cfg.backbone, &mut rng)?,
            head: Head::new(&cfg.head, &mut rng)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &Tensor) -> Result<(HeadOutput, NetCache)> {
        let (feat, backbone) = self.backbone.forward(image)?;
        let (out, head) = self.head.forward(&feat)?;
        Ok((out, NetCache { backbone, head }))
    }

    pub fn infer(&self, image: &Tensor) -> Result<HeadOutput> {
        Ok(self.forward(image)?.0)
    }

    pub fn backward(&mut self, cache: &NetCache, grad: &HeadOutputGrad) -> Result<Tensor> {
        let g = self.head.backward(&cache.head, grad)?;
        self.backbone.backward(&cache.backbone, &g)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            l.params(&format!("backbone.conv{}", i + 1), &mut out);
        }
        self.head.named_params(&mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            l.params_mut(&format!("backbone.conv{}", i + 1), &mut out);
        }
        self.head.named_params_mut(&mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint::new(meta, self.named_params())
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(self.named_params_mut())
    }
}

/// One proposal per anchor, in anchor order. `anchors` must follow the
/// row-major / scale / ratio ordering of [`crate::pipeline::generate_anchors`].
pub fn head_to_proposals(output: &HeadOutput, anchors: &[BoundingBox], weights: &LossWeights) -> Result<Vec<Proposal>> {
    let (a, h, w) = output.cls_logits.chw()?;
    if anchors.len() != a * h * w {
        return Err(Error::LengthMismatch {
            left: anchors.len(),
            right: a * h * w,
        });
    }
    output.box_deltas.expect_shape(&[4 * a, h, w])?;
    if let Some(p) = &output.nwd_pred {
        p.expect_shape(&[a, h, w])?;
    }
    let hw = h * w;
    let cls = output.cls_logits.data();
    let deltas = output.box_deltas.data();
    let mut out = Vec::with_capacity(anchors.len());
    for pos in 0..hw {
        for k in 0..a {
            let idx = pos * a + k;
            let d = [
                deltas[(4 * k) * hw + pos],
                deltas[(4 * k + 1) * hw + pos],
                deltas[(4 * k + 2) * hw + pos],
                deltas[(4 * k + 3) * hw + pos],
            ];
            let bbox = decode_deltas(&anchors[idx], &d)?;
            let s_cls = clamp_prob(sigmoid(cls[k * hw + pos]));
            let p = output.nwd_pred.as_ref().map(|t| clamp_prob(t.data()[k * hw + pos]));
            out.push(Proposal::new(bbox, s_cls, p, weights, idx)?);
        }
    }
    Ok(out)
}

/// Predicted deltas of anchor `idx` (flat anchor index) from a head output.
pub fn anchor_deltas(output: &HeadOutput, idx: usize) -> [f64; 4] {
    let (a, h, w) = output.cls_logits.chw().expect("head output is 3-D");
    let hw = h * w;
    let (pos, k) = (idx / a, idx % a);
    let d = output.box_deltas.data();
    [
        d[(4 * k) * hw + pos],
        d[(4 * k + 1) * hw + pos],
        d[(4 * k + 2) * hw + pos],
        d[(4 * k + 3) * hw + pos],
    ]
}

/// Offset of anchor `idx`'s entry in an `(A, H, W)` map.
pub fn anchor_offset(a: usize, hw: usize, idx: usize) -> usize {
    (idx % a) * hw + idx / a
}
