//! Declarative experiment description and the runs built on it: training,
//! evaluation, score analyses and the ablation sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::eval::{
    confidence_gradient_curve, evaluate, match_proposals, score_iou_correlation, CorrelationTriple, Detection,
    EvalConfig, EvalReport, GradientCurve, GroundTruth, ImageResult,
};
use crate::heads::{ConfidenceLoss, ConfidenceMetric, HeadVariant, ModelConfig, ProposalNet};
use crate::pipeline::{generate_anchors, Proposal, ScoreKey};
use crate::synth::{generate, SynthConfig, LESION_CATEGORY};
use crate::tiler::TileOptions;
use crate::training::{infer_dataset, train, AnchorConfig, InferenceConfig, StepRecord, TrainConfig};

/// Sizes of the synthetic train / held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 64,
            test_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Largest Manhattan distance on the confidence falloff curve.
    pub max_distance: usize,
    /// Distances from which the curve's mean falloff is summarized.
    pub steepness_from: usize,
    /// Proposals count towards the correlation when their best IoU exceeds this.
    pub correlation_min_iou: f64,
    pub proposals: InferenceConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            max_distance: 6,
            steepness_from: 2,
            correlation_min_iou: 0.0,
            proposals: InferenceConfig::proposals(),
        }
    }
}

/// Everything a run depends on besides the output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub tile: TileOptions,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.head.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.anchors.per_position() != self.model.head.anchors_per_position {
            return Err(Error::InvalidArgument(format!(
                "{} anchor shapes per position but the head predicts {}",
                self.anchors.per_position(),
                self.model.head.anchors_per_position
            )));
        }
        if self.model.backbone.widths[2] != self.model.head.channels {
            return Err(Error::InvalidArgument(format!(
                "backbone output width {} differs from head channels {}",
                self.model.backbone.widths[2], self.model.head.channels
            )));
        }
        Ok(())
    }

    /// Synthetic dataset for this run. Its seed is the run seed plus
    /// `synth.seed`, so data and initialization can be varied independently.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed.wrapping_add(self.synth.seed),
            ..self.synth.clone()
        }
    }

    /// `(train, held-out)` samples; held-out images follow the training ones.
    pub fn split(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let total = self.data.train_images + self.data.test_images;
        let mut samples = generate(&self.synth_config(), total)?.samples();
        let test = samples.split_off(self.data.train_images);
        Ok((samples, test))
    }
}

pub struct TrainedModel {
    pub net: ProposalNet,
    pub history: Vec<StepRecord>,
}

pub fn train_model(cfg: &ExperimentConfig, samples: &[Sample]) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut net = ProposalNet::new(&cfg.model, cfg.seed)?;
    let history = train(&mut net, samples, &cfg.anchors, &cfg.train, cfg.seed, |_| {})?;
    Ok(TrainedModel { net, history })
}

fn image_result(sample: &Sample, proposals: &[Proposal], key: ScoreKey) -> ImageResult {
    ImageResult {
        detections: proposals
            .iter()
            .map(|p| Detection {
                bbox: p.bbox,
                score: p.score(key),
                category: LESION_CATEGORY.to_string(),
            })
            .collect(),
        ground_truths: sample
            .gts
            .iter()
            .map(|g| GroundTruth {
                bbox: *g,
                category: LESION_CATEGORY.to_string(),
            })
            .collect(),
    }
}

/// Class-agnostic AP/AR of the final detections over `samples`.
pub fn evaluate_model(net: &ProposalNet, samples: &[Sample], cfg: &ExperimentConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let proposals = infer_dataset(net, samples, &cfg.anchors, &cfg.train.weights, &cfg.inference)?;
    let results: Vec<ImageResult> = samples
        .iter()
        .zip(&proposals)
        .map(|(s, p)| image_result(s, p, cfg.inference.score_key))
        .collect();
    evaluate(&results, &cfg.eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub curve: GradientCurve,
    /// Mean falloff over distances `>= steepness_from`.
    pub steepness: Option<f64>,
    /// Absent when the model has no localization-confidence branch or the
    /// correlation is undefined.
    pub correlation: Option<CorrelationTriple>,
    pub correlation_note: Option<String>,
}

pub fn analyze_model(net: &ProposalNet, samples: &[Sample], cfg: &ExperimentConfig) -> Result<Analysis> {
    if samples.is_empty() {
        return Err(Error::Empty("analysis set"));
    }
    let items = samples
        .iter()
        .map(|s| {
            let grid = cfg.anchors.grid(s.width, s.height)?;
            let anchors = generate_anchors(&grid)?;
            Ok((s.input(), s.gts.clone(), grid, anchors))
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = confidence_gradient_curve(net, &items, cfg.analysis.max_distance)?;
    let steepness = curve.mean_from(cfg.analysis.steepness_from);

    let (correlation, correlation_note) = if net.config().head.nwd_branch {
        let proposals = infer_dataset(net, samples, &cfg.anchors, &cfg.train.weights, &cfg.analysis.proposals)?;
        let scored: Vec<_> = samples
            .iter()
            .zip(&proposals)
            .flat_map(|(s, p)| match_proposals(p, &s.gts))
            .filter(|sp| sp.iou > cfg.analysis.correlation_min_iou)
            .collect();
        match score_iou_correlation(&scored) {
            Ok(c) => (Some(c), None),
            Err(Error::Undefined(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        }
    } else {
        (None, Some("model has no localization-confidence branch".into()))
    };
    Ok(Analysis {
        curve,
        steepness,
        correlation,
        correlation_note,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationGroup {
    /// Kernel of the SADH classification conv: 3x3 vs 1x1.
    Convolution,
    /// Loss of the confidence branch: L1 vs SBCE.
    Loss,
    /// Target of the confidence branch: IoU, GIoU, DIoU, NWD.
    Metric,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 3] = [AblationGroup::Convolution, AblationGroup::Loss, AblationGroup::Metric];

    pub fn number(&self) -> usize {
        match self {
            AblationGroup::Convolution => 1,
            AblationGroup::Loss => 2,
            AblationGroup::Metric => 3,
        }
    }

    pub fn from_number(n: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.number() == n)
    }

    /// `(label, model)` for every variant of the group, built from `base`.
    /// Groups 2 and 3 use the vanilla head with the confidence branch.
    pub fn variants(&self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut m = base.clone();
            f(&mut m);
            m
        };
        match self {
            AblationGroup::Convolution => [3, 1]
                .into_iter()
                .map(|k| {
                    (
                        format!("{k}x{k}"),
                        with(&|m| {
                            m.head.variant = HeadVariant::Sadh;
                            m.head.cls_kernel = k;
                        }),
                    )
                })
                .collect(),
            AblationGroup::Loss => [(ConfidenceLoss::L1, "l1"), (ConfidenceLoss::Sbce, "sbce")]
                .into_iter()
                .map(|(l, name)| {
                    (
                        name.to_string(),
                        with(&|m| {
                            m.head.variant = HeadVariant::VanillaRpn;
                            m.head.nwd_branch = true;
                            m.head.confidence_loss = l;
                            m.head.confidence_metric = ConfidenceMetric::Nwd;
                        }),
                    )
                })
                .collect(),
            AblationGroup::Metric => [
                (ConfidenceMetric::Iou, "iou"),
                (ConfidenceMetric::Giou, "giou"),
                (ConfidenceMetric::Diou, "diou"),
                (ConfidenceMetric::Nwd, "nwd"),
            ]
            .into_iter()
            .map(|(metric, name)| {
                (
                    name.to_string(),
                    with(&|m| {
                        m.head.variant = HeadVariant::VanillaRpn;
                        m.head.nwd_branch = true;
                        m.head.confidence_loss = ConfidenceLoss::Sbce;
                        m.head.confidence_metric = metric;
                    }),
                )
            })
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: usize,
    pub variant: String,
    pub seed: u64,
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub ap_small: Option<f64>,
    /// Hash of the configuration with the ablated axis blanked out.
    pub control_hash: String,
}

/// Stable FNV-1a hash of the canonical JSON of `cfg` with the ablated axes reset.
pub fn control_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    let d = crate::heads::HeadConfig::default();
    c.model.head.variant = d.variant;
    c.model.head.cls_kernel = d.cls_kernel;
    c.model.head.nwd_branch = d.nwd_branch;
    c.model.head.confidence_loss = d.confidence_loss;
    c.model.head.confidence_metric = d.confidence_metric;
    let json = serde_json::to_string(&c).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Train and evaluate every variant of `group` on the same data and seed.
/// Variants run in parallel; rows keep variant order.
pub fn run_ablation(base: &ExperimentConfig, group: AblationGroup) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (train_set, test_set) = base.split()?;
    group
        .variants(&base.model)
        .into_par_iter()
        .map(|(name, model)| {
            let cfg = ExperimentConfig { model, ..base.clone() };
            let trained = train_model(&cfg, &train_set)?;
            let report = evaluate_model(&trained.net, &test_set, &cfg)?;
            Ok(AblationRow {
                group: group.number(),
                variant: name,
                seed: cfg.seed,
                ap: report.overall.all.ap,
                ar: report.overall.all.ar,
                ap_small: report.overall.small.ap,
                control_hash: control_hash(&cfg),
            })
        })
        .collect()
}
