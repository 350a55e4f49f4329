//! Losses with analytic gradients, the combined RPN objective, and
//! score rectification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of a loss and its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Predicted localization confidences paired with their soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SbceBatch {
    predictions: Vec<f64>,
    labels: Vec<f64>,
}

impl SbceBatch {
    pub fn new(predictions: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: predictions.len(),
                right: labels.len(),
            });
        }
        if predictions.is_empty() {
            return Err(Error::Empty("SBCE batch"));
        }
        for (i, (p, y)) in predictions.iter().zip(&labels).enumerate() {
            if !((p - y).abs() < 1.0) {
                return Err(Error::NonFinite(format!(
                    "SBCE element {i}: |y - p| = |{y} - {p}| >= 1"
                )));
            }
        }
        Ok(Self { predictions, labels })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Soft binary cross entropy: `-log(1 - |y - p|)` per element.
///
/// Reduces to ordinary binary cross entropy when labels are hard (0 or 1).
/// The gradient at `p == y` is taken as 0.
pub fn sbce(batch: &SbceBatch, reduction: Reduction) -> LossGrad {
    let k = reduction.scale(batch.len());
    let mut value = 0.0;
    let grad = batch
        .predictions
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let gap = 1.0 - (y - p).abs();
            value -= gap.ln();
            k * sign(p - y) / gap
        })
        .collect();
    LossGrad { value: value * k, grad }
}

/// Binary cross entropy on probabilities, used as an independent reference for [`sbce`].
pub fn bce(predictions: &[f64], labels: &[f64], reduction: Reduction) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(total * reduction.scale(predictions.len()))
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `sum |p - y|` with subgradient `sign(p - y)` (0 at ties).
pub fn l1_loss(predictions: &[f64], labels: &[f64], reduction: Reduction) -> Result<LossGrad> {
    check_lengths(predictions, labels)?;
    if predictions.is_empty() {
        return Err(Error::Empty("L1 loss input"));
    }
    let k = reduction.scale(predictions.len());
    let value: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    let grad = predictions.iter().zip(labels).map(|(p, y)| k * sign(p - y)).collect();
    Ok(LossGrad { value: value * k, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_nwd: f64,
    pub omega_nwd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_nwd: 1.0,
            omega_nwd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_nwd >= 0.0 && self.lambda_nwd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_nwd must be >= 0, got {}",
                self.lambda_nwd
            )));
        }
        if !(0.0..=2.0).contains(&self.omega_nwd) {
            return Err(Error::InvalidArgument(format!(
                "omega_nwd must lie in [0, 2], got {}",
                self.omega_nwd
            )));
        }
        Ok(())
    }
}

/// `cls + loc + lambda_nwd * nwd`
pub fn rpn_total_loss(cls: f64, loc: f64, nwd: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("cls", cls), ("loc", loc), ("nwd", nwd)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} loss must be non-negative, got {v}"
            )));
        }
    }
    Ok(cls + loc + weights.lambda_nwd * nwd)
}

/// `sqrt(s_cls^(2 - omega) * p^omega)`
pub fn rectify_score(s_cls: f64, p: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("s_cls", s_cls), ("p", p)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie strictly inside (0, 1), got {v}"
            )));
        }
    }
    let w = weights.omega_nwd;
    Ok((s_cls.powf(2.0 - w) * p.powf(w)).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross entropy on logits over the sampled anchors.
pub fn cls_loss(logits: &[f64], labels: &[f64]) -> Result<LossGrad> {
    check_lengths(logits, labels)?;
    if logits.is_empty() {
        return Err(Error::Empty("classification sample set"));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            value += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - y) / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Smooth-L1 over box deltas, summed over the four coordinates and averaged
/// over positives. No positives gives zero loss.
pub fn loc_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let beta = SMOOTH_L1_BETA;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = [0.0; 4];
            for k in 0..4 {
                let d = p[k] - t[k];
                if d.abs() < beta {
                    value += 0.5 * d * d / beta;
                    g[k] = d / beta / n;
                } else {
                    value += d.abs() - 0.5 * beta;
                    g[k] = sign(d) / n;
                }
            }
            g
        })
        .collect();
    Ok((value / n, grad))
}
