//! Focal-loss family and segmentation cross-entropies.
//!
//! Every loss has a plain numeric form over a probability matrix and a graph
//! form recorded on a [`Tape`] from logits. The focusing factors `γ^c` enter
//! the graph as constant exponents.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Exponent, NodeId, Tape};
use crate::math;
use crate::pseudolabel::PseudoLabelSet;
use crate::{Error, Result, Tensor};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Guards `pos / (pos + neg)` against a zero denominator.
pub const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// `α_t`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// `s`, upper limit of the focusing factors.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Weight of the pseudo-label focal term against the cross-entropy.
    #[serde(default = "default_weight")]
    pub unsupervised_weight: f64,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_scale() -> f64 {
    10.0
}
fn default_weight() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            scale: default_scale(),
            unsupervised_weight: default_weight(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be finite and >= 0"));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid("scale", "must be finite and > 0"));
        }
        if !(self.unsupervised_weight >= 0.0) || !self.unsupervised_weight.is_finite() {
            return Err(Error::invalid("unsupervised_weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `-α (1 - p_t)^γ ln p_t`.
pub fn focal_binary(p_t: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::invalid("p_t", "must lie in (0, 1]"));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", "must be finite and >= 0"));
    }
    Ok(-alpha * math::powf(1.0 - p_t, gamma) * math::ln(p_t))
}

/// Per-class accumulated positive and negative gradient magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRatioTracker {
    positive: Vec<f64>,
    negative: Vec<f64>,
}

impl GradRatioTracker {
    pub fn new(classes: usize) -> Self {
        Self {
            positive: vec![0.0; classes],
            negative: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.positive.len()
    }

    pub fn positive(&self) -> &[f64] {
        &self.positive
    }

    pub fn negative(&self) -> &[f64] {
        &self.negative
    }

    pub fn reset(&mut self) {
        self.positive.iter_mut().for_each(|v| *v = 0.0);
        self.negative.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds one backward pass worth of magnitudes.
    pub fn update(&mut self, positive: &[f64], negative: &[f64]) -> Result<()> {
        if positive.len() != self.classes() || negative.len() != self.classes() {
            return Err(Error::invalid("magnitudes", "one value per class required"));
        }
        if positive
            .iter()
            .chain(negative)
            .any(|&v| !(v >= 0.0) || !v.is_finite())
        {
            return Err(Error::invalid("magnitudes", "must be finite and >= 0"));
        }
        for (acc, v) in self.positive.iter_mut().zip(positive) {
            *acc += v;
        }
        for (acc, v) in self.negative.iter_mut().zip(negative) {
            *acc += v;
        }
        Ok(())
    }

    /// `g^c = pos / (pos + neg + ε)`, zero when nothing was accumulated.
    pub fn ratios(&self) -> Vec<f64> {
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(&p, &n)| {
                if p == 0.0 && n == 0.0 {
                    0.0
                } else {
                    (p / (p + n + RATIO_EPS)).clamp(0.0, 1.0)
                }
            })
            .collect()
    }
}

/// Functional form of [`GradRatioTracker::update`].
pub fn update_grad_ratios(
    mut tracker: GradRatioTracker,
    positive: &[f64],
    negative: &[f64],
) -> Result<GradRatioTracker> {
    tracker.update(positive, negative)?;
    Ok(tracker)
}

/// Splits logit gradients into per-class positive magnitudes (rows whose
/// target is the class) and negative magnitudes (all other targeted rows).
pub fn gradient_split(grad_logits: &Tensor, targets: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let classes = grad_logits.cols();
    let mut positive = vec![0.0; classes];
    let mut negative = vec![0.0; classes];
    for &(row, target) in targets {
        for (c, g) in grad_logits.row(row).iter().enumerate() {
            if c == target {
                positive[c] += g.abs();
            } else {
                negative[c] += g.abs();
            }
        }
    }
    (positive, negative)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusingFactors {
    /// `s (1 - g^c) - 1/ρ_c` before clamping.
    pub raw: Vec<f64>,
    /// `max(0, raw)`.
    pub gamma: Vec<f64>,
    pub scale: f64,
}

/// `γ^c = max(0, s (1 - g^c) - 1/ρ_c)`.
pub fn focusing_factors(
    tracker: &GradRatioTracker,
    ratios: &[f64],
    scale: f64,
) -> Result<FocusingFactors> {
    if ratios.len() != tracker.classes() {
        return Err(Error::invalid("ratios", "one ratio per class required"));
    }
    if ratios.iter().any(|&r| !(r >= 1.0) || !r.is_finite()) {
        return Err(Error::invalid("ratios", "every ρ_c must be a finite value >= 1"));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", "must be finite and > 0"));
    }
    let raw: Vec<f64> = tracker
        .ratios()
        .iter()
        .zip(ratios)
        .map(|(g, rho)| scale * (1.0 - g) - 1.0 / rho)
        .collect();
    let gamma = raw.iter().map(|&r| r.max(0.0)).collect();
    Ok(FocusingFactors { raw, gamma, scale })
}

/// A scalar loss with its per-class breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub per_class: Vec<f64>,
    /// Set when the loss had no terms (an empty pseudo-label set).
    pub empty: bool,
}

impl LossValue {
    fn from_per_class(per_class: Vec<f64>, empty: bool) -> Self {
        Self {
            total: per_class.iter().sum(),
            per_class,
            empty,
        }
    }
}

fn prob_at(probs: &Tensor, row: usize, class: usize) -> Result<f64> {
    if row >= probs.rows() {
        return Err(Error::OutOfRange {
            what: "row",
            value: row,
            bound: probs.rows(),
        });
    }
    if class >= probs.cols() {
        return Err(Error::OutOfRange {
            what: "class",
            value: class,
            bound: probs.cols(),
        });
    }
    Ok(probs.get(row, class).clamp(PROB_FLOOR, 1.0))
}

/// `Σ_i -α_t (1 - p_{t,i})^{γ^{c_i}} ln p_{t,i}` over pseudo-labelled points,
/// one term per point at its pseudo class.
pub fn mi_focal_loss(
    probs: &Tensor,
    pseudo: &PseudoLabelSet,
    alpha: f64,
    gamma: &FocusingFactors,
) -> Result<LossValue> {
    if gamma.gamma.len() != probs.cols() {
        return Err(Error::invalid("gamma", "one focusing factor per class required"));
    }
    let mut per_class = vec![0.0; probs.cols()];
    for e in pseudo.entries() {
        let p = prob_at(probs, e.index, e.class)?;
        per_class[e.class] += focal_binary(p, alpha, gamma.gamma[e.class])?;
    }
    Ok(LossValue::from_per_class(per_class, pseudo.is_empty()))
}

/// Mean over `labels` of `-ln p(class)`.
pub fn seg_ce(probs: &Tensor, labels: &[(usize, usize)]) -> Result<LossValue> {
    if labels.is_empty() {
        return Err(Error::EmptySet { what: "label set" });
    }
    let n = labels.len() as f64;
    let mut per_class = vec![0.0; probs.cols()];
    for &(row, class) in labels {
        per_class[class] -= math::ln(prob_at(probs, row, class)?) / n;
    }
    Ok(LossValue::from_per_class(per_class, false))
}

/// Unweighted sum of the focal and cross-entropy terms.
pub fn feature_loss(mi_fl: &LossValue, seg: &LossValue) -> LossValue {
    let per_class = mi_fl
        .per_class
        .iter()
        .zip(&seg.per_class)
        .map(|(a, b)| a + b)
        .collect();
    LossValue {
        total: mi_fl.total + seg.total,
        per_class,
        empty: mi_fl.empty && seg.empty,
    }
}

/// Records the cross-entropy over `targets` (mean) from logits.
pub fn seg_ce_graph(tape: &mut Tape, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::EmptySet { what: "label set" });
    }
    tape.softmax_cross_entropy(logits, targets.to_vec())
}

/// Records the multi-class imbalanced focal loss from logits. `gammas[c]` is
/// the focusing factor of class `c`.
pub fn mi_focal_graph(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[(usize, usize)],
    alpha: f64,
    gammas: &[f64],
) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::EmptySet {
            what: "pseudo-label set",
        });
    }
    let exps = targets
        .iter()
        .map(|&(_, c)| {
            gammas.get(c).copied().ok_or(Error::OutOfRange {
                what: "class",
                value: c,
                bound: gammas.len(),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let probs = tape.row_softmax(logits)?;
    let p_t = tape.gather(probs, targets.to_vec())?;
    let clamped = tape.clamp_min(p_t, PROB_FLOOR)?;
    let log_p = tape.ln(clamped)?;
    let neg = tape.scale(p_t, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let modulator = tape.pow(one_minus, Exponent::PerElement(exps))?;
    let terms = tape.mul(modulator, log_p)?;
    let total = tape.sum(terms)?;
    tape.scale(total, -alpha)
}

/// Records `weight · L_mI-FL + L_seg-I`; the focal term is skipped when there
/// are no pseudo targets or the weight is zero.
pub fn feature_loss_graph(
    tape: &mut Tape,
    logits: NodeId,
    seg_targets: &[(usize, usize)],
    pseudo_targets: &[(usize, usize)],
    config: &LossConfig,
    gammas: &[f64],
) -> Result<NodeId> {
    let seg = seg_ce_graph(tape, logits, seg_targets)?;
    if pseudo_targets.is_empty() || config.unsupervised_weight == 0.0 {
        return Ok(seg);
    }
    let focal = mi_focal_graph(tape, logits, pseudo_targets, config.alpha, gammas)?;
    let focal = if config.unsupervised_weight == 1.0 {
        focal
    } else {
        tape.scale(focal, config.unsupervised_weight)?
    };
    tape.add(focal, seg)
}
