//! Two-round pseudo-label selection.
//!
//! Round one keeps a point for class `c` when its probability exceeds the
//! certain threshold `max(max_i Ŷ_ic − δ_len, δ_d)`. Round two revisits the
//! remaining points whose argmax is a tail class and keeps those above the
//! uncertain threshold `min(max_j Ŷ_jc, (1/ρ_c)^β)`. Both comparisons are
//! strict.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdKind {
    Certain,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub kind: ThresholdKind,
    pub values: Vec<f64>,
}

/// Which round produced a pseudo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Round {
    Certain,
    Uncertain,
}

impl Round {
    pub fn as_str(self) -> &'static str {
        match self {
            Round::Certain => "certain",
            Round::Uncertain => "uncertain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
    pub round: Round,
}

/// Pseudo labels ordered by point index; an index appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn new(mut entries: Vec<PseudoLabel>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        if entries.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(Error::Internal("point selected in both rounds"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PseudoLabel] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn round(&self, round: Round) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.iter().filter(move |e| e.round == round)
    }

    /// `(point, class)` pairs.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.index, e.class)).collect()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for e in &self.entries {
            counts[e.class] += 1;
        }
        counts
    }
}

/// How the imbalance ratio bounds the uncertain threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioDirection {
    /// `(1/ρ_c)^β` with `ρ_c = M_c / M_C`: head classes get the lowest bound.
    #[default]
    AsWritten,
    /// `(M_c / M_1)^β`: tail classes get the lowest bound.
    TailTolerant,
}

/// Classes eligible for the second round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TailRule {
    /// The `ceil(C · fraction)` classes with the fewest argmax predictions
    /// among the candidate points. Equal counts rank the higher class id as
    /// more tail.
    FewestPredicted { fraction: f64 },
    AllClasses,
}

impl Default for TailRule {
    fn default() -> Self {
        TailRule::FewestPredicted { fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    /// `δ_len`, width of the threshold window.
    #[serde(default = "default_window")]
    pub window: f64,
    /// `δ_d`, lower bound of the certain threshold.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// `β`, rate of the uncertain threshold.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub ratio_direction: RatioDirection,
    #[serde(default)]
    pub tail_rule: TailRule,
}

fn default_window() -> f64 {
    0.1
}
fn default_floor() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.5
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            floor: default_floor(),
            beta: default_beta(),
            ratio_direction: RatioDirection::default(),
            tail_rule: TailRule::default(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)?;
        check_floor(self.floor)?;
        check_beta(self.beta)?;
        if let TailRule::FewestPredicted { fraction } = self.tail_rule {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::invalid("tail_rule.fraction", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

fn check_window(window: f64) -> Result<()> {
    if !(0.0..1.0).contains(&window) {
        return Err(Error::invalid("window", "must lie in [0, 1)"));
    }
    Ok(())
}

fn check_floor(floor: f64) -> Result<()> {
    if !(0.5..1.0).contains(&floor) {
        return Err(Error::invalid("floor", "must lie in [0.5, 1)"));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta", "must lie in [0, 1]"));
    }
    Ok(())
}

fn column_max(probs: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; probs.cols()];
    for &r in rows {
        for (m, &p) in max.iter_mut().zip(probs.row(r)) {
            *m = m.max(p);
        }
    }
    max
}

fn check_rows(probs: &Tensor, rows: &[usize]) -> Result<()> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= probs.rows()) {
        return Err(Error::OutOfRange {
            what: "row",
            value: bad,
            bound: probs.rows(),
        });
    }
    Ok(())
}

/// `δ_c^cer = max(max_i Ŷ_ic − window, floor)` over the candidate rows.
pub fn certain_thresholds(
    probs: &Tensor,
    rows: &[usize],
    window: f64,
    floor: f64,
) -> Result<ThresholdVector> {
    check_window(window)?;
    check_floor(floor)?;
    check_rows(probs, rows)?;
    if rows.is_empty() {
        return Err(Error::EmptySet {
            what: "unlabelled point set",
        });
    }
    let values = column_max(probs, rows)
        .into_iter()
        .map(|m| (m - window).max(floor))
        .collect();
    Ok(ThresholdVector {
        kind: ThresholdKind::Certain,
        values,
    })
}

/// Per-class upper bound on the uncertain threshold.
pub fn ratio_bounds(ratios: &[f64], beta: f64, direction: RatioDirection) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if ratios.iter().any(|&r| !(r >= 1.0) || !r.is_finite()) {
        return Err(Error::invalid("ratios", "every ρ_c must be a finite value >= 1"));
    }
    let head = ratios.iter().copied().fold(1.0, f64::max);
    Ok(ratios
        .iter()
        .map(|&r| match direction {
            RatioDirection::AsWritten => math::powf(1.0 / r, beta),
            RatioDirection::TailTolerant => math::powf(r / head, beta),
        })
        .collect())
}

/// `δ_c^uncer = min(max_j Ŷ_jc, bound_c)` over the rows left after round one.
pub fn uncertain_thresholds(
    probs: &Tensor,
    rows: &[usize],
    ratios: &[f64],
    beta: f64,
    direction: RatioDirection,
) -> Result<ThresholdVector> {
    check_rows(probs, rows)?;
    if ratios.len() != probs.cols() {
        return Err(Error::invalid("ratios", "one ratio per class required"));
    }
    let bounds = ratio_bounds(ratios, beta, direction)?;
    if rows.is_empty() {
        return Err(Error::EmptySet {
            what: "remaining point set",
        });
    }
    let values = column_max(probs, rows)
        .into_iter()
        .zip(bounds)
        .map(|(m, b)| m.min(b))
        .collect();
    Ok(ThresholdVector {
        kind: ThresholdKind::Uncertain,
        values,
    })
}

/// Classes eligible for round two, ascending.
pub fn tail_classes(probs: &Tensor, rows: &[usize], rule: TailRule) -> Vec<usize> {
    let classes = probs.cols();
    match rule {
        TailRule::AllClasses => (0..classes).collect(),
        TailRule::FewestPredicted { fraction } => {
            let mut counts = vec![0usize; classes];
            for &r in rows {
                counts[argmax(probs.row(r))] += 1;
            }
            let take = (math::ceil(classes as f64 * fraction) as usize).clamp(1, classes);
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
            let mut tail: Vec<usize> = order.into_iter().take(take).collect();
            tail.sort_unstable();
            tail
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn round_one(probs: &Tensor, row: usize, cer: &ThresholdVector) -> Option<PseudoLabel> {
    let p = probs.row(row);
    let mut pick: Option<usize> = None;
    for c in 0..p.len() {
        if p[c] > cer.values[c] && pick.is_none_or(|b| p[c] > p[b]) {
            pick = Some(c);
        }
    }
    pick.map(|class| PseudoLabel {
        index: row,
        class,
        confidence: p[class],
        round: Round::Certain,
    })
}

/// Rows of `candidates` not selected by round one.
pub fn remaining_after_certain(
    probs: &Tensor,
    candidates: &[usize],
    cer: &ThresholdVector,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&r| round_one(probs, r, cer).is_none())
        .collect()
}

/// Applies both rounds. `uncer = None` skips round two.
pub fn two_round_select(
    probs: &Tensor,
    candidates: &[usize],
    cer: &ThresholdVector,
    uncer: Option<&ThresholdVector>,
    tail: &[usize],
) -> Result<PseudoLabelSet> {
    check_rows(probs, candidates)?;
    let classes = probs.cols();
    if cer.values.len() != classes || uncer.is_some_and(|u| u.values.len() != classes) {
        return Err(Error::invalid("thresholds", "one threshold per class required"));
    }
    let mut is_tail = vec![false; classes];
    for &c in tail {
        *is_tail.get_mut(c).ok_or(Error::OutOfRange {
            what: "tail class",
            value: c,
            bound: classes,
        })? = true;
    }
    let mut entries = Vec::new();
    for &r in candidates {
        if let Some(label) = round_one(probs, r, cer) {
            entries.push(label);
            continue;
        }
        let Some(uncer) = uncer else { continue };
        let p = probs.row(r);
        let c = argmax(p);
        if is_tail[c] && p[c] > uncer.values[c] {
            entries.push(PseudoLabel {
                index: r,
                class: c,
                confidence: p[c],
                round: Round::Uncertain,
            });
        }
    }
    PseudoLabelSet::new(entries)
}

/// Everything one pseudo-label generation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub labels: PseudoLabelSet,
    pub certain: ThresholdVector,
    pub uncertain: Option<ThresholdVector>,
    pub tail: Vec<usize>,
}

/// Full generation over `candidates` (the unlabelled rows): certain
/// thresholds, then, when `two_round` is set, tail classes and uncertain
/// thresholds over the rows round one left behind.
pub fn generate(
    probs: &Tensor,
    candidates: &[usize],
    ratios: &[f64],
    config: &SelectorConfig,
    two_round: bool,
) -> Result<Selection> {
    config.validate()?;
    let certain = certain_thresholds(probs, candidates, config.window, config.floor)?;
    let tail = tail_classes(probs, candidates, config.tail_rule);
    let uncertain = if two_round {
        let remaining = remaining_after_certain(probs, candidates, &certain);
        if remaining.is_empty() {
            ratio_bounds(ratios, config.beta, config.ratio_direction)?;
            None
        } else {
            Some(uncertain_thresholds(
                probs,
                &remaining,
                ratios,
                config.beta,
                config.ratio_direction,
            )?)
        }
    } else {
        None
    };
    let labels = two_round_select(probs, candidates, &certain, uncertain.as_ref(), &tail)?;
    Ok(Selection {
        labels,
        certain,
        uncertain,
        tail,
    })
}
