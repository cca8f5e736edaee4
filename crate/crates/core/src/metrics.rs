//! Confusion-matrix segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `counts[g * C + p]` = points with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for (what, v) in [("ground-truth class", truth), ("predicted class", predicted)] {
            if v >= self.classes {
                return Err(Error::OutOfRange {
                    what,
                    value: v,
                    bound: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    /// Adds another matrix of the same size (shard reduction).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes.max(1))
    }
}

pub fn confusion(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(
            "predictions",
            "prediction and ground-truth lengths differ",
        ));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in predicted.iter().zip(truth) {
        cm.record(g, p)?;
    }
    Ok(cm)
}

/// Treatment of classes absent from both predictions and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndefinedIou {
    /// Leave them out of the mean.
    #[default]
    Exclude,
    /// Count them as zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Head,
    Waist,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Waist, Group::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Waist => "waist",
            Group::Tail => "tail",
        }
    }
}

/// Assignment of every class to head, waist or tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    groups: Vec<Group>,
}

impl ClassGroups {
    pub fn new(groups: Vec<Group>) -> Self {
        Self { groups }
    }

    /// Terciles of the class sizes: classes ranked by count (largest first,
    /// ties by id), rank `r` of `C` goes to group `floor(3r / C)`. With two
    /// classes the smaller one is tail.
    pub fn terciles(class_counts: &[usize]) -> Self {
        let c = class_counts.len();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
        let mut groups = vec![Group::Head; c];
        for (rank, &class) in order.iter().enumerate() {
            groups[class] = if c < 3 {
                if rank == 0 {
                    Group::Head
                } else {
                    Group::Tail
                }
            } else {
                Group::ALL[3 * rank / c]
            };
        }
        Self { groups }
    }

    pub fn of(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn members(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(move |(_, g)| **g == group)
            .map(|(c, _)| c)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` where `TP + FP + FN == 0` and undefined classes are excluded.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub head: Option<f64>,
    pub waist: Option<f64>,
    pub tail: Option<f64>,
}

impl MetricsReport {
    pub fn group(&self, group: Group) -> Option<f64> {
        match group {
            Group::Head => self.head,
            Group::Waist => self.waist,
            Group::Tail => self.tail,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `IoU_c = TP / (TP + FP + FN)`, its mean over defined classes, overall
/// accuracy and per-group mean IoU.
pub fn iou_report(cm: &ConfusionMatrix, groups: &ClassGroups, undefined: UndefinedIou) -> MetricsReport {
    let c = cm.classes();
    let iou: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.get(g, k)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                match undefined {
                    UndefinedIou::Exclude => None,
                    UndefinedIou::Zero => Some(0.0),
                }
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect();
    let total = cm.total();
    let oa = if total == 0 {
        0.0
    } else {
        cm.trace() as f64 / total as f64
    };
    let group_mean = |g: Group| {
        mean(
            (0..c)
                .filter(|&k| k < groups.len() && groups.of(k) == g)
                .filter_map(|k| iou[k]),
        )
    };
    MetricsReport {
        miou: mean(iou.iter().flatten().copied()).unwrap_or(0.0),
        oa,
        head: group_mean(Group::Head),
        waist: group_mean(Group::Waist),
        tail: group_mean(Group::Tail),
        iou,
    }
}
