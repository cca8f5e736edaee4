//! Synthetic long-tail point scenes and labelling protocols.
//!
//! Class `c` (0-based) gets `round(M₁ · (1/ρ₁)^(c/(C-1)))` points drawn from an
//! isotropic Gaussian around its centre, so class sizes fall geometrically
//! from the head class to the tail class. Points are stored grouped by class.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::chacha;
use crate::{Error, Result};

/// Share of a class that lands closer to some other centre under the default spread.
const OVERLAP_FRACTION: f64 = 0.2;

/// Standard-normal draws per class used to calibrate the default spread.
const CALIBRATION_DRAWS: usize = 4096;
const CALIBRATION_SEED: u64 = 0x5eed_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub classes: usize,
    /// Size of the largest class, `M₁`.
    pub head_points: usize,
    /// `M₁ / M_C`.
    pub imbalance_ratio: f64,
    /// Per-class Gaussian standard deviation. `None` picks the value at which
    /// about 20% of each cluster lands nearer another centre.
    #[serde(default)]
    pub spread: Option<f64>,
    /// Cluster centres. `None` spreads them over the unit sphere.
    #[serde(default)]
    pub centers: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(classes: usize, head_points: usize, imbalance_ratio: f64, seed: u64) -> Self {
        Self {
            classes,
            head_points,
            imbalance_ratio,
            spread: None,
            centers: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least 2 classes"));
        }
        if self.head_points < self.classes {
            return Err(Error::invalid(
                "head_points",
                "head class must have at least as many points as there are classes",
            ));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::invalid("imbalance_ratio", "must be a finite value >= 1"));
        }
        if (self.head_points as f64) / self.imbalance_ratio < 1.0 {
            return Err(Error::invalid(
                "imbalance_ratio",
                "head_points / imbalance_ratio < 1 leaves the tail class empty",
            ));
        }
        if let Some(s) = self.spread {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid("spread", "must be positive"));
            }
        }
        if let Some(c) = &self.centers {
            if c.len() != self.classes {
                return Err(Error::invalid("centers", "need one centre per class"));
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("centers", "must be finite"));
            }
            if c.iter().enumerate().any(|(i, a)| c[i + 1..].iter().any(|b| dist2(a, b) == 0.0)) {
                return Err(Error::invalid("centers", "must be distinct"));
            }
        }
        Ok(())
    }

    /// Geometric class-size schedule from `M₁` down to `round(M₁/ρ₁)`.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let denom = (self.classes - 1) as f64;
        Ok((0..self.classes)
            .map(|c| {
                let frac = c as f64 / denom;
                let size = self.head_points as f64 * math::powf(1.0 / self.imbalance_ratio, frac);
                math::round(size) as usize
            })
            .collect())
    }

    pub fn resolved_centers(&self) -> Vec<[f64; 3]> {
        self.centers
            .clone()
            .unwrap_or_else(|| sphere_centers(self.classes))
    }

    /// The configured spread, or the σ at which 20% of every class (pooled
    /// over classes) falls closer to another centre than to its own.
    pub fn resolved_spread(&self) -> f64 {
        self.spread
            .unwrap_or_else(|| overlap_spread(&self.resolved_centers(), OVERLAP_FRACTION))
    }
}

/// σ such that a `fraction` of isotropic Gaussian draws around each centre
/// are nearer another centre. A draw `μ_k + σz` crosses to centre `j` once
/// `σ > |μ_j − μ_k|² / (2 z·(μ_j − μ_k))`, so each draw has a critical σ and
/// the answer is a quantile of those. The draws come from a fixed seed.
pub fn overlap_spread(centers: &[[f64; 3]], fraction: f64) -> f64 {
    if centers.len() < 2 {
        return 1.0;
    }
    let mut rng = chacha(CALIBRATION_SEED);
    let mut critical = Vec::with_capacity(centers.len() * CALIBRATION_DRAWS);
    for (k, mk) in centers.iter().enumerate() {
        for _ in 0..CALIBRATION_DRAWS {
            let z: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let mut sigma = f64::INFINITY;
            for (j, mj) in centers.iter().enumerate() {
                if j == k {
                    continue;
                }
                let d = [mj[0] - mk[0], mj[1] - mk[1], mj[2] - mk[2]];
                let dot = z[0] * d[0] + z[1] * d[1] + z[2] * d[2];
                if dot > 0.0 {
                    sigma = sigma.min(dist2(mj, mk) / (2.0 * dot));
                }
            }
            critical.push(sigma);
        }
    }
    critical.sort_by(f64::total_cmp);
    let at = ((fraction * critical.len() as f64) as usize).min(critical.len() - 1);
    critical[at]
}

/// Evenly spaced points on the unit sphere (Fibonacci lattice).
pub fn sphere_centers(n: usize) -> Vec<[f64; 3]> {
    let golden = core::f64::consts::PI * (3.0 - math::sqrt(5.0));
    (0..n)
        .map(|i| {
            let y = if n == 1 {
                0.0
            } else {
                1.0 - 2.0 * i as f64 / (n - 1) as f64
            };
            let r = math::sqrt((1.0 - y * y).max(0.0));
            let theta = golden * i as f64;
            [r * libm::cos(theta), y, r * libm::sin(theta)]
        })
        .collect()
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// A point set with ground-truth classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
}

impl Scene {
    /// Builds a scene from raw points and labels, checking consistency.
    pub fn new(points: Vec<[f64; 3]>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::invalid("labels", "one label per point required"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("points", "coordinates must be finite"));
        }
        let mut class_counts = vec![0; classes];
        for &l in &labels {
            *class_counts.get_mut(l).ok_or(Error::OutOfRange {
                what: "class id",
                value: l,
                bound: classes,
            })? += 1;
        }
        Ok(Self {
            points,
            labels,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn indices_of(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == class)
            .map(|(i, _)| i)
    }
}

/// Draws a scene. Deterministic in `config.seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    let sizes = config.class_sizes()?;
    let centers = config.resolved_centers();
    let spread = config.resolved_spread();
    let mut rng = chacha(config.seed);
    let total = sizes.iter().sum();
    let mut points = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (class, (&size, center)) in sizes.iter().zip(&centers).enumerate() {
        for _ in 0..size {
            let mut p = *center;
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += spread * z;
            }
            points.push(p);
            labels.push(class);
        }
    }
    Ok(Scene {
        points,
        labels,
        class_counts: sizes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelProtocol {
    /// A fraction of every class, at least one point each.
    Percent { fraction: f64 },
    /// Exactly one labelled point per class.
    OnePoint,
    /// Labels read back from a file; no sampling rule.
    Explicit,
}

/// The labelled subset of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub protocol: LabelProtocol,
    /// Strictly increasing point indices.
    pub indices: Vec<usize>,
}

impl LabelMask {
    /// Wraps an explicit index list after sorting and checking it.
    pub fn explicit(mut indices: Vec<usize>, scene: &Scene) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("labelled indices", "duplicate index"));
        }
        if let Some(&last) = indices.last() {
            if last >= scene.len() {
                return Err(Error::OutOfRange {
                    what: "point index",
                    value: last,
                    bound: scene.len(),
                });
            }
        }
        Ok(Self {
            protocol: LabelProtocol::Explicit,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// `(point, class)` pairs for the labelled points.
    pub fn targets(&self, scene: &Scene) -> Vec<(usize, usize)> {
        self.indices.iter().map(|&i| (i, scene.labels[i])).collect()
    }

    /// Indices of the points not in the mask, increasing.
    pub fn unlabeled(&self, scene: &Scene) -> Vec<usize> {
        let mut out = Vec::with_capacity(scene.len() - self.len());
        let mut labelled = self.indices.iter().peekable();
        for i in 0..scene.len() {
            if labelled.peek() == Some(&&i) {
                labelled.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn labeled_counts(&self, scene: &Scene) -> Vec<usize> {
        let mut counts = vec![0; scene.classes()];
        for &i in &self.indices {
            counts[scene.labels[i]] += 1;
        }
        counts
    }
}

/// Samples the labelled subset, uniformly without replacement within each class.
pub fn apply_labeling(scene: &Scene, protocol: LabelProtocol, seed: u64) -> Result<LabelMask> {
    match protocol {
        LabelProtocol::Percent { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::invalid("fraction", "must lie in (0, 1]"));
            }
        }
        LabelProtocol::OnePoint => {
            if let Some(class) = scene.class_counts.iter().position(|&n| n == 0) {
                return Err(Error::EmptyClass { class });
            }
        }
        LabelProtocol::Explicit => {
            return Err(Error::invalid("protocol", "explicit masks are not sampled"))
        }
    }
    let mut rng = chacha(seed);
    let mut indices = Vec::new();
    for class in 0..scene.classes() {
        let members: Vec<usize> = scene.indices_of(class).collect();
        let take = match protocol {
            LabelProtocol::Percent { fraction } => {
                let want = math::round(fraction * members.len() as f64) as usize;
                want.max(1).min(members.len())
            }
            _ => 1,
        };
        for k in index::sample(&mut rng, members.len(), take) {
            indices.push(members[k]);
        }
    }
    indices.sort_unstable();
    Ok(LabelMask { protocol, indices })
}

/// `ρ_c = labelled(c) / min_k labelled(k)`.
pub fn imbalance_ratios(mask: &LabelMask, scene: &Scene) -> Result<Vec<f64>> {
    ratios_from_counts(&mask.labeled_counts(scene))
}

/// [`imbalance_ratios`] from raw per-class counts.
pub fn ratios_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    let min = *counts.iter().min().ok_or(Error::EmptySet { what: "classes" })? as f64;
    Ok(counts.iter().map(|&n| n as f64 / min).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_sizes() {
        let cfg = SceneConfig::new(2, 10, 1.0, 0);
        assert_eq!(cfg.class_sizes().unwrap(), vec![10, 10]);
        assert_eq!(generate_scene(&cfg).unwrap().class_counts, vec![10, 10]);
    }

    #[test]
    fn geometric_sizes() {
        // round(100 · (1/100)^(c/2)) for c = 0, 1, 2
        let cfg = SceneConfig::new(3, 100, 100.0, 0);
        assert_eq!(cfg.class_sizes().unwrap(), vec![100, 10, 1]);
    }

    #[test]
    fn rejects_empty_tail() {
        let cfg = SceneConfig::new(3, 10, 20.0, 0);
        assert!(matches!(
            generate_scene(&cfg),
            Err(Error::InvalidArgument { name: "imbalance_ratio", .. })
        ));
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::new(4, 50, 10.0, 42);
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        let bits = |s: &Scene| -> Vec<u64> { s.points.iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
        let c = generate_scene(&SceneConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn default_spread_gives_twenty_percent_overlap() {
        let cfg = SceneConfig::new(2, 10, 1.0, 0);
        // two antipodal centres, distance 2: 20% past the midplane at σ = 1 / Φ⁻¹(0.8)
        let exact = 1.0 / 0.841_621_233_572_914_3;
        assert!((cfg.resolved_spread() - exact).abs() < 0.03 * exact, "{}", cfg.resolved_spread());
        let six = SceneConfig::new(6, 10, 1.0, 0);
        let sigma = six.resolved_spread();
        let centers = six.resolved_centers();
        let mut rng = chacha(77);
        let (mut crossed, draws) = (0, 20_000);
        for i in 0..draws {
            let k = i % 6;
            let z: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let x = core::array::from_fn(|a| centers[k][a] + sigma * z[a]);
            let own = dist2(&x, &centers[k]);
            crossed += centers.iter().any(|c| dist2(&x, c) < own) as usize;
        }
        let share = crossed as f64 / draws as f64;
        assert!((share - 0.2).abs() < 0.015, "{share}");
    }

    #[test]
    fn one_point_labels_every_class_once() {
        let cfg = SceneConfig::new(13, 200, 20.0, 1);
        let scene = generate_scene(&cfg).unwrap();
        let mask = apply_labeling(&scene, LabelProtocol::OnePoint, 5).unwrap();
        assert_eq!(mask.len(), 13);
        assert_eq!(mask.labeled_counts(&scene), vec![1; 13]);
        assert_eq!(imbalance_ratios(&mask, &scene).unwrap(), vec![1.0; 13]);
    }

    #[test]
    fn percent_labels_per_class() {
        let scene = Scene::new(vec![[0.0; 3]; 1003], {
            let mut l = vec![0; 1000];
            l.extend([1, 1, 1]);
            l
        }, 2)
        .unwrap();
        let mask = apply_labeling(&scene, LabelProtocol::Percent { fraction: 0.01 }, 3).unwrap();
        // max(1, round(0.01 · 1000)) and max(1, round(0.03))
        assert_eq!(mask.labeled_counts(&scene), vec![10, 1]);
        let full = apply_labeling(&scene, LabelProtocol::Percent { fraction: 1.0 }, 3).unwrap();
        assert_eq!(full.len(), scene.len());
        for bad in [0.0, -0.1, 1.5] {
            assert!(apply_labeling(&scene, LabelProtocol::Percent { fraction: bad }, 0).is_err());
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ratios_from_counts(&[100, 10, 1]).unwrap(), vec![100.0, 10.0, 1.0]);
        assert_eq!(ratios_from_counts(&[5, 5]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(ratios_from_counts(&[3, 0, 1]), Err(Error::EmptyClass { class: 1 }));
    }

    #[test]
    fn unlabeled_is_complement() {
        let cfg = SceneConfig::new(3, 40, 4.0, 9);
        let scene = generate_scene(&cfg).unwrap();
        let mask = apply_labeling(&scene, LabelProtocol::Percent { fraction: 0.2 }, 9).unwrap();
        let un = mask.unlabeled(&scene);
        assert_eq!(un.len() + mask.len(), scene.len());
        assert!(un.iter().all(|i| !mask.contains(*i)));
    }

    proptest! {
        #[test]
        fn sizes_non_increasing(classes in 2usize..12, head in 12usize..400, ratio in 1.0f64..12.0) {
            let cfg = SceneConfig::new(classes, head, ratio, 0);
            let sizes = cfg.class_sizes().unwrap();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(sizes[0], head);
        }

        #[test]
        fn masks_are_sorted_unique_and_consistent(seed in any::<u64>(), fraction in 0.001f64..1.0) {
            let scene = generate_scene(&SceneConfig::new(4, 60, 6.0, seed)).unwrap();
            let mask = apply_labeling(&scene, LabelProtocol::Percent { fraction }, seed).unwrap();
            prop_assert!(mask.indices.windows(2).all(|w| w[0] < w[1]));
            let counts = mask.labeled_counts(&scene);
            for (c, &n) in counts.iter().enumerate() {
                let want = (libm::round(fraction * scene.class_counts[c] as f64) as usize)
                    .max(1)
                    .min(scene.class_counts[c]);
                prop_assert_eq!(n, want);
            }
            let rho = imbalance_ratios(&mask, &scene).unwrap();
            prop_assert!(rho.iter().all(|&r| r >= 1.0));
            prop_assert!(rho.contains(&1.0));
        }
    }
}
