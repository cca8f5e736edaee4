//! Point-feature backbone and classifier head.
//!
//! Each point is described by its own coordinates concatenated with the mean
//! coordinates of its K nearest neighbours. The backbone is a two-layer ReLU
//! MLP over that 6-vector; the classifier is a single linear layer followed by
//! a row softmax.

use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, NodeId, Tape};
use crate::math;
use crate::synthdata::{dist2, Scene};
use crate::{Error, Result, Tensor};

/// Width of the augmented per-point input.
pub const INPUT_DIM: usize = 6;

/// Backbone weights `θ_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `6 × H`
    pub w1: Tensor,
    /// `1 × H`
    pub b1: Tensor,
    /// `H × H`
    pub w2: Tensor,
    /// `1 × H`
    pub b2: Tensor,
}

impl BackboneParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(INPUT_DIM, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(hidden, hidden, rng),
            b2: Tensor::zeros(1, hidden),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(INPUT_DIM, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, hidden),
            b2: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Tensors in serialisation order.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let expected = [(INPUT_DIM, h), (1, h), (h, h), (1, h)];
        check_shapes("backbone", &self.tensors(), &expected)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.tensors().iter().for_each(|t| t.write_le(&mut out));
        out
    }
}

/// Classifier weights `θ_cls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `H × C`
    pub weight: Tensor,
    /// `1 × C`
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(hidden, classes, rng),
            bias: Tensor::zeros(1, classes),
        }
    }

    pub fn zeros(hidden: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(hidden, classes),
            bias: Tensor::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn hidden(&self) -> usize {
        self.weight.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, c) = self.weight.shape();
        check_shapes("classifier", &self.tensors(), &[(h, c), (1, c)])
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.tensors().iter().for_each(|t| t.write_le(&mut out));
        out
    }
}

fn check_shapes(what: &'static str, tensors: &[&Tensor], expected: &[(usize, usize)]) -> Result<()> {
    for (t, &shape) in tensors.iter().zip(expected) {
        if t.shape() != shape {
            return Err(Error::invalid(what, "inconsistent parameter shapes"));
        }
        if !t.is_finite() {
            return Err(Error::invalid(what, "non-finite parameter"));
        }
    }
    Ok(())
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(fan_in, fan_out, data).expect("shape")
}

/// K nearest neighbours of every point, self excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    /// Neighbours per point (`min(K, N-1)`).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Neighbours of `point`, nearest first.
    pub fn of(&self, point: usize) -> &[usize] {
        &self.neighbors[point * self.k..(point + 1) * self.k]
    }
}

/// Exact brute-force K-NN under Euclidean distance. Equal distances are
/// ordered by point index; `k` is clamped to `N - 1`.
pub fn build_knn(scene: &Scene, k: usize) -> Result<NeighborIndex> {
    knn_points(&scene.points, k)
}

pub fn knn_points(points: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("points", "need at least two points"));
    }
    let k = k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, p) in points.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| (dist2(p, q), j)),
        );
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_distance);
        }
        let nearest = &mut scratch[..k];
        nearest.sort_unstable_by(by_distance);
        neighbors.extend(nearest.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, neighbors })
}

/// `N × 6` rows of `[x, y, z, mean neighbour x, y, z]`.
pub fn augmented_inputs(scene: &Scene, nn: &NeighborIndex) -> Result<Tensor> {
    if nn.len() != scene.len() {
        return Err(Error::invalid("neighbor index", "built for a different scene"));
    }
    let mut data = Vec::with_capacity(scene.len() * INPUT_DIM);
    for (i, p) in scene.points.iter().enumerate() {
        data.extend_from_slice(p);
        let mut mean = [0.0; 3];
        for &j in nn.of(i) {
            for (m, v) in mean.iter_mut().zip(&scene.points[j]) {
                *m += v;
            }
        }
        let inv = 1.0 / nn.k() as f64;
        data.extend(mean.iter().map(|m| m * inv));
    }
    Tensor::new(scene.len(), INPUT_DIM, data)
}

/// Node ids of the backbone parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BackboneNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub features: NodeId,
}

impl BackboneNodes {
    pub fn params(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub logits: NodeId,
}

impl ClassifierNodes {
    pub fn params(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}

fn param_leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Result<NodeId> {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.frozen_param(t.clone())
    }
}

/// Records `ReLU(ReLU(x·W₁ + b₁)·W₂ + b₂)`.
pub fn backbone_graph(
    tape: &mut Tape,
    params: &BackboneParams,
    inputs: NodeId,
    trainable: bool,
) -> Result<BackboneNodes> {
    let w1 = param_leaf(tape, &params.w1, trainable)?;
    let b1 = param_leaf(tape, &params.b1, trainable)?;
    let w2 = param_leaf(tape, &params.w2, trainable)?;
    let b2 = param_leaf(tape, &params.b2, trainable)?;
    let h = tape.matmul(inputs, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row(h, b2)?;
    let features = tape.relu(h)?;
    Ok(BackboneNodes {
        w1,
        b1,
        w2,
        b2,
        features,
    })
}

/// Records `features·W + b` (logits; the softmax is applied by the losses).
pub fn classifier_graph(
    tape: &mut Tape,
    params: &ClassifierParams,
    features: NodeId,
    trainable: bool,
) -> Result<ClassifierNodes> {
    let weight = param_leaf(tape, &params.weight, trainable)?;
    let bias = param_leaf(tape, &params.bias, trainable)?;
    let z = tape.matmul(features, weight)?;
    let logits = tape.add_row(z, bias)?;
    Ok(ClassifierNodes {
        weight,
        bias,
        logits,
    })
}

/// Backbone features for precomputed augmented inputs (`N × 6`).
pub fn features_from_inputs(params: &BackboneParams, inputs: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone())?;
    let nodes = backbone_graph(&mut tape, params, x, false)?;
    Ok(tape.value(nodes.features)?.clone())
}

/// `N × H` backbone features of a scene.
pub fn extract_features(params: &BackboneParams, scene: &Scene, nn: &NeighborIndex) -> Result<Tensor> {
    features_from_inputs(params, &augmented_inputs(scene, nn)?)
}

pub fn logits(params: &ClassifierParams, features: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let nodes = classifier_graph(&mut tape, params, f, false)?;
    Ok(tape.value(nodes.logits)?.clone())
}

/// Row-softmax of the classifier logits: the probability matrix `Ŷ`.
pub fn predict_probs(params: &ClassifierParams, features: &Tensor) -> Result<Tensor> {
    let mut probs = logits(params, features).map_err(|e| match e {
        Error::NonFinite { .. } => Error::invalid("logits", "non-finite logits"),
        e => e,
    })?;
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    Ok(probs)
}

/// Argmax class of every row.
pub fn predict_classes(probs: &Tensor) -> Vec<usize> {
    probs.row_argmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;
    use crate::synthdata::{generate_scene, SceneConfig};
    use alloc::vec;
    use proptest::prelude::*;

    fn line_scene() -> Scene {
        Scene::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![0, 0, 1],
            2,
        )
        .unwrap()
    }

    /// Brute-force K-NN: full sort of (distance, index).
    fn knn_oracle(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
        (0..points.len())
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| (dist2(&points[i], &points[j]), j))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn collinear_ties_go_to_lower_index() {
        let nn = build_knn(&line_scene(), 1).unwrap();
        assert_eq!([nn.of(0)[0], nn.of(1)[0], nn.of(2)[0]], [1, 0, 1]);
    }

    #[test]
    fn k_clamps_to_all_others() {
        let nn = build_knn(&line_scene(), 16).unwrap();
        assert_eq!(nn.k(), 2);
        assert_eq!(nn.of(1), &[0, 2]);
        assert!(build_knn(&line_scene(), 0).is_err());
    }

    #[test]
    fn duplicates_never_self_reference() {
        let scene = Scene::new(vec![[1.0; 3]; 5], vec![0; 5], 1).unwrap();
        let nn = build_knn(&scene, 2).unwrap();
        for i in 0..5 {
            assert!(!nn.of(i).contains(&i));
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let scene = line_scene();
        let nn = build_knn(&scene, 1).unwrap();
        let f = extract_features(&BackboneParams::zeros(4), &scene, &nn).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_hand_computed() {
        // Two points; each one's single neighbour is the other.
        let scene = Scene::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], vec![0, 1], 2).unwrap();
        let nn = build_knn(&scene, 1).unwrap();
        let mut p = BackboneParams::zeros(2);
        // unit 0 reads own x, unit 1 reads -(neighbour y)
        p.w1.set(0, 0, 1.0);
        p.w1.set(4, 1, -1.0);
        p.b1.data_mut().copy_from_slice(&[0.5, 0.5]);
        // second layer is the identity
        p.w2.set(0, 0, 1.0);
        p.w2.set(1, 1, 1.0);
        let f = extract_features(&p, &scene, &nn).unwrap();
        // point 0: [1 + 0.5, relu(-2 + 0.5)] = [1.5, 0]
        // point 1: [0 + 0.5, relu(-0 + 0.5)] = [0.5, 0.5]
        assert_eq!(f.data(), &[1.5, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let f = Tensor::filled(3, 4, 0.7);
        let p = predict_probs(&ClassifierParams::zeros(4, 5), &f).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn logits_ln2_zero() {
        let mut c = ClassifierParams::zeros(1, 2);
        c.bias.data_mut()[0] = core::f64::consts::LN_2;
        let p = predict_probs(&c, &Tensor::zeros(1, 1)).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_classifier_gets_zero_gradient() {
        let scene = generate_scene(&SceneConfig::new(3, 12, 2.0, 1)).unwrap();
        let nn = build_knn(&scene, 4).unwrap();
        let x = augmented_inputs(&scene, &nn).unwrap();
        let mut rng = chacha(3);
        let b = BackboneParams::init(5, &mut rng);
        let c = ClassifierParams::init(5, 3, &mut rng);
        for freeze_classifier in [true, false] {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone()).unwrap();
            let bn = backbone_graph(&mut tape, &b, xi, freeze_classifier).unwrap();
            let cn = classifier_graph(&mut tape, &c, bn.features, !freeze_classifier).unwrap();
            tape.softmax_cross_entropy(cn.logits, vec![(0, 0), (5, 2)]).unwrap();
            let g = tape.backward().unwrap();
            let nonzero = |ids: &[NodeId]| ids.iter().any(|id| g.get(*id).unwrap().data().iter().any(|v| *v != 0.0));
            assert_eq!(nonzero(&cn.params()), !freeze_classifier);
            assert_eq!(nonzero(&bn.params()), freeze_classifier);
        }
    }

    proptest! {
        #[test]
        fn knn_matches_oracle(seed in any::<u64>(), k in 1usize..8) {
            let scene = generate_scene(&SceneConfig::new(3, 15, 3.0, seed)).unwrap();
            let nn = build_knn(&scene, k).unwrap();
            let oracle = knn_oracle(&scene.points, k);
            for (i, want) in oracle.iter().enumerate() {
                prop_assert_eq!(nn.of(i), want.as_slice());
            }
        }

        #[test]
        fn probs_are_row_stochastic(seed in any::<u64>()) {
            let mut rng = chacha(seed);
            let c = ClassifierParams::init(6, 4, &mut rng);
            let f = BackboneParams::init(6, &mut rng).w1; // any 6-wide matrix
            let p = predict_probs(&c, &f).unwrap();
            for r in 0..p.rows() {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn permuting_points_permutes_features(seed in any::<u64>()) {
            let scene = generate_scene(&SceneConfig::new(3, 12, 3.0, seed)).unwrap();
            let n = scene.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let permuted = Scene::new(
                perm.iter().map(|&i| scene.points[i]).collect(),
                perm.iter().map(|&i| scene.labels[i]).collect(),
                3,
            ).unwrap();
            let mut rng = chacha(seed);
            let b = BackboneParams::init(5, &mut rng);
            let f = extract_features(&b, &scene, &build_knn(&scene, 4).unwrap()).unwrap();
            let g = extract_features(&b, &permuted, &build_knn(&permuted, 4).unwrap()).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for (a, b) in g.row(new).iter().zip(f.row(old)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
