//! Pre-training followed by alternating backbone (I) and classifier (II) steps.
//!
//! A run is single-threaded and fully determined by its config and seed. All
//! randomness after the scene and mask (parameter init, minibatch order)
//! comes from the `Training` stream and lives in [`RunState::rng`].

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::loss::{
    feature_loss_graph, focusing_factors, gradient_split, seg_ce_graph, FocusingFactors, GradRatioTracker,
    LossConfig,
};
use crate::math;
use crate::metrics::{confusion, iou_report, ClassGroups, MetricsReport, UndefinedIou};
use crate::model::{
    augmented_inputs, backbone_graph, build_knn, classifier_graph, features_from_inputs, predict_classes,
    predict_probs, BackboneParams, ClassifierParams,
};
use crate::pseudolabel::{generate, PseudoLabelSet, SelectorConfig};
use crate::rng::{chacha, derive_seed, Stream};
use crate::synthdata::{ratios_from_counts, LabelMask, Scene};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("adam.lr", "must be finite and > 0"));
        }
        for (name, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid("adam.eps", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// How the backbone and classifier are optimised after pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// I-step on `θ_b` with `θ_cls` frozen, then II-step on `θ_cls` with `θ_b` frozen.
    #[default]
    Decoupled,
    /// Both parameter sets updated together on the I-step loss; no II-step.
    Joint,
}

/// Labels that feed the classifier fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    #[default]
    Gt,
    Pseudo,
    GtPlusPseudo,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Gt => "gt",
            LabelSource::Pseudo => "pseudo",
            LabelSource::GtPlusPseudo => "gt-plus-pseudo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Uncertain-threshold expansion for tail classes.
    #[serde(default = "yes")]
    pub two_round: bool,
    /// Imbalanced focal term on pseudo labels.
    #[serde(default = "yes")]
    pub mi_fl: bool,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub label_source: LabelSource,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            two_round: true,
            mi_fl: true,
            schedule: Schedule::Decoupled,
            label_source: LabelSource::Gt,
        }
    }
}

impl Ablation {
    /// Certain threshold only, plain cross-entropy on pseudo labels.
    pub fn baseline() -> Self {
        Self {
            two_round: false,
            mi_fl: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule == Schedule::Joint && self.label_source != LabelSource::Gt {
            return Err(Error::invalid(
                "label_source",
                "joint training has no classifier fine-tuning step to feed",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_outer")]
    pub outer_iterations: usize,
    #[serde(default = "default_i_epochs")]
    pub i_epochs: usize,
    #[serde(default = "default_ii_epochs")]
    pub ii_epochs: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    /// Pre-training optimiser.
    #[serde(default)]
    pub adam: AdamConfig,
    /// Starting learning rate of every I- and II-step.
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    /// Per-epoch multiplier of `inner_lr`, restarted at each step.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    /// Minibatches per epoch.
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub undefined_iou: UndefinedIou,
    #[serde(default)]
    pub seed: u64,
}

fn default_outer() -> usize {
    10
}
fn default_i_epochs() -> usize {
    30
}
fn default_ii_epochs() -> usize {
    100
}
fn default_pretrain_epochs() -> usize {
    100
}
fn default_inner_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.98
}
fn default_batches() -> usize {
    8
}
fn default_hidden() -> usize {
    32
}
fn default_neighbors() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: default_outer(),
            i_epochs: default_i_epochs(),
            ii_epochs: default_ii_epochs(),
            pretrain_epochs: default_pretrain_epochs(),
            adam: AdamConfig::default(),
            inner_lr: default_inner_lr(),
            lr_decay: default_decay(),
            batches: default_batches(),
            hidden: default_hidden(),
            neighbors: default_neighbors(),
            selector: SelectorConfig::default(),
            loss: LossConfig::default(),
            ablation: Ablation::default(),
            undefined_iou: UndefinedIou::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::invalid("inner_lr", "must be finite and > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay", "must lie in (0, 1]"));
        }
        if self.batches == 0 {
            return Err(Error::invalid("batches", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if self.neighbors == 0 {
            return Err(Error::invalid("neighbors", "must be positive"));
        }
        self.selector.validate()?;
        self.loss.validate()?;
        self.ablation.validate()
    }
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    /// Steps taken since the last reset.
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params
            .into_iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        for t in self.first.iter_mut().chain(self.second.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
    }

    /// One bias-corrected Adam update of `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::invalid("optimizer", "parameter count differs from moment count"));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - math::powf(cfg.beta1, t);
        let c2 = 1.0 - math::powf(cfg.beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.shape() != p.shape() || self.first[i].shape() != p.shape() {
                return Err(Error::invalid("optimizer", "gradient shape differs from parameter"));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                *w -= lr * (m[k] / c1) / (math::sqrt(v[k] / c2) + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub backbone: BackboneParams,
    pub classifier: ClassifierParams,
    pub backbone_opt: OptimizerState,
    pub classifier_opt: OptimizerState,
    /// Completed outer iterations.
    pub iteration: usize,
    pub pseudo: PseudoLabelSet,
    pub tracker: GradRatioTracker,
    pub rng: ChaCha8Rng,
    /// Pseudo-label generations performed so far.
    pub generations: usize,
}

impl RunState {
    /// Fresh parameters drawn from the training stream of `seed`.
    pub fn init(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = chacha(derive_seed(seed, Stream::Training));
        let backbone = BackboneParams::init(hidden, &mut rng);
        let classifier = ClassifierParams::init(hidden, classes, &mut rng);
        Self {
            backbone_opt: OptimizerState::new(backbone.tensors()),
            classifier_opt: OptimizerState::new(classifier.tensors()),
            backbone,
            classifier,
            iteration: 0,
            pseudo: PseudoLabelSet::default(),
            tracker: GradRatioTracker::new(classes),
            rng,
            generations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Warning {
    /// No unlabelled point passed a threshold; the step used cross-entropy only.
    EmptyPseudoSet { iteration: usize },
    /// The classifier fine-tunes on pseudo labels only and there were none,
    /// so the II-step was skipped.
    ClassifierStepSkipped { iteration: usize },
}

/// `g^c` and the focusing factors at the end of an I-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusSnapshot {
    pub g: Vec<f64>,
    pub factors: FocusingFactors,
}

/// What one outer iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub metrics: MetricsReport,
    pub pseudo: PseudoLabelSet,
    pub focus: FocusSnapshot,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub records: Vec<IterationRecord>,
}

/// Result of an I-step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepIReport {
    pub focus: FocusSnapshot,
    pub warnings: Vec<Warning>,
}

/// The II-step label source selected by a config.
pub fn classifier_label_mode(config: &TrainConfig) -> LabelSource {
    config.ablation.label_source
}

/// `(point, class)` pairs that feed the classifier fine-tuning. Pseudo labels
/// only cover unlabelled points, so the union is disjoint.
pub fn classifier_targets(
    scene: &Scene,
    mask: &LabelMask,
    pseudo: &PseudoLabelSet,
    source: LabelSource,
) -> Result<Vec<(usize, usize)>> {
    let mut targets = match source {
        LabelSource::Gt => mask.targets(scene),
        LabelSource::Pseudo => {
            if pseudo.is_empty() {
                return Err(Error::EmptySet {
                    what: "pseudo-label set",
                });
            }
            pseudo.targets()
        }
        LabelSource::GtPlusPseudo => {
            let mut t = mask.targets(scene);
            t.extend(pseudo.targets());
            t
        }
    };
    if targets.is_empty() {
        return Err(Error::EmptySet { what: "label set" });
    }
    targets.sort_unstable();
    Ok(targets)
}

/// Scene-level data shared by every step of a run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    scene: &'a Scene,
    mask: &'a LabelMask,
    config: TrainConfig,
    inputs: Tensor,
    ratios: Vec<f64>,
    groups: ClassGroups,
    unlabeled: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a Scene, mask: &'a LabelMask, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if mask.is_empty() {
            return Err(Error::EmptySet { what: "labelled set" });
        }
        if let Some(&i) = mask.indices.iter().find(|&&i| i >= scene.len()) {
            return Err(Error::OutOfRange {
                what: "labelled index",
                value: i,
                bound: scene.len(),
            });
        }
        let ratios = ratios_from_counts(&mask.labeled_counts(scene))?;
        let nn = build_knn(scene, config.neighbors)?;
        Ok(Self {
            inputs: augmented_inputs(scene, &nn)?,
            ratios,
            groups: ClassGroups::terciles(&scene.class_counts),
            unlabeled: mask.unlabeled(scene),
            config: config.clone(),
            scene,
            mask,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// `ρ_c` of the labelled set.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn groups(&self) -> &ClassGroups {
        &self.groups
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Initialises the parameters and trains both on the labelled points.
    pub fn pretrain(&self) -> Result<RunState> {
        let mut state = RunState::init(self.config.hidden, self.scene.classes(), self.config.seed);
        let targets = self.mask.targets(self.scene);
        for _ in 0..self.config.pretrain_epochs {
            for batch in self.epoch_batches(&targets, &mut state.rng) {
                self.update(&mut state, &batch, None, true, self.config.adam.lr)?;
            }
        }
        state.backbone_opt.reset();
        state.classifier_opt.reset();
        Ok(state)
    }

    /// Class probabilities of every point under the current parameters.
    pub fn probabilities(&self, state: &RunState) -> Result<Tensor> {
        let features = features_from_inputs(&state.backbone, &self.inputs)?;
        predict_probs(&state.classifier, &features)
    }

    /// Regenerates the pseudo labels, then trains the backbone (and the
    /// classifier under the joint schedule) on ground truth plus pseudo labels.
    pub fn step_i(&self, state: &mut RunState) -> Result<StepIReport> {
        let cfg = &self.config;
        let probs = self.probabilities(state)?;
        let selection = generate(
            &probs,
            &self.unlabeled,
            &self.ratios,
            &cfg.selector,
            cfg.ablation.two_round,
        )?;
        state.pseudo = selection.labels;
        state.generations += 1;
        state.tracker.reset();
        let mut warnings = Vec::new();
        if state.pseudo.is_empty() {
            warnings.push(Warning::EmptyPseudoSet {
                iteration: state.iteration + 1,
            });
        }
        let joint = cfg.ablation.schedule == Schedule::Joint;
        let mut classes = vec![usize::MAX; self.scene.len()];
        let mut pseudo_rows = vec![false; self.scene.len()];
        for (i, c) in self.mask.targets(self.scene) {
            classes[i] = c;
        }
        for e in state.pseudo.entries() {
            classes[e.index] = e.class;
            pseudo_rows[e.index] = cfg.ablation.mi_fl;
        }
        let targets: Vec<(usize, usize)> = classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != usize::MAX)
            .map(|(i, &c)| (i, c))
            .collect();
        let mut lr = cfg.inner_lr;
        for _ in 0..cfg.i_epochs {
            for batch in self.epoch_batches(&targets, &mut state.rng) {
                let gammas = focusing_factors(&state.tracker, &self.ratios, cfg.loss.scale)?.gamma;
                let focal: Vec<(usize, usize)> = batch
                    .iter()
                    .enumerate()
                    .filter(|(_, (i, _))| pseudo_rows[*i])
                    .map(|(local, &(_, c))| (local, c))
                    .collect();
                self.update(state, &batch, Some((&focal, &gammas)), joint, lr)?;
            }
            lr *= cfg.lr_decay;
        }
        state.backbone_opt.reset();
        state.classifier_opt.reset();
        Ok(StepIReport {
            focus: FocusSnapshot {
                g: state.tracker.ratios(),
                factors: focusing_factors(&state.tracker, &self.ratios, cfg.loss.scale)?,
            },
            warnings,
        })
    }

    /// Fine-tunes the classifier with cross-entropy on the configured label
    /// source; the backbone only supplies fixed features.
    pub fn step_ii(&self, state: &mut RunState) -> Result<()> {
        let cfg = &self.config;
        let targets = classifier_targets(self.scene, self.mask, &state.pseudo, cfg.ablation.label_source)?;
        if cfg.ii_epochs == 0 {
            return Ok(());
        }
        let features = features_from_inputs(&state.backbone, &self.inputs)?;
        let mut lr = cfg.inner_lr;
        for _ in 0..cfg.ii_epochs {
            for batch in self.epoch_batches(&targets, &mut state.rng) {
                let rows: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
                let local: Vec<(usize, usize)> = batch.iter().enumerate().map(|(k, &(_, c))| (k, c)).collect();
                let mut tape = Tape::new();
                let x = tape.constant(features.select_rows(&rows))?;
                let head = classifier_graph(&mut tape, &state.classifier, x, true)?;
                let loss = seg_ce_graph(&mut tape, head.logits, &local)?;
                let grads = tape.backward_from(loss)?;
                let g = collect_grads(&grads_of(&grads, &head.params()), &state.classifier.tensors())?;
                let grefs: Vec<&Tensor> = g.iter().collect();
                let mut params = state.classifier.tensors_mut();
                state.classifier_opt.step(&mut params, &grefs, lr, &cfg.adam)?;
            }
            lr *= cfg.lr_decay;
        }
        state.classifier_opt.reset();
        Ok(())
    }

    /// Segmentation metrics over every point of the scene.
    pub fn evaluate(&self, state: &RunState) -> Result<MetricsReport> {
        let predicted = predict_classes(&self.probabilities(state)?);
        let cm = confusion(&predicted, &self.scene.labels, self.scene.classes())?;
        Ok(iou_report(&cm, &self.groups, self.config.undefined_iou))
    }

    /// One outer iteration: I-step, then II-step unless training jointly.
    pub fn iterate(&self, state: &mut RunState) -> Result<IterationRecord> {
        if state.iteration >= self.config.outer_iterations {
            return Err(Error::OutOfRange {
                what: "iteration",
                value: state.iteration + 1,
                bound: self.config.outer_iterations + 1,
            });
        }
        let mut report = self.step_i(state)?;
        if self.config.ablation.schedule == Schedule::Decoupled {
            if self.config.ablation.label_source == LabelSource::Pseudo && state.pseudo.is_empty() {
                report.warnings.push(Warning::ClassifierStepSkipped {
                    iteration: state.iteration + 1,
                });
            } else {
                self.step_ii(state)?;
            }
        }
        state.iteration += 1;
        Ok(IterationRecord {
            iteration: state.iteration,
            metrics: self.evaluate(state)?,
            pseudo: state.pseudo.clone(),
            focus: report.focus,
            warnings: report.warnings,
        })
    }

    /// Pre-training followed by every outer iteration. `observer` sees each
    /// record together with the state it was measured on.
    pub fn run<E, F>(&self, mut observer: F) -> core::result::Result<RunOutcome, E>
    where
        E: From<Error>,
        F: FnMut(&IterationRecord, &RunState) -> core::result::Result<(), E>,
    {
        let mut state = self.pretrain()?;
        let mut records = Vec::with_capacity(self.config.outer_iterations);
        while state.iteration < self.config.outer_iterations {
            let record = self.iterate(&mut state)?;
            observer(&record, &state)?;
            records.push(record);
        }
        Ok(RunOutcome { state, records })
    }

    /// Seeded permutation of `targets` cut into at most `batches` contiguous,
    /// near-equal, nonempty minibatches.
    fn epoch_batches(&self, targets: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
        let mut order = targets.to_vec();
        order.shuffle(rng);
        let n = order.len();
        let b = self.config.batches.min(n);
        (0..b)
            .map(|k| order[k * n / b..(k + 1) * n / b].to_vec())
            .collect()
    }

    /// One optimiser step of the backbone (and the classifier when
    /// `train_classifier`) on a minibatch. `focal` carries the batch-local
    /// pseudo targets and focusing factors; without it the loss is plain
    /// cross-entropy.
    fn update(
        &self,
        state: &mut RunState,
        batch: &[(usize, usize)],
        focal: Option<(&[(usize, usize)], &[f64])>,
        train_classifier: bool,
        lr: f64,
    ) -> Result<()> {
        let rows: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
        let local: Vec<(usize, usize)> = batch.iter().enumerate().map(|(k, &(_, c))| (k, c)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(self.inputs.select_rows(&rows))?;
        let body = backbone_graph(&mut tape, &state.backbone, x, true)?;
        let head = classifier_graph(&mut tape, &state.classifier, body.features, train_classifier)?;
        let loss = match focal {
            Some((pseudo, gammas)) => {
                feature_loss_graph(&mut tape, head.logits, &local, pseudo, &self.config.loss, gammas)?
            }
            None => seg_ce_graph(&mut tape, head.logits, &local)?,
        };
        let (grads, taps) = tape.backward_with_taps(loss, &[head.logits])?;
        if focal.is_some() {
            let (pos, neg) = gradient_split(&taps[0], &local);
            state.tracker.update(&pos, &neg)?;
        }
        let g = collect_grads(&grads_of(&grads, &body.params()), &state.backbone.tensors())?;
        let grefs: Vec<&Tensor> = g.iter().collect();
        let mut params = state.backbone.tensors_mut();
        state.backbone_opt.step(&mut params, &grefs, lr, &self.config.adam)?;
        if train_classifier {
            let g = collect_grads(&grads_of(&grads, &head.params()), &state.classifier.tensors())?;
            let grefs: Vec<&Tensor> = g.iter().collect();
            let mut params = state.classifier.tensors_mut();
            state.classifier_opt.step(&mut params, &grefs, lr, &self.config.adam)?;
        }
        Ok(())
    }
}

fn grads_of<'g>(grads: &'g crate::autodiff::GradientSet, ids: &[NodeId]) -> Vec<Option<&'g Tensor>> {
    ids.iter().map(|&id| grads.get(id)).collect()
}

/// Missing gradients become zeros of the parameter's shape.
fn collect_grads(found: &[Option<&Tensor>], params: &[&Tensor]) -> Result<Vec<Tensor>> {
    found
        .iter()
        .zip(params)
        .map(|(g, p)| match g {
            Some(g) if g.shape() == p.shape() => Ok((*g).clone()),
            Some(_) => Err(Error::Internal("gradient shape differs from parameter")),
            None => Ok(Tensor::zeros(p.rows(), p.cols())),
        })
        .collect()
}

/// Pre-trained state for `scene` and `mask`.
pub fn pretrain(scene: &Scene, mask: &LabelMask, config: &TrainConfig) -> Result<RunState> {
    Trainer::new(scene, mask, config)?.pretrain()
}

pub fn step_i(state: &mut RunState, scene: &Scene, mask: &LabelMask, config: &TrainConfig) -> Result<StepIReport> {
    Trainer::new(scene, mask, config)?.step_i(state)
}

pub fn step_ii(state: &mut RunState, scene: &Scene, mask: &LabelMask, config: &TrainConfig) -> Result<()> {
    Trainer::new(scene, mask, config)?.step_ii(state)
}

/// Full run without an observer.
pub fn run(scene: &Scene, mask: &LabelMask, config: &TrainConfig) -> Result<RunOutcome> {
    Trainer::new(scene, mask, config)?.run(|_, _| Ok::<(), Error>(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{apply_labeling, generate_scene, LabelProtocol, SceneConfig};

    fn small() -> (Scene, LabelMask, TrainConfig) {
        let scene = generate_scene(&SceneConfig::new(3, 60, 4.0, 5)).unwrap();
        let mask = apply_labeling(&scene, LabelProtocol::Percent { fraction: 0.1 }, 9).unwrap();
        let cfg = TrainConfig {
            outer_iterations: 2,
            i_epochs: 2,
            ii_epochs: 3,
            pretrain_epochs: 5,
            hidden: 8,
            neighbors: 4,
            ..TrainConfig::default()
        };
        (scene, mask, cfg)
    }

    #[test]
    fn adam_matches_closed_form() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(1.5);
        let g = Tensor::scalar(0.2);
        let mut opt = OptimizerState::new([&p]);
        opt.step(&mut [&mut p], &[&g], 0.1, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the first step moves by lr·g/(|g| + ε).
        let expected = 1.5 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((p.as_scalar().unwrap() - expected).abs() < 1e-15);
        let g2 = Tensor::scalar(-0.4);
        opt.step(&mut [&mut p], &[&g2], 0.1, &cfg).unwrap();
        let m = 0.9 * 0.1 * 0.2 + 0.1 * -0.4;
        let v = 0.999 * 0.001 * 0.04 + 0.001 * 0.16;
        let step = 0.1 * (m / (1.0 - 0.81)) / (libm::sqrt(v / (1.0 - 0.999 * 0.999)) + 1e-8);
        assert!((p.as_scalar().unwrap() - (expected - step)).abs() < 1e-14);
        assert!(opt.second[0].data()[0] >= 0.0);
    }

    #[test]
    fn zero_pretrain_epochs_keep_init() {
        let (scene, mask, mut cfg) = small();
        cfg.pretrain_epochs = 0;
        let s = pretrain(&scene, &mask, &cfg).unwrap();
        let init = RunState::init(cfg.hidden, 3, cfg.seed);
        assert_eq!(s.backbone, init.backbone);
        assert_eq!(s.classifier, init.classifier);
    }

    #[test]
    fn freeze_contracts_hold() {
        let (scene, mask, cfg) = small();
        let t = Trainer::new(&scene, &mask, &cfg).unwrap();
        let mut s = t.pretrain().unwrap();
        let cls = s.classifier.to_le_bytes();
        t.step_i(&mut s).unwrap();
        assert_eq!(s.classifier.to_le_bytes(), cls);
        let bb = s.backbone.to_le_bytes();
        t.step_ii(&mut s).unwrap();
        assert_eq!(s.backbone.to_le_bytes(), bb);
        assert_eq!(s.generations, 1);
    }

    #[test]
    fn zero_epoch_steps() {
        let (scene, mask, mut cfg) = small();
        cfg.i_epochs = 0;
        cfg.ii_epochs = 0;
        let t = Trainer::new(&scene, &mask, &cfg).unwrap();
        let mut s = t.pretrain().unwrap();
        let before = (s.backbone.clone(), s.classifier.clone());
        t.step_i(&mut s).unwrap();
        t.step_ii(&mut s).unwrap();
        assert_eq!((s.backbone, s.classifier), before);
        assert_eq!(s.generations, 1);
    }

    #[test]
    fn run_is_deterministic_with_one_generation_per_iteration() {
        let (scene, mask, cfg) = small();
        let a = run(&scene, &mask, &cfg).unwrap();
        let b = run(&scene, &mask, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.state.generations, 2);
        let mut zero = cfg.clone();
        zero.outer_iterations = 0;
        let z = run(&scene, &mask, &zero).unwrap();
        assert_eq!(z.state, pretrain(&scene, &mask, &cfg).unwrap());
        assert!(z.records.is_empty());
    }

    #[test]
    fn label_sources() {
        let (scene, mask, _) = small();
        let pseudo = PseudoLabelSet::default();
        assert!(classifier_targets(&scene, &mask, &pseudo, LabelSource::Pseudo).is_err());
        let gt = classifier_targets(&scene, &mask, &pseudo, LabelSource::Gt).unwrap();
        assert!(gt.iter().all(|(i, _)| mask.contains(*i)));
        let mut joint = Ablation {
            schedule: Schedule::Joint,
            label_source: LabelSource::Pseudo,
            ..Ablation::default()
        };
        assert!(joint.validate().is_err());
        joint.label_source = LabelSource::Gt;
        assert!(joint.validate().is_ok());
    }

    #[test]
    fn rejects_empty_mask() {
        let (scene, _, cfg) = small();
        let empty = LabelMask::explicit(Vec::new(), &scene).unwrap();
        assert!(matches!(pretrain(&scene, &empty, &cfg), Err(Error::EmptySet { .. })));
    }
}
