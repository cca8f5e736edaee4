//! End-to-end training behaviour on small scenes.

use tailseg_core::synthdata::{apply_labeling, generate_scene, LabelMask, LabelProtocol, Scene, SceneConfig};
use tailseg_core::trainer::{self, Ablation, LabelSource, Schedule, TrainConfig, Trainer, Warning};

fn small() -> (Scene, LabelMask, TrainConfig) {
    let scene = generate_scene(&SceneConfig::new(4, 160, 6.0, 21)).unwrap();
    let mask = apply_labeling(&scene, LabelProtocol::Percent { fraction: 0.05 }, 22).unwrap();
    let cfg = TrainConfig {
        outer_iterations: 4,
        pretrain_epochs: 8,
        i_epochs: 3,
        ii_epochs: 3,
        hidden: 8,
        neighbors: 6,
        seed: 23,
        ..TrainConfig::default()
    };
    (scene, mask, cfg)
}

#[test]
fn same_seed_same_parameters() {
    let (scene, mask, cfg) = small();
    let a = trainer::run(&scene, &mask, &cfg).unwrap();
    let b = trainer::run(&scene, &mask, &cfg).unwrap();
    assert_eq!(a.state.backbone.to_le_bytes(), b.state.backbone.to_le_bytes());
    assert_eq!(a.state.classifier.to_le_bytes(), b.state.classifier.to_le_bytes());
    assert_eq!(a.records.len(), 4);
    let other = trainer::run(&scene, &mask, &TrainConfig { seed: 24, ..cfg }).unwrap();
    assert_ne!(a.state.backbone.to_le_bytes(), other.state.backbone.to_le_bytes());
}

#[test]
fn each_iteration_generates_pseudo_labels_once() {
    let (scene, mask, cfg) = small();
    let out = trainer::run(&scene, &mask, &cfg).unwrap();
    assert_eq!(out.state.generations, cfg.outer_iterations);
    for (k, r) in out.records.iter().enumerate() {
        assert_eq!(r.iteration, k + 1);
        assert!(r.pseudo.entries().iter().all(|e| !mask.contains(e.index)));
        assert!(r.focus.factors.gamma.iter().all(|&g| (0.0..=cfg.loss.scale).contains(&g)));
    }
}

#[test]
fn joint_schedule_moves_both_parameter_sets_in_one_step() {
    let (scene, mask, mut cfg) = small();
    cfg.ablation.schedule = Schedule::Joint;
    let t = Trainer::new(&scene, &mask, &cfg).unwrap();
    let mut state = t.pretrain().unwrap();
    let (bb, cls) = (state.backbone.to_le_bytes(), state.classifier.to_le_bytes());
    t.step_i(&mut state).unwrap();
    assert_ne!(state.backbone.to_le_bytes(), bb);
    assert_ne!(state.classifier.to_le_bytes(), cls);
}

#[test]
fn every_label_source_trains() {
    let (scene, mask, cfg) = small();
    for source in [LabelSource::Gt, LabelSource::Pseudo, LabelSource::GtPlusPseudo] {
        let cfg = TrainConfig {
            ablation: Ablation {
                label_source: source,
                ..Ablation::default()
            },
            ..cfg.clone()
        };
        let out = trainer::run(&scene, &mask, &cfg).unwrap();
        assert!(out.records.last().unwrap().metrics.miou > 0.0, "{source:?}");
    }
}

#[test]
fn impossible_thresholds_warn_instead_of_failing() {
    let (scene, mask, mut cfg) = small();
    // Nothing can exceed a certain threshold of 0.999... with a tiny window
    // after a single pre-training epoch, and round two is off.
    cfg.pretrain_epochs = 1;
    cfg.selector.floor = 0.999_999;
    cfg.selector.window = 0.0;
    cfg.ablation.two_round = false;
    cfg.outer_iterations = 1;
    let out = trainer::run(&scene, &mask, &cfg).unwrap();
    let r = &out.records[0];
    assert!(r.pseudo.is_empty());
    assert_eq!(r.warnings, vec![Warning::EmptyPseudoSet { iteration: 1 }]);
}

#[test]
fn pseudo_only_fine_tuning_skips_empty_iterations() {
    let (scene, mask, mut cfg) = small();
    cfg.pretrain_epochs = 1;
    cfg.selector.floor = 0.999_999;
    cfg.selector.window = 0.0;
    cfg.ablation.two_round = false;
    cfg.ablation.label_source = LabelSource::Pseudo;
    cfg.outer_iterations = 1;
    let out = trainer::run(&scene, &mask, &cfg).unwrap();
    assert_eq!(
        out.records[0].warnings,
        vec![
            Warning::EmptyPseudoSet { iteration: 1 },
            Warning::ClassifierStepSkipped { iteration: 1 }
        ]
    );
}
