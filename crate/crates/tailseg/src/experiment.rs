//! One training run per seed, with every artifact written to a run directory:
//!
//! ```text
//! <dir>/metrics.csv
//! <dir>/pseudo_labels.csv
//! <dir>/focusing.csv
//! <dir>/checkpoints/iter-000.ckpt ...
//! <dir>/manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tailseg_core::metrics::MetricsReport;
use tailseg_core::synthdata::{apply_labeling, generate_scene, LabelMask, Scene};
use tailseg_core::trainer::{Trainer, Warning};

use crate::artifacts::{self, CsvSink, FOCUS_HEADER, METRICS_HEADER, PSEUDO_HEADER};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::scene_io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PSEUDO_FILE: &str = "pseudo_labels.csv";
pub const FOCUS_FILE: &str = "focusing.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub iteration: usize,
    pub miou: f64,
    pub oa: f64,
    pub metrics: String,
    pub checkpoint: String,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tag: String,
    pub seed: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    pub pretrain_checkpoint: Option<String>,
    pub iterations: Vec<IterationEntry>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub tag: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub iterations: usize,
    pub metrics: MetricsReport,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The scene and labelled mask a config describes for `seed`.
pub fn load_scene(config: &ExperimentConfig, seed: u64) -> anyhow::Result<(Scene, LabelMask)> {
    if let Some(path) = &config.scene_file {
        return scene_io::read(path);
    }
    let scene_cfg = config.scene_for(seed).context("config has no scene")?;
    let scene = generate_scene(&scene_cfg)?;
    let mask = apply_labeling(&scene, config.labeling, ExperimentConfig::label_seed(seed))?;
    Ok((scene, mask))
}

/// Trains one seed and writes its artifacts to `dir`. On failure the
/// manifest still records what was written and why the run stopped.
pub fn run_seed(config: &ExperimentConfig, tag: &str, seed: u64, dir: &Path) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("cannot create {}", dir.display()))?;
    let hash = config.hash_for(seed);
    let mut manifest = RunManifest {
        tag: tag.to_owned(),
        seed,
        status: RunStatus::Completed,
        failure: None,
        config: ExperimentConfig {
            seeds: vec![seed],
            train: config.train_for(seed),
            ..config.clone()
        },
        config_hash: hex(&hash),
        wall_clock_seconds: 0.0,
        pretrain_checkpoint: None,
        iterations: Vec::new(),
        files: Vec::new(),
    };
    let outcome = train_and_record(config, tag, seed, dir, hash, &mut manifest);
    if let Err(e) = &outcome {
        manifest.status = RunStatus::Failed;
        manifest.failure = Some(format!("{e:#}"));
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.files = hash_files(dir)?;
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    artifacts::write_text(&dir.join(MANIFEST_FILE), &json)?;
    let metrics = outcome?;
    Ok(RunSummary {
        tag: tag.to_owned(),
        seed,
        dir: dir.to_path_buf(),
        iterations: manifest.iterations.len(),
        metrics,
    })
}

fn train_and_record(
    config: &ExperimentConfig,
    tag: &str,
    seed: u64,
    dir: &Path,
    hash: [u8; 32],
    manifest: &mut RunManifest,
) -> anyhow::Result<MetricsReport> {
    let mut metrics_csv = CsvSink::create(&dir.join(METRICS_FILE), &METRICS_HEADER)?;
    let mut pseudo_csv = CsvSink::create(&dir.join(PSEUDO_FILE), &PSEUDO_HEADER)?;
    let mut focus_csv = CsvSink::create(&dir.join(FOCUS_FILE), &FOCUS_HEADER)?;
    let (scene, mask) = load_scene(config, seed)?;
    let train = config.train_for(seed);
    let trainer = Trainer::new(&scene, &mask, &train)?;
    let checkpoint = |state: &_, iteration: usize| -> anyhow::Result<String> {
        let rel = format!("checkpoints/iter-{iteration:03}.ckpt");
        Checkpoint::from_state(state, train.neighbors, hash).save(&dir.join(&rel))?;
        Ok(rel)
    };
    let mut state = trainer.pretrain()?;
    manifest.pretrain_checkpoint = Some(checkpoint(&state, 0)?);
    let mut last = None;
    while state.iteration < train.outer_iterations {
        let record = trainer.iterate(&mut state)?;
        metrics_csv.write_rows(&artifacts::metric_rows(tag, seed, record.iteration, &record.metrics))?;
        pseudo_csv.write_rows(&artifacts::pseudo_rows(&record))?;
        focus_csv.write_rows(&artifacts::focus_rows(record.iteration, &record.focus))?;
        manifest.iterations.push(IterationEntry {
            iteration: record.iteration,
            miou: record.metrics.miou,
            oa: record.metrics.oa,
            metrics: METRICS_FILE.to_owned(),
            checkpoint: checkpoint(&state, record.iteration)?,
            warnings: record.warnings.clone(),
        });
        last = Some(record.metrics);
    }
    metrics_csv.finish()?;
    pseudo_csv.finish()?;
    focus_csv.finish()?;
    match last {
        Some(m) => Ok(m),
        None => Ok(trainer.evaluate(&state)?),
    }
}

/// Every regular file under `dir` except the manifest, sorted by path.
fn hash_files(dir: &Path) -> anyhow::Result<Vec<FileEntry>> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                paths.push(p);
            }
        }
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(&p)?;
        let rel = p.strip_prefix(dir).expect("under dir");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.push(FileEntry {
            path: rel,
            sha256: hex(&Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
