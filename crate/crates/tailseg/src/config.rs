//! Experiment configuration files (TOML) and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tailseg_core::rng::{derive_seed, Stream};
use tailseg_core::synthdata::{LabelProtocol, SceneConfig};
use tailseg_core::trainer::TrainConfig;

/// Environment variable naming the directory that relative outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "TAILSEG_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Synthetic scene. Its `seed` is replaced per run by the scene stream of
    /// the run seed.
    #[serde(default)]
    pub scene: Option<SceneConfig>,
    /// A scene text file to use instead of a synthetic scene. Its labelled
    /// flags define the mask.
    #[serde(default)]
    pub scene_file: Option<PathBuf>,
    #[serde(default = "default_labeling")]
    pub labeling: LabelProtocol,
    /// Training settings; `seed` is replaced by the run seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".to_owned()
}

fn default_labeling() -> LabelProtocol {
    LabelProtocol::Percent { fraction: 0.01 }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    /// The reference setup: six classes, 2000 head points, ratio 50, 1% labels.
    fn default() -> Self {
        Self {
            name: default_name(),
            scene: Some(SceneConfig::new(6, 2000, 50.0, 0)),
            scene_file: None,
            labeling: default_labeling(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file, applies `overrides` (`dotted.key=value`) and
    /// validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg = Self::from_toml(&text, overrides).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(file) = &cfg.scene_file {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.scene_file = Some(base.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.scene, &self.scene_file) {
            (Some(_), Some(_)) => bail!("set either `scene` or `scene_file`, not both"),
            (None, None) => bail!("one of `scene` or `scene_file` is required"),
            (Some(scene), None) => {
                scene.validate().context("scene")?;
                if matches!(self.labeling, LabelProtocol::Explicit) {
                    bail!("labeling: explicit masks need `scene_file`");
                }
            }
            (None, Some(_)) => {}
        }
        if let LabelProtocol::Percent { fraction } = self.labeling {
            if !(fraction > 0.0 && fraction <= 1.0) {
                bail!("labeling.fraction: must lie in (0, 1]");
            }
        }
        self.train.validate().context("train")?;
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        Ok(())
    }

    /// Training settings for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Synthetic scene settings for one seed.
    pub fn scene_for(&self, seed: u64) -> Option<SceneConfig> {
        self.scene.clone().map(|s| SceneConfig {
            seed: derive_seed(seed, Stream::Scene),
            ..s
        })
    }

    pub fn label_seed(seed: u64) -> u64 {
        derive_seed(seed, Stream::Labeling)
    }

    /// Where runs go: `explicit`, else `output`, else the config name; a
    /// relative result is placed under `$TAILSEG_OUTPUT_ROOT` (default `runs`).
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        let rel = self.output.clone().unwrap_or_else(|| PathBuf::from(&self.name));
        if rel.is_absolute() {
            return rel;
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(rel)
    }

    /// SHA-256 of the canonical JSON form of the config resolved for `seed`.
    pub fn hash_for(&self, seed: u64) -> [u8; 32] {
        let resolved = Self {
            seeds: vec![seed],
            train: self.train_for(seed),
            ..self.clone()
        };
        let json = serde_json::to_vec(&resolved).expect("config serialises");
        Sha256::digest(&json).into()
    }
}

/// Sets `dotted.key` in `table`. The value is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, arg: &str) -> anyhow::Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{arg}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{arg}` has an empty key");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{arg}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}
