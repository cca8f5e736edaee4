//! The `tailseg` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::ablate;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::experiment::{self, RunManifest, RunSummary};
use crate::scene_io;

#[derive(Debug, Parser)]
#[command(name = "tailseg", version, about = "Semi-supervised long-tail point segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed of a config (or replay a run manifest).
    Run(RunArgs),
    /// Run an ablation matrix and print mean ± std per row.
    Ablate(AblateArgs),
    /// Summarise a checkpoint.
    Inspect {
        checkpoint: PathBuf,
    },
    /// Write the scene and labelled mask of a config to a text file.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config, or a `manifest.json` from an earlier run.
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.selector.beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replace the config's seed list; repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory (default: the config's, under $TAILSEG_OUTPUT_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// TOML file with `[[row]]` tables of ablation switches.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub matrix: Option<PathBuf>,
    /// Built-in matrix: components, label-sources or decouple.
    #[arg(long)]
    pub preset: Option<String>,
    /// Runs in flight at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination text file.
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Runtime,
    Usage,
}

impl FailureKind {
    pub fn code(self) -> u8 {
        match self {
            FailureKind::Runtime => 1,
            FailureKind::Usage => 2,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> Classify<T> for anyhow::Result<T> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|error| Failure {
            kind: FailureKind::Usage,
            error,
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|error| Failure {
            kind: FailureKind::Runtime,
            error,
        })
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => cmd_run(&args.common),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::GenData(args) => cmd_gen_data(&args),
    }
}

/// Loads a TOML config or the resolved config stored in a run manifest.
pub fn load_config(path: &Path, overrides: &[String], seeds: &[u64]) -> anyhow::Result<ExperimentConfig> {
    if !path.is_file() {
        bail!("config file {} does not exist", path.display());
    }
    let mut cfg = if path.extension().is_some_and(|e| e == "json") {
        let manifest = RunManifest::load(path)?;
        let text = toml::to_string(&manifest.config).context("manifest config")?;
        ExperimentConfig::from_toml(&text, overrides).with_context(|| format!("invalid config in {}", path.display()))?
    } else {
        ExperimentConfig::load(path, overrides)?
    };
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{:.1}", 100.0 * x));
    println!(
        "{} seed {}: mIoU {:.1}  OA {:.1}  head {}  waist {}  tail {}  ({} iterations, {})",
        s.tag,
        s.seed,
        100.0 * s.metrics.miou,
        100.0 * s.metrics.oa,
        pct(s.metrics.head),
        pct(s.metrics.waist),
        pct(s.metrics.tail),
        s.iterations,
        s.dir.display()
    );
}

fn cmd_run(args: &Common) -> Result<(), Failure> {
    let cfg = load_config(&args.config, &args.overrides, &args.seeds).usage()?;
    let out = cfg.output_dir(args.out.as_deref());
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let summary = experiment::run_seed(&cfg, &cfg.name, seed, &dir)
            .with_context(|| format!("seed {seed} failed; partial artifacts in {}", dir.display()))
            .runtime()?;
        print_summary(&summary);
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Failure> {
    let c = &args.common;
    let cfg = load_config(&c.config, &c.overrides, &c.seeds).usage()?;
    let rows = match (&args.matrix, &args.preset) {
        (Some(path), _) => std::fs::read_to_string(path)
            .with_context(|| format!("cannot read matrix file {}", path.display()))
            .and_then(|t| ablate::parse_matrix(&t).with_context(|| format!("invalid matrix {}", path.display()))),
        (None, Some(name)) => ablate::preset(name),
        (None, None) => unreachable!("clap requires one of --matrix or --preset"),
    }
    .usage()?;
    ablate::check_rows(&rows).usage()?;
    let out = cfg.output_dir(c.out.as_deref());
    let summaries = ablate::run_matrix(&cfg, &rows, &out, args.jobs).runtime()?;
    for r in &summaries {
        for s in &r.runs {
            print_summary(s);
        }
    }
    print!("{}", ablate::format_table(&summaries));
    println!("summary: {}", out.join(ablate::SUMMARY_FILE).display());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(anyhow::anyhow!("checkpoint {} does not exist", path.display())).usage();
    }
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("cannot load {}", path.display()))
        .runtime()?;
    print!("{}", ckpt.describe());
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, &args.overrides, &[]).usage()?;
    let (scene, mask) = experiment::load_scene(&cfg, args.seed).runtime()?;
    scene_io::write(&args.output, &scene, &mask).runtime()?;
    println!(
        "wrote {} points, {} labelled, {} classes to {}",
        scene.len(),
        mask.len(),
        scene.classes(),
        args.output.display()
    );
    Ok(())
}
