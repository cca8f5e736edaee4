//! Ablation matrices: every row times every seed, run in parallel, with a
//! mean/std summary per row.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use serde::Deserialize;
use tailseg_core::metrics::Group;
use tailseg_core::trainer::{Ablation, LabelSource, Schedule};

use crate::artifacts;
use crate::config::ExperimentConfig;
use crate::experiment::{run_seed, RunSummary};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 6] = ["row", "metric", "mean", "std", "n", "seeds"];
pub const PRESETS: [&str; 3] = ["components", "label-sources", "decouple"];

/// Row names: `baseline` and `ours` for the two reference settings,
/// otherwise the switches spelled out, e.g. `cer-uncer-mifl-joint-gt`.
pub fn row_name(a: &Ablation) -> String {
    let reference = a.schedule == Schedule::Decoupled && a.label_source == LabelSource::Gt;
    match (a.two_round, a.mi_fl) {
        (false, false) if reference => return "baseline".into(),
        (true, true) if reference => return "ours".into(),
        _ => {}
    }
    let selector = if a.two_round { "cer-uncer" } else { "cer" };
    let loss = if a.mi_fl { "mifl" } else { "seg" };
    let schedule = match a.schedule {
        Schedule::Decoupled => "decoupled",
        Schedule::Joint => "joint",
    };
    format!("{selector}-{loss}-{schedule}-{}", a.label_source.as_str())
}

fn row(two_round: bool, mi_fl: bool, schedule: Schedule, label_source: LabelSource) -> Ablation {
    Ablation {
        two_round,
        mi_fl,
        schedule,
        label_source,
    }
}

/// Built-in matrices.
pub fn preset(name: &str) -> anyhow::Result<Vec<Ablation>> {
    use LabelSource::*;
    use Schedule::*;
    Ok(match name {
        // Component study: selector and loss switches, then the schedule.
        "components" => vec![
            row(false, false, Decoupled, Gt),
            row(false, true, Decoupled, Gt),
            row(true, false, Decoupled, Gt),
            row(true, true, Decoupled, Gt),
            row(true, true, Joint, Gt),
            row(true, true, Decoupled, GtPlusPseudo),
        ],
        // Classifier fine-tuning labels.
        "label-sources" => vec![
            row(true, true, Decoupled, Gt),
            row(true, true, Decoupled, Pseudo),
            row(true, true, Decoupled, GtPlusPseudo),
        ],
        "decouple" => vec![row(true, true, Joint, Gt), row(true, true, Decoupled, GtPlusPseudo)],
        other => bail!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    row: Vec<Ablation>,
}

/// Parses a matrix file: a list of `[[row]]` tables with ablation switches.
pub fn parse_matrix(text: &str) -> anyhow::Result<Vec<Ablation>> {
    let file: MatrixFile = toml::from_str(text)?;
    check_rows(&file.row)?;
    Ok(file.row)
}

pub fn check_rows(rows: &[Ablation]) -> anyhow::Result<()> {
    if rows.is_empty() {
        bail!("ablation matrix has no rows");
    }
    let mut seen = BTreeSet::new();
    for (i, r) in rows.iter().enumerate() {
        r.validate().with_context(|| format!("row {}", i + 1))?;
        let name = row_name(r);
        if !seen.insert(name.clone()) {
            bail!("row {}: duplicate of `{name}`", i + 1);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stat {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    /// Seeds contributing a defined value.
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct RowSummary {
    pub name: String,
    pub ablation: Ablation,
    pub runs: Vec<RunSummary>,
    pub stats: Vec<Stat>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn row_stats(runs: &[RunSummary]) -> Vec<Stat> {
    let mut metrics: Vec<(String, Vec<f64>)> = vec![
        ("miou".into(), runs.iter().map(|r| r.metrics.miou).collect()),
        ("oa".into(), runs.iter().map(|r| r.metrics.oa).collect()),
    ];
    for g in Group::ALL {
        metrics.push((g.as_str().into(), runs.iter().filter_map(|r| r.metrics.group(g)).collect()));
    }
    metrics
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(metric, v)| {
            let (mean, std) = mean_std(&v);
            Stat {
                metric,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

/// Runs every row for every seed in `config.seeds` using up to `jobs`
/// threads. Runs land in `out/<row>/seed-<s>/`, the summary in
/// `out/summary.csv`.
pub fn run_matrix(config: &ExperimentConfig, rows: &[Ablation], out: &Path, jobs: usize) -> anyhow::Result<Vec<RowSummary>> {
    check_rows(rows)?;
    let tasks: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| config.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Mutex<Vec<Option<anyhow::Result<RunSummary>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(r, seed)) = tasks.get(k) else { break };
                let name = row_name(&rows[r]);
                let mut cfg = config.clone();
                cfg.train.ablation = rows[r].clone();
                let dir = out.join(&name).join(format!("seed-{seed}"));
                let result = run_seed(&cfg, &name, seed, &dir);
                results.lock().expect("no worker panicked")[k] = Some(result);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    let mut per_row: Vec<Vec<RunSummary>> = vec![Vec::new(); rows.len()];
    let mut failures = Vec::new();
    for (&(r, seed), res) in tasks.iter().zip(results) {
        match res.expect("every task ran") {
            Ok(s) => per_row[r].push(s),
            Err(e) => failures.push(format!("{} seed {seed}: {e:#}", row_name(&rows[r]))),
        }
    }
    if !failures.is_empty() {
        return Err(anyhow!("{} run(s) failed:\n  {}", failures.len(), failures.join("\n  ")));
    }
    let summaries: Vec<RowSummary> = rows
        .iter()
        .zip(per_row)
        .map(|(a, runs)| RowSummary {
            name: row_name(a),
            ablation: a.clone(),
            stats: row_stats(&runs),
            runs,
        })
        .collect();
    write_summary(&out.join(SUMMARY_FILE), &summaries)?;
    Ok(summaries)
}

pub fn write_summary(path: &Path, rows: &[RowSummary]) -> anyhow::Result<()> {
    let mut out = Vec::new();
    for r in rows {
        let seeds = r.runs.iter().map(|s| s.seed.to_string()).collect::<Vec<_>>().join(" ");
        for s in &r.stats {
            out.push([
                r.name.clone(),
                s.metric.clone(),
                s.mean.to_string(),
                s.std.to_string(),
                s.n.to_string(),
                seeds.clone(),
            ]);
        }
    }
    artifacts::write_csv(path, &SUMMARY_HEADER, &out)
}

/// A fixed-width table of mean ± std in percent.
pub fn format_table(rows: &[RowSummary]) -> String {
    let cols = ["miou", "oa", "head", "waist", "tail"];
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:width$}", "row");
    for c in cols {
        let _ = write!(s, "  {c:>13}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:width$}", r.name);
        for c in cols {
            let cell = match r.stats.iter().find(|st| st.metric == c) {
                Some(st) => format!("{:.1} ± {:.1}", 100.0 * st.mean, 100.0 * st.std),
                None => "n/a".into(),
            };
            let _ = write!(s, "  {cell:>13}");
        }
        s.push('\n');
    }
    s
}
