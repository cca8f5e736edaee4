//! Tidy CSV outputs. Column sets are fixed; different runs differ only in
//! their row tags.
//!
//! - metrics: `tag,seed,iteration,scope,class,value`, where `scope` is one of
//!   `class` (per-class IoU), `miou`, `oa`, `head`, `waist`, `tail`. `class`
//!   is empty for summary rows; `value` is empty when undefined.
//! - pseudo labels: `iteration,point_index,class,confidence,round`.
//! - focusing: `iteration,class,g,gamma_raw,gamma`.
//!
//! Floats use Rust's shortest round-trip formatting.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use tailseg_core::metrics::{Group, MetricsReport};
use tailseg_core::trainer::{FocusSnapshot, IterationRecord};

pub const METRICS_HEADER: [&str; 6] = ["tag", "seed", "iteration", "scope", "class", "value"];
pub const PSEUDO_HEADER: [&str; 5] = ["iteration", "point_index", "class", "confidence", "round"];
pub const FOCUS_HEADER: [&str; 5] = ["iteration", "class", "g", "gamma_raw", "gamma"];

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metric_rows(tag: &str, seed: u64, iteration: usize, m: &MetricsReport) -> Vec<[String; 6]> {
    let row = |scope: &str, class: String, value: Option<f64>| {
        [
            tag.to_owned(),
            seed.to_string(),
            iteration.to_string(),
            scope.to_owned(),
            class,
            num(value),
        ]
    };
    let mut rows: Vec<[String; 6]> = m
        .iou
        .iter()
        .enumerate()
        .map(|(c, v)| row("class", c.to_string(), *v))
        .collect();
    rows.push(row("miou", String::new(), Some(m.miou)));
    rows.push(row("oa", String::new(), Some(m.oa)));
    for g in Group::ALL {
        rows.push(row(g.as_str(), String::new(), m.group(g)));
    }
    rows
}

pub fn pseudo_rows(record: &IterationRecord) -> Vec<[String; 5]> {
    record
        .pseudo
        .entries()
        .iter()
        .map(|e| {
            [
                record.iteration.to_string(),
                e.index.to_string(),
                e.class.to_string(),
                e.confidence.to_string(),
                e.round.as_str().to_owned(),
            ]
        })
        .collect()
}

pub fn focus_rows(iteration: usize, focus: &FocusSnapshot) -> Vec<[String; 5]> {
    (0..focus.g.len())
        .map(|c| {
            [
                iteration.to_string(),
                c.to_string(),
                focus.g[c].to_string(),
                focus.factors.raw[c].to_string(),
                focus.factors.gamma[c].to_string(),
            ]
        })
        .collect()
}

/// A CSV file written row by row and flushed after each batch, so a failed
/// run leaves everything produced so far on disk.
pub struct CsvSink {
    inner: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> anyhow::Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(header)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write_rows<const N: usize>(&mut self, rows: &[[String; N]]) -> anyhow::Result<()> {
        for r in rows {
            self.inner.write_record(r)?;
        }
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let file = self.inner.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    }
}

/// Writes `rows` under `header` to a fresh file in one go.
pub fn write_csv<const N: usize>(path: &Path, header: &[&str], rows: &[[String; N]]) -> anyhow::Result<()> {
    let mut sink = CsvSink::create(path, header)?;
    sink.write_rows(rows)?;
    sink.finish()
}

/// Writes `text` and flushes it to disk.
pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.sync_all()?;
    Ok(())
}
