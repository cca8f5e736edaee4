//! Plain-text scenes: one point per line, `x y z gt_label labeled_flag`.
//!
//! Lines starting with `#` are comments, except `# classes N`, which fixes
//! the class count (otherwise it is one more than the largest label).
//! Coordinates are written in shortest round-trip form, so a write/read
//! cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use tailseg_core::synthdata::{LabelMask, Scene};

pub fn to_text(scene: &Scene, mask: &LabelMask) -> String {
    let mut out = String::new();
    out.push_str("# x y z gt_label labeled_flag\n");
    let _ = writeln!(out, "# classes {}", scene.classes());
    for (i, (p, l)) in scene.points.iter().zip(&scene.labels).enumerate() {
        let _ = writeln!(out, "{} {} {} {} {}", p[0], p[1], p[2], l, u8::from(mask.contains(i)));
    }
    out
}

pub fn from_text(text: &str) -> anyhow::Result<(Scene, LabelMask)> {
    let mut classes = None;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labeled = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("classes") {
                let c: usize = v.trim().parse().with_context(|| format!("line {lineno}: bad class count"))?;
                classes = Some(c);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            bail!("line {lineno}: expected 5 fields, found {}", fields.len());
        }
        let mut xyz = [0.0f64; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = fields[k]
                .parse()
                .with_context(|| format!("line {lineno}: bad coordinate `{}`", fields[k]))?;
            if !v.is_finite() {
                bail!("line {lineno}: non-finite coordinate");
            }
        }
        let label: usize = fields[3]
            .parse()
            .with_context(|| format!("line {lineno}: bad label `{}`", fields[3]))?;
        let flag = match fields[4] {
            "0" => false,
            "1" => true,
            other => bail!("line {lineno}: labeled flag must be 0 or 1, found `{other}`"),
        };
        if flag {
            labeled.push(points.len());
        }
        points.push(xyz);
        labels.push(label);
    }
    let classes = match classes {
        Some(c) => c,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let scene = Scene::new(points, labels, classes)?;
    let mask = LabelMask::explicit(labeled, &scene)?;
    Ok((scene, mask))
}

pub fn write(path: &Path, scene: &Scene, mask: &LabelMask) -> anyhow::Result<()> {
    fs::write(path, to_text(scene, mask)).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<(Scene, LabelMask)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read scene file {}", path.display()))?;
    from_text(&text).with_context(|| format!("invalid scene file {}", path.display()))
}
