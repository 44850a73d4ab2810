//! Trajectory CSV with header `replicate,t,M_t,w1,mmd,bias_level`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crtlab_core::TrajectoryPoint;

pub const HEADER: &str = "replicate,t,M_t,w1,mmd,bias_level";

/// Renders replicates in order. Floats use the shortest representation
/// that parses back to the same value.
pub fn render(replicates: &[(usize, &[TrajectoryPoint])]) -> String {
    let mut out = String::with_capacity(64 * replicates.iter().map(|(_, p)| p.len()).sum::<usize>() + 64);
    out.push_str(HEADER);
    out.push('\n');
    for (r, points) in replicates {
        for p in points.iter() {
            writeln!(out, "{r},{},{},{},{},{}", p.t, p.m_t, p.w1, p.mmd, p.bias_level).expect("writing to a String");
        }
    }
    out
}

pub fn write(path: &Path, replicates: &[(usize, &[TrajectoryPoint])]) -> Result<()> {
    std::fs::write(path, render(replicates)).with_context(|| format!("writing {}", path.display()))
}

pub fn parse(text: &str) -> Result<Vec<(usize, TrajectoryPoint)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => bail!("bad trajectory header: {other:?}"),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("line {}: expected 6 fields, got {}", i + 2, f.len());
        }
        let ctx = || format!("line {}", i + 2);
        rows.push((
            f[0].parse().with_context(ctx)?,
            TrajectoryPoint {
                t: f[1].parse().with_context(ctx)?,
                m_t: f[2].parse().with_context(ctx)?,
                w1: f[3].parse().with_context(ctx)?,
                mmd: f[4].parse().with_context(ctx)?,
                bias_level: f[5].parse().with_context(ctx)?,
            },
        ));
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<(usize, TrajectoryPoint)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text)
}
