//! Plain-text field snapshots.
//!
//! ```text
//! snls-field v1 d=<d> n=<n> L=<L>
//! re,im
//! ...
//! ```
//! One row per node in row-major order. Values use the shortest
//! representation that round-trips, so write/read is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use super::field::Field;
use super::grid::{make_grid, Grid, GridSpec};
use crate::error::{Error, Result};

pub const HEADER_TAG: &str = "snls-field v1";

pub fn format_field(field: &Field) -> String {
    let spec = field.grid().spec();
    let mut out = String::with_capacity(field.len() * 40 + 64);
    let _ = writeln!(
        out,
        "{HEADER_TAG} d={} n={} L={}",
        spec.dim, spec.points, spec.half_extent
    );
    for z in field.values() {
        let _ = writeln!(out, "{},{}", z.re, z.im);
    }
    out
}

/// Parses the header alone.
pub fn parse_header(line: &str) -> Result<GridSpec> {
    let rest = line
        .trim()
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::Snapshot(format!("bad header `{line}`")))?;
    let mut d = None;
    let mut n = None;
    let mut l = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Snapshot(format!("bad header token `{tok}`")))?;
        let bad = |_| Error::Snapshot(format!("bad value in `{tok}`"));
        match k {
            "d" => d = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "n" => n = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "L" => l = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => return Err(Error::Snapshot(format!("unknown header key `{k}`"))),
        }
    }
    match (d, n, l) {
        (Some(d), Some(n), Some(l)) => Ok(GridSpec::new(d, l, n)),
        _ => Err(Error::Snapshot("header must carry d, n and L".into())),
    }
}

/// Parses a snapshot onto `grid`, or onto a fresh grid built from the header.
pub fn parse_field(text: &str, grid: Option<&Arc<Grid>>) -> Result<Field> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Snapshot("empty snapshot".into()))?;
    let spec = parse_header(header)?;
    let grid = match grid {
        Some(g) => {
            if g.spec() != spec {
                return Err(Error::GridMismatch);
            }
            Arc::clone(g)
        }
        None => make_grid(spec)?,
    };
    let mut values = Vec::with_capacity(grid.len());
    for (row, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (re, im) = line
            .split_once(',')
            .ok_or_else(|| Error::Snapshot(format!("row {row}: expected `re,im`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Snapshot(format!("row {row}: {e}")))
        };
        values.push(Complex64::new(parse(re)?, parse(im)?));
    }
    Field::from_values(&grid, values)
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    fs::write(path, format_field(field))?;
    Ok(())
}

pub fn read_field(path: &Path, grid: Option<&Arc<Grid>>) -> Result<Field> {
    let text = fs::read_to_string(path)?;
    parse_field(&text, grid)
}
