//! CSV and JSON output. Every file is written to a temporary sibling first and
//! then renamed over the target, so a rerun never leaves a half-written file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::heat::Trajectory;

/// Writes `bytes` to `path` via write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `x[,y],value` rows at cell centres, 17 significant digits.
pub fn field_csv(field: &Field, grid: &Grid) -> Result<String> {
    grid.check(field)?;
    let mut out = String::with_capacity(48 * field.len());
    out.push_str(if grid.dimension() == 1 {
        "x,value\n"
    } else {
        "x,y,value\n"
    });
    for (i, v) in field.iter().enumerate() {
        for c in grid.cell_center(i) {
            let _ = write!(out, "{c:.16e},");
        }
        let _ = writeln!(out, "{v:.16e}");
    }
    Ok(out)
}

pub fn write_field(path: &Path, field: &Field, grid: &Grid) -> Result<()> {
    write_atomic(path, field_csv(field, grid)?.as_bytes())
}

/// One CSV per `stride`-th time node (and the last node) under `dir/name/`.
/// Returns the written paths.
pub fn write_trajectory(
    dir: &Path,
    name: &str,
    traj: &Trajectory,
    grid: &Grid,
    stride: usize,
) -> Result<Vec<PathBuf>> {
    if stride == 0 {
        return Ok(Vec::new());
    }
    let sub = dir.join(name);
    ensure_dir(&sub)?;
    let last = traj.nodes() - 1;
    let mut written = Vec::new();
    for j in (0..=last).filter(|j| j % stride == 0 || *j == last) {
        let path = sub.join(format!("t{j:05}.csv"));
        write_field(&path, traj.field(j), grid)?;
        written.push(path);
    }
    Ok(written)
}

/// Pretty JSON with the struct's field order; a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads a field CSV in the format of [`field_csv`]: a header, then one row
/// per cell whose last column is the value. Coordinates are not checked.
pub fn read_field(path: &Path, grid: &Grid) -> Result<Field> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_field(&text, grid)
}

pub fn parse_field(text: &str, grid: &Grid) -> Result<Field> {
    let mut values = Vec::with_capacity(grid.cell_count());
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if k == 0 || line.is_empty() {
            continue;
        }
        let last = line.rsplit(',').next().unwrap_or(line).trim();
        let v: f64 = last.parse().map_err(|_| Error::Parse {
            line: k + 1,
            message: format!("not a number: {last:?}"),
        })?;
        values.push(v);
    }
    if values.len() != grid.cell_count() {
        return Err(Error::ShapeMismatch(format!(
            "field file has {} rows, grid has {} cells",
            values.len(),
            grid.cell_count()
        )));
    }
    Ok(Field::new(values))
}
