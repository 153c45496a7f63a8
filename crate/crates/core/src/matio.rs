//! Plain-text matrix and vector files.
//!
//! Complex matrix (`.cmat`):
//!
//! ```text
//! # optional comment lines
//! cmatrix <rows> <cols>
//! <re_00> <im_00> <re_01> <im_01> ...      one line per row, row-major
//! ```
//!
//! Real vector (`.rvec`), used for eta vectors and eigenvalue lists:
//!
//! ```text
//! # optional comment lines
//! rvector <len>
//! <v_0>
//! <v_1>
//! ```
//!
//! Numbers are written in shortest round-trip scientific notation, so a
//! write/read cycle is lossless and equal inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{c64, CMat};

pub fn format_cmatrix(m: &CMat, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(comment) = comment {
        for line in comment.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "cmatrix {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let mut first = true;
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{:e} {:e}", z.re, z.im);
        }
        out.push('\n');
    }
    out
}

pub fn parse_cmatrix(text: &str, path: &Path) -> Result<CMat> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("cmatrix") {
        return Err(err(format!("expected `cmatrix` header, found `{header}`")));
    }
    let rows: usize = parse_num(parts.next(), "rows").map_err(&err)?;
    let cols: usize = parse_num(parts.next(), "cols").map_err(&err)?;
    let mut m = CMat::zeros(rows, cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| err(format!("missing row {i} of {rows}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("row {i}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * cols {
            return Err(err(format!(
                "row {i}: expected {} numbers, found {}",
                2 * cols,
                vals.len()
            )));
        }
        for j in 0..cols {
            m[(i, j)] = c64(vals[2 * j], vals[2 * j + 1]);
        }
    }
    if lines.next().is_some() {
        return Err(err("trailing data after last row".into()));
    }
    Ok(m)
}

pub fn format_rvector(v: &[f64], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(comment) = comment {
        for line in comment.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "rvector {}", v.len());
    for x in v {
        let _ = writeln!(out, "{x:e}");
    }
    out
}

pub fn parse_rvector(text: &str, path: &Path) -> Result<Vec<f64>> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("rvector") {
        return Err(err(format!("expected `rvector` header, found `{header}`")));
    }
    let len: usize = parse_num(parts.next(), "len").map_err(&err)?;
    let v: Vec<f64> = lines
        .map(|t| t.parse::<f64>().map_err(|e| err(format!("`{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != len {
        return Err(err(format!("expected {len} values, found {}", v.len())));
    }
    Ok(v)
}

fn parse_num(tok: Option<&str>, what: &str) -> std::result::Result<usize, String> {
    tok.ok_or_else(|| format!("missing {what} in header"))?
        .parse()
        .map_err(|e| format!("bad {what}: {e}"))
}

pub fn write_cmatrix(path: &Path, m: &CMat, comment: Option<&str>) -> Result<()> {
    fs::write(path, format_cmatrix(m, comment)).map_err(|e| Error::io(path, e))
}

pub fn read_cmatrix(path: &Path) -> Result<CMat> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cmatrix(&text, path)
}

pub fn write_rvector(path: &Path, v: &[f64], comment: Option<&str>) -> Result<()> {
    fs::write(path, format_rvector(v, comment)).map_err(|e| Error::io(path, e))
}

pub fn read_rvector(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rvector(&text, path)
}
