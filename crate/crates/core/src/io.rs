//! Plain-text matrix and label files.
//!
//! A matrix file holds one row per line with space-separated decimals. A
//! label file holds one frame per line with space-separated `0`/`1` values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::tensor::Tensor;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Formats a matrix; `f32` display output round-trips exactly.
pub fn format_matrix(m: &Tensor<f32>) -> String {
    let cols = m.cols();
    let mut out = String::with_capacity(m.numel() * 12);
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        if cols > 0 {
            out.push('\n');
        }
    }
    out
}

pub fn parse_matrix(path: &Path, text: &str) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad number {tok:?}")))?;
            data.push(v);
        }
        let n = data.len() - before;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(parse_err(path, i + 1, format!("expected {w} values, found {n}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(parse_err(path, 0, "empty matrix"));
    };
    Tensor::new(vec![rows, width], data)
}

pub fn write_matrix(path: &Path, m: &Tensor<f32>) -> Result<()> {
    write_text(path, &format_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Tensor<f32>> {
    parse_matrix(path, &read_text(path)?)
}

pub fn format_labels(y: &LabelMatrix) -> String {
    let mut out = String::with_capacity(y.frames() * (2 * y.speakers()));
    for t in 0..y.frames() {
        for (s, v) in y.row(t).iter().enumerate() {
            if s > 0 {
                out.push(' ');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(path: &Path, text: &str) -> Result<LabelMatrix> {
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| match tok {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(parse_err(path, i + 1, format!("label must be 0 or 1, found {tok:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("expected {} labels, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    LabelMatrix::from_rows(&rows)
}

pub fn write_labels(path: &Path, y: &LabelMatrix) -> Result<()> {
    write_text(path, &format_labels(y))
}

pub fn read_labels(path: &Path) -> Result<LabelMatrix> {
    parse_labels(path, &read_text(path)?)
}
