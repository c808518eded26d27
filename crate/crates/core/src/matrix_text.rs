//! Plain-text matrix format used by `coeffs dump` and the golden tests.
//!
//! ```text
//! # free-form comment lines start with '#'
//! matrix <name> <rows> <cols>
//! <row 0: cols entries, whitespace separated>
//! ...
//! ```
//!
//! Entries are written row-major in scientific notation with 17 significant
//! digits (`{:.16e}`), which round-trips every finite `f64` exactly. Blank
//! lines are ignored.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Renders named matrices in the text format.
pub fn write_matrices<'a, I>(header: &str, matrices: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a DMatrix<f64>)>,
{
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    for (name, m) in matrices {
        let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols())
                .map(|j| format!("{:.16e}", m[(i, j)]))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

/// Parses the text format back into `(name, matrix)` pairs, in file order.
pub fn parse_matrices(text: &str) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();
    while let Some((line_no, line)) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if parts.len() != 4 || parts[0] != "matrix" {
            return Err(parse_err(format!(
                "expected 'matrix <name> <rows> <cols>', got '{line}'"
            )));
        }
        let rows: usize = parts[2]
            .parse()
            .map_err(|e| parse_err(format!("bad row count: {e}")))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|e| parse_err(format!("bad column count: {e}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (row_line, row) = lines.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("matrix {} ended early", parts[1]),
            })?;
            let vals = row
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: row_line,
                    message: e.to_string(),
                })?;
            if vals.len() != cols {
                return Err(Error::Parse {
                    line: row_line,
                    message: format!("expected {cols} entries, found {}", vals.len()),
                });
            }
            data.extend(vals);
        }
        out.push((
            parts[1].to_string(),
            DMatrix::from_row_slice(rows, cols, &data),
        ));
    }
    Ok(out)
}
