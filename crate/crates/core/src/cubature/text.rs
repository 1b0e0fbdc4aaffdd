//! Line-oriented text format for cubature formulas.
//!
//! ```text
//! d N m
//! K                      # number of breakpoints of path 1
//! s_0 s_1 ... s_{K-1}
//! a_0 a_1 ... a_d        # slope row of segment 1 (time first)
//! ...                    # K-1 rows
//! weight
//! K                      # path 2 ...
//! ```
//!
//! Numbers are written with 17 significant digits so that a round trip is
//! bit-exact. Blank lines and `#` comments are ignored when reading.

use std::fmt::Write as _;

use super::{CubatureFormula, CubaturePath};
use crate::error::{Error, Result};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn row(values: &[f64]) -> String {
    values.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ")
}

pub fn write_formula(formula: &CubatureFormula) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {}",
        formula.brownian_dim(),
        formula.len(),
        formula.declared_order()
    );
    for (path, w) in formula.paths().iter().zip(formula.weights()) {
        let _ = writeln!(out, "{}", path.breakpoints().len());
        let _ = writeln!(out, "{}", row(path.breakpoints()));
        for slopes in path.slopes() {
            let _ = writeln!(out, "{}", row(slopes));
        }
        let _ = writeln!(out, "{}", num(*w));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let content = line.split('#').next().unwrap_or("").trim();
            self.last = i + 1;
            if !content.is_empty() {
                return Ok((i + 1, content.split_whitespace().collect()));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            reason: "unexpected end of input".into(),
        })
    }

    fn numbers<T: std::str::FromStr>(
        &mut self,
        expected: usize,
        what: &str,
    ) -> Result<(usize, Vec<T>)> {
        let (line, tokens) = self.next_tokens()?;
        if tokens.len() != expected {
            return Err(Error::Parse {
                line,
                reason: format!(
                    "expected {expected} values for {what}, found {}",
                    tokens.len()
                ),
            });
        }
        let values = tokens
            .iter()
            .map(|t| {
                t.parse::<T>().map_err(|_| Error::Parse {
                    line,
                    reason: format!("cannot parse {t:?} in {what}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        Ok((line, values))
    }
}

pub fn parse_formula(text: &str) -> Result<CubatureFormula> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (header_line, header) = lines.numbers::<usize>(3, "header `d N m`")?;
    let (d, n, m) = (header[0], header[1], header[2]);
    let mut paths = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for p in 0..n {
        let (line, k) = lines.numbers::<usize>(1, "breakpoint count")?;
        let k = k[0];
        if k < 2 {
            return Err(Error::Parse {
                line,
                reason: format!("path {} needs at least 2 breakpoints", p + 1),
            });
        }
        let (_, breakpoints) = lines.numbers::<f64>(k, "breakpoints")?;
        let mut slopes = Vec::with_capacity(k - 1);
        for _ in 0..k - 1 {
            slopes.push(lines.numbers::<f64>(d + 1, "slope row")?.1);
        }
        let (wline, w) = lines.numbers::<f64>(1, "weight")?;
        let path = CubaturePath::new(breakpoints, slopes).map_err(|e| Error::Parse {
            line: wline,
            reason: format!("path {}: {e}", p + 1),
        })?;
        paths.push(path);
        weights.push(w[0]);
    }
    CubatureFormula::new(paths, weights, m).map_err(|e| Error::Parse {
        line: header_line,
        reason: e.to_string(),
    })
}
