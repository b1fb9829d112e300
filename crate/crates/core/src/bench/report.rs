use std::io::{BufRead, Write};

use super::ModelKind;
use crate::error::{invalid, Error, Result};

pub const CSV_HEADER: &str = "kind,n,r,m,analytic_elems,measured_peak_elems,forward_ms,backward_ms";

/// One profiled forward and backward pass at a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    pub kind: ModelKind,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub analytic_elems: usize,
    /// Peak live activation elements during the forward pass.
    pub measured_peak_elems: usize,
    /// Peak live working elements through forward and backward. Not part of
    /// the CSV row.
    pub train_peak_elems: Option<usize>,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

impl ProfileRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4}",
            self.kind,
            self.n,
            self.r,
            self.m,
            self.analytic_elems,
            self.measured_peak_elems,
            self.forward_ms,
            self.backward_ms
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!("expected 8 fields, got {}: `{line}`", fields.len())));
        }
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad integer `{}`", fields[i])))
        };
        let float = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number `{}`", fields[i])))
        };
        Ok(ProfileRecord {
            kind: fields[0].parse()?,
            n: int(1)?,
            r: int(2)?,
            m: int(3)?,
            analytic_elems: int(4)?,
            measured_peak_elems: int(5)?,
            train_peak_elems: None,
            forward_ms: float(6)?,
            backward_ms: float(7)?,
        })
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[ProfileRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for rec in records {
        writeln!(out, "{}", rec.to_csv_row())?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<ProfileRecord>> {
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| ProfileRecord::from_csv_row(&l?))
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(invalid(format!("slope fit needs at least 2 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|&&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(invalid(format!("log-log fit needs positive values, got ({x}, {y})")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("slope fit needs at least two distinct lengths"));
    }
    Ok(sxy / sxx)
}
