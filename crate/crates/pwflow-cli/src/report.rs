//! Benchmark report rows and their on-disk form.
//!
//! The report is a tab-separated table with a fixed header, one row per
//! target and method. Floats are written in Rust's shortest round-trip
//! representation, so parsing a report recovers the written values exactly
//! and two runs with the same seed produce byte-identical files. Wall-clock
//! times deliberately live elsewhere (a separate timing file) to keep the
//! metric files reproducible.

use std::path::Path;

use pwflow::{Error, Result};

/// Column order of the report table. `cost` is training cost normalized so
/// the single-flow row of the same target is exactly 1.
pub const REPORT_HEADER: &str =
    "target\tmethod\tstatus\tkl_mean\tkl_error\tcost\tepochs\tchosen_k\tparameters";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Failed,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(RowStatus::Ok),
            "failed" => Ok(RowStatus::Failed),
            other => Err(Error::Format {
                line: None,
                message: format!("unknown row status {other:?}"),
            }),
        }
    }
}

/// One target-and-method line of the benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub target: String,
    /// `"maf"` for the single flow, `"pnf"` for the piecewise mixture.
    pub method: String,
    pub status: RowStatus,
    pub kl_mean: f64,
    pub kl_error: f64,
    pub cost: f64,
    /// Epochs summed over runs (and over mixture components for `pnf`).
    pub epochs: u64,
    /// Most common cluster count across runs; 1 for the single flow.
    pub chosen_k: usize,
    /// Trainable parameters of one model (summed over components for `pnf`).
    pub parameters: usize,
}

impl ReportRow {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.target,
            self.method,
            self.status.as_str(),
            self.kl_mean,
            self.kl_error,
            self.cost,
            self.epochs,
            self.chosen_k,
            self.parameters
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(Error::Format {
                line: Some(lineno),
                message: format!("expected 9 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Format {
                line: Some(lineno),
                message: format!("{what} {s:?} is not a number"),
            })
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Format {
                line: Some(lineno),
                message: format!("{what} {s:?} is not a whole number"),
            })
        };
        Ok(ReportRow {
            target: fields[0].to_string(),
            method: fields[1].to_string(),
            status: RowStatus::parse(fields[2]).map_err(|e| match e {
                Error::Format { message, .. } => Error::Format { line: Some(lineno), message },
                other => other,
            })?,
            kl_mean: num(fields[3], "kl_mean")?,
            kl_error: num(fields[4], "kl_error")?,
            cost: num(fields[5], "cost")?,
            epochs: int(fields[6], "epochs")?,
            chosen_k: int(fields[7], "chosen_k")? as usize,
            parameters: int(fields[8], "parameters")? as usize,
        })
    }

    /// Successful rows must be fully finite; failed rows may carry NaNs.
    fn validate(&self, lineno: usize) -> Result<()> {
        if self.status == RowStatus::Ok {
            for (name, v) in
                [("kl_mean", self.kl_mean), ("kl_error", self.kl_error), ("cost", self.cost)]
            {
                if !v.is_finite() {
                    return Err(Error::Format {
                        line: Some(lineno),
                        message: format!("successful row has non-finite {name}"),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    out
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, render_report(rows))?;
    Ok(())
}

pub fn parse_report_str(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Format {
                line: Some(1),
                message: format!("unexpected header {header:?}"),
            });
        }
        None => {
            return Err(Error::Format { line: None, message: "empty report".to_string() });
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = ReportRow::from_line(line, idx + 1)?;
        row.validate(idx + 1)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_report_str(&text)
}
