use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A batch of D-dimensional points with non-negative per-sample weights.
///
/// Weights are importance weights, not probabilities: only ratios matter.
/// Individual weights may be zero; constructors reject negative or non-finite
/// values. Operations that need probability mass (loss, standardization)
/// reject sets whose weights sum to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSampleSet {
    points: Matrix,
    weights: Vec<f64>,
}

impl WeightedSampleSet {
    pub fn new(points: Matrix, weights: Vec<f64>) -> Result<Self> {
        if points.rows() != weights.len() {
            return Err(Error::shape(
                "WeightedSampleSet::new",
                format!("{} points but {} weights", points.rows(), weights.len()),
            ));
        }
        if let Some(&bad) = points.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("sample coordinates", bad));
        }
        if let Some(&bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::numeric("sample weights", bad));
        }
        Ok(WeightedSampleSet { points, weights })
    }

    pub fn unit_weights(points: Matrix) -> Self {
        let n = points.rows();
        WeightedSampleSet { points, weights: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// New set containing the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut points = Matrix::zeros(indices.len(), self.dim());
        let mut weights = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::config(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            points.row_mut(r).copy_from_slice(self.point(i));
            weights.push(self.weights[i]);
        }
        Ok(WeightedSampleSet { points, weights })
    }

    /// Same points with every weight multiplied by `factor`.
    pub fn scaled_weights(&self, factor: f64) -> Result<Self> {
        if !factor.is_finite() || factor <= 0.0 {
            return Err(Error::config(format!("weight scale must be positive, got {factor}")));
        }
        let weights = self.weights.iter().map(|w| w * factor).collect();
        WeightedSampleSet::new(self.points.clone(), weights)
    }

    /// Writes the delimited-text form: optional header, one sample per row,
    /// coordinates then (when `with_weights`) a trailing weight column.
    /// Numbers use the shortest representation that round-trips exactly.
    pub fn save_text(&self, path: &Path, with_weights: bool) -> Result<()> {
        let mut out = String::new();
        for d in 0..self.dim() {
            if d > 0 {
                out.push(' ');
            }
            out.push_str(&format!("x{d}"));
        }
        if with_weights {
            out.push_str(" weight");
        }
        out.push('\n');
        for i in 0..self.len() {
            let mut first = true;
            for &v in self.point(i) {
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{v}"));
                first = false;
            }
            if with_weights {
                out.push_str(&format!(" {}", self.weights[i]));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Compact binary form; exact round-trip of every f64.
    pub fn save_binary(&self, path: &Path, with_weights: bool) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BINARY_MAGIC);
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.push(u8::from(with_weights));
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for &v in self.point(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if with_weights {
                buf.extend_from_slice(&self.weights[i].to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }
}

const BINARY_MAGIC: &[u8; 8] = b"PWSAMP01";

/// How columns of a sample file map to coordinates and weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnLayout {
    /// Every column is a coordinate; weights default to 1.
    Unweighted,
    /// The last column is the sample weight.
    WeightedLast,
    /// Exactly `dim` coordinate columns; one extra column, if present, is the
    /// weight. Any other width is a format error.
    Dim(usize),
}

/// Reads a sample file, either the delimited-text format (whitespace or
/// comma separated, optional header detected by a non-numeric first row) or
/// the binary format written by [`WeightedSampleSet::save_binary`].
pub fn load_samples(path: &Path, layout: ColumnLayout) -> Result<WeightedSampleSet> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        return parse_binary(&bytes);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::format(None, "file is neither UTF-8 text nor the binary sample format"))?;
    parse_text(&text, layout)
}

fn parse_binary(bytes: &[u8]) -> Result<WeightedSampleSet> {
    let need = |ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(Error::format(None, "binary sample file truncated"))
        }
    };
    need(bytes.len() >= 21)?;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let weighted = bytes[12] != 0;
    let n = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    let per_row = dim + usize::from(weighted);
    let expected = 21 + n * per_row * 8;
    need(bytes.len() == expected)?;
    if dim == 0 {
        return Err(Error::format(None, "binary sample file declares zero dimensions"));
    }
    let mut points = Matrix::zeros(n, dim);
    let mut weights = vec![1.0; n];
    let mut off = 21;
    for r in 0..n {
        for c in 0..dim {
            points.set(r, c, f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")));
            off += 8;
        }
        if weighted {
            weights[r] = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    WeightedSampleSet::new(points, weights)
}

fn parse_text(text: &str, layout: ColumnLayout) -> Result<WeightedSampleSet> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first_content_line = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
        } else {
            line.split_whitespace().collect()
        };
        let parsed: std::result::Result<Vec<f64>, _> =
            tokens.iter().map(|t| t.parse::<f64>()).collect();
        match parsed {
            Err(_) if first_content_line => {
                // Non-numeric first row is a header; skip it.
                first_content_line = false;
                continue;
            }
            Err(_) => {
                let bad = tokens
                    .iter()
                    .find(|t| t.parse::<f64>().is_err())
                    .expect("at least one token failed to parse");
                return Err(Error::format(
                    Some(lineno),
                    format!("non-numeric field '{bad}'"),
                ));
            }
            Ok(vals) => {
                if let Some(w) = width {
                    if vals.len() != w {
                        return Err(Error::format(
                            Some(lineno),
                            format!("row has {} columns, expected {w}", vals.len()),
                        ));
                    }
                } else {
                    width = Some(vals.len());
                }
                if let Some(&bad) = vals.iter().find(|v| !v.is_finite()) {
                    return Err(Error::format(
                        Some(lineno),
                        format!("non-finite value {bad}"),
                    ));
                }
                if let ColumnLayout::WeightedLast | ColumnLayout::Dim(_) = layout {
                    let weighted = match layout {
                        ColumnLayout::WeightedLast => true,
                        ColumnLayout::Dim(d) => vals.len() == d + 1,
                        ColumnLayout::Unweighted => false,
                    };
                    if weighted && *vals.last().expect("non-empty row") < 0.0 {
                        return Err(Error::format(
                            Some(lineno),
                            format!("negative weight {}", vals.last().expect("non-empty row")),
                        ));
                    }
                }
                rows.push(vals);
                first_content_line = false;
            }
        }
    }
    let width = width.ok_or_else(|| Error::format(None, "no sample rows found"))?;
    let (dim, weighted) = match layout {
        ColumnLayout::Unweighted => (width, false),
        ColumnLayout::WeightedLast => {
            if width < 2 {
                return Err(Error::format(
                    None,
                    "weighted layout needs at least one coordinate column plus the weight",
                ));
            }
            (width - 1, true)
        }
        ColumnLayout::Dim(d) => {
            if width == d {
                (d, false)
            } else if width == d + 1 {
                (d, true)
            } else {
                return Err(Error::format(
                    None,
                    format!("expected {d} or {} columns, file has {width}", d + 1),
                ));
            }
        }
    };
    let mut points = Matrix::zeros(rows.len(), dim);
    let mut weights = vec![1.0; rows.len()];
    for (r, vals) in rows.iter().enumerate() {
        points.row_mut(r).copy_from_slice(&vals[..dim]);
        if weighted {
            weights[r] = vals[dim];
        }
    }
    WeightedSampleSet::new(points, weights)
}
