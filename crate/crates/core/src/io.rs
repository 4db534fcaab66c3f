//! On-disk formats.
//!
//! # GEPB1 binary matrix
//!
//! ```text
//! offset  size        field
//! 0       5           magic "GEPB1" (ASCII)
//! 5       1           dtype, 0x01 = IEEE-754 binary32 little-endian
//! 6       4           n_rows, u32 little-endian
//! 10      4           n_cols, u32 little-endian
//! 14      4*r*c       payload, row-major
//! 14+4rc  4           CRC-32 of bytes [0, 14+4rc), u32 little-endian
//! ```
//!
//! The checksum is the standard CRC-32 (ISO-HDLC / zlib): reflected
//! polynomial 0xEDB88320, initial value 0xFFFFFFFF, final XOR 0xFFFFFFFF.
//! Values are narrowed from `f64` with round-to-nearest-even on write.
//! A dataset is stored as an `n x (d + 1)` matrix whose last column holds
//! the label.
//!
//! # CSV
//!
//! * datasets: header `f0,...,f{d-1},label`
//! * scores: header `sample_index,score`
//! * report records and summary cells: see [`RECORD_HEADER`] and [`SUMMARY_HEADER`]
//!
//! Floats are written with Rust's shortest round-trip formatting.
//!
//! # Logits manifest (JSON)
//!
//! ```json
//! { "n_classes": 3, "dataset": "tag", "members": ["m0.gepb", "m1.gepb"], "labels": "labels.gepb" }
//! ```
//!
//! Member and label paths are relative to the manifest's directory. Each
//! member is an `n_samples x n_classes` GEPB1 logits matrix; `labels`, when
//! present, is an `n_samples x 1` GEPB1 matrix of class indices.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, LabeledDataset};
use crate::harness::{EvaluationRecord, RunReport, SummaryCell};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;
use crate::scoring::{
    conf_score_from_logits, ma_score_from_votes, majority_from_votes, predictions_from_logits, ScoreError, ScoreMethod,
    ScoreVector,
};

pub const MAGIC: &[u8; 5] = b"GEPB1";
pub const DTYPE_F32_LE: u8 = 0x01;
const HEADER_LEN: usize = 14;
const CHECKSUM_LEN: usize = 4;

pub const RECORD_HEADER: &str =
    "condition,method,target,seed,n_samples,true_accuracy,predicted_accuracy,abs_error,signed_error";
pub const SUMMARY_HEADER: &str =
    "condition,method,target,n,mae,std,mean_true_accuracy,mean_predicted_accuracy,mean_signed_error";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"GEPB1\"")]
    BadMagic,
    #[error("unsupported dtype 0x{0:02x}")]
    UnsupportedDtype(u8),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: u64 },
    #[error("matrix dimension {0} does not fit the format")]
    TooLarge(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("logits member {index} ({path}): {reason}")]
    Member { index: usize, path: String, reason: String },
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |cause| FormatError::Io {
        path: path.display().to_string(),
        cause,
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// GEPB1 bytes for `m`.
pub fn encode_matrix<T: Scalar>(m: &DenseMatrix<T>) -> Result<Vec<u8>, FormatError> {
    let rows = u32::try_from(m.rows()).map_err(|_| FormatError::TooLarge(m.rows()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| FormatError::TooLarge(m.cols()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32_LE);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses GEPB1 bytes. Never panics; every defect maps to a [`FormatError`].
pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix<f64>, FormatError> {
    let actual = bytes.len() as u64;
    let prefix = bytes.len().min(MAGIC.len());
    if bytes[..prefix] != MAGIC[..prefix] {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(FormatError::Truncated {
            expected: (HEADER_LEN + CHECKSUM_LEN) as u64,
            actual,
        });
    }
    if bytes[5] != DTYPE_F32_LE {
        return Err(FormatError::UnsupportedDtype(bytes[5]));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as u64;
    let expected = (HEADER_LEN + CHECKSUM_LEN) as u128 + 4 * rows as u128 * cols as u128;
    let expected = u64::try_from(expected).unwrap_or(u64::MAX);
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes {
            extra: actual - expected,
        });
    }
    let body_end = bytes.len() - CHECKSUM_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[HEADER_LEN..body_end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        data.push(v as f64);
    }
    Ok(DenseMatrix::new(rows, cols, data).expect("shape and finiteness checked"))
}

pub fn write_matrix<T: Scalar>(m: &DenseMatrix<T>, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_matrix(m)?).map_err(io_err(path))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix<f64>, FormatError> {
    decode_matrix(&fs::read(path).map_err(io_err(path))?)
}

/// Dataset as a GEPB1 matrix with the label appended as the last column.
pub fn write_dataset_binary<T: Scalar>(data: &LabeledDataset<T>, path: &Path) -> Result<(), FormatError> {
    let d = data.n_features();
    let mut values = Vec::with_capacity(data.n_samples() * (d + 1));
    for (row, &label) in data.features().iter_rows().zip(data.labels()) {
        values.extend(row.iter().map(|v| v.as_f64()));
        values.push(label as f64);
    }
    let m = DenseMatrix::new(data.n_samples(), d + 1, values).expect("finite dataset");
    write_matrix(&m, path)
}

fn label_from_f64(v: f64, row: usize) -> Result<usize, FormatError> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(FormatError::Csv(format!("row {row}: label {v} is not a class index")))
    }
}

fn infer_classes(labels: &[usize], n_classes: Option<usize>) -> usize {
    n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1).max(2))
}

/// Inverse of [`write_dataset_binary`]. `n_classes` defaults to `max label + 1`.
pub fn read_dataset_binary(path: &Path, n_classes: Option<usize>) -> Result<LabeledDataset<f64>, FormatError> {
    let m = read_matrix(path)?;
    if m.cols() == 0 {
        return Err(FormatError::Csv("dataset matrix has no label column".into()));
    }
    let d = m.cols() - 1;
    let mut features = Vec::with_capacity(m.rows() * d);
    let mut labels = Vec::with_capacity(m.rows());
    for (r, row) in m.iter_rows().enumerate() {
        features.extend_from_slice(&row[..d]);
        labels.push(label_from_f64(row[d], r)?);
    }
    let k = infer_classes(&labels, n_classes);
    let features = DenseMatrix::new(m.rows(), d, features).expect("subset of a valid matrix");
    Ok(LabeledDataset::new(features, labels, k, path.display().to_string())?)
}

fn create(path: &Path) -> Result<fs::File, FormatError> {
    fs::File::create(path).map_err(io_err(path))
}

pub fn dataset_csv_string<T: Scalar>(data: &LabeledDataset<T>) -> String {
    let mut out = String::new();
    for j in 0..data.n_features() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for (row, label) in data.features().iter_rows().zip(data.labels()) {
        for v in row {
            let _ = write!(out, "{},", v.as_f64());
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

pub fn write_dataset_csv<T: Scalar>(data: &LabeledDataset<T>, path: &Path) -> Result<(), FormatError> {
    create(path)?
        .write_all(dataset_csv_string(data).as_bytes())
        .map_err(io_err(path))
}

/// Parses a dataset CSV (`f0..f{d-1},label`).
pub fn parse_dataset_csv(
    text: &str,
    n_classes: Option<usize>,
    provenance: &str,
) -> Result<LabeledDataset<f64>, FormatError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| FormatError::Csv(e.to_string()))?.clone();
    let d = headers
        .len()
        .checked_sub(1)
        .ok_or_else(|| FormatError::Csv("empty header".into()))?;
    let header_ok = headers.get(d) == Some("label") && (0..d).all(|j| headers.get(j) == Some(format!("f{j}").as_str()));
    if !header_ok {
        return Err(FormatError::Csv(format!(
            "header must be f0..f{},label",
            d.saturating_sub(1)
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::Csv(e.to_string()))?;
        for j in 0..d {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| FormatError::Csv(format!("row {r}, column f{j}: '{}' is not a number", &rec[j])))?;
            features.push(v);
        }
        let label: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| FormatError::Csv(format!("row {r}: '{}' is not a class index", &rec[d])))?;
        labels.push(label);
    }
    let k = infer_classes(&labels, n_classes);
    let features = DenseMatrix::new(labels.len(), d, features).map_err(|e| FormatError::Csv(e.to_string()))?;
    Ok(LabeledDataset::new(features, labels, k, provenance)?)
}

pub fn read_dataset_csv(path: &Path, n_classes: Option<usize>) -> Result<LabeledDataset<f64>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset_csv(&text, n_classes, &path.display().to_string())
}

pub fn scores_csv_string<T: Scalar>(scores: &ScoreVector<T>) -> String {
    let mut out = String::from("sample_index,score\n");
    for (i, s) in scores.scores.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", s.as_f64());
    }
    out
}

pub fn write_scores_csv<T: Scalar>(scores: &ScoreVector<T>, path: &Path) -> Result<(), FormatError> {
    create(path)?
        .write_all(scores_csv_string(scores).as_bytes())
        .map_err(io_err(path))
}

/// Scores from a `sample_index,score` CSV; indices must run `0, 1, ...`.
pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| FormatError::Csv(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["sample_index", "score"] {
        return Err(FormatError::Csv("header must be sample_index,score".into()));
    }
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::Csv(e.to_string()))?;
        let idx: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| FormatError::Csv(format!("row {r}: bad sample_index")))?;
        if idx != r {
            return Err(FormatError::Csv(format!("row {r}: sample_index {idx} out of sequence")));
        }
        let s: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| FormatError::Csv(format!("row {r}: bad score")))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(FormatError::Csv(format!("row {r}: score {s} outside [0, 1]")));
        }
        out.push(s);
    }
    Ok(out)
}

/// Scores as an `n x 1` GEPB1 matrix.
pub fn write_scores_binary<T: Scalar>(scores: &ScoreVector<T>, path: &Path) -> Result<(), FormatError> {
    let m = DenseMatrix::new(scores.len(), 1, scores.scores.clone()).expect("scores are finite");
    write_matrix(&m, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsManifest {
    pub n_classes: usize,
    #[serde(default)]
    pub dataset: String,
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

/// Logits produced elsewhere, one matrix per ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBundle {
    pub members: Vec<DenseMatrix<f64>>,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
    pub dataset: String,
}

impl LogitsBundle {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn n_samples(&self) -> usize {
        self.members[0].rows()
    }

    /// Conf scores of member 0.
    pub fn conf_scores(&self) -> Result<ScoreVector<f64>, FormatError> {
        Ok(conf_score_from_logits(&self.members[0])?)
    }

    pub fn votes(&self) -> Vec<Vec<usize>> {
        self.members.iter().map(predictions_from_logits).collect()
    }

    pub fn ma_scores(&self) -> Result<ScoreVector<f64>, FormatError> {
        Ok(ma_score_from_votes(&self.votes())?)
    }

    /// Member-0 predictions for Conf, majority vote for MA.
    pub fn predictions(&self, method: ScoreMethod) -> Result<Vec<usize>, FormatError> {
        match method {
            ScoreMethod::Ma => Ok(majority_from_votes(&self.votes())?),
            _ => Ok(predictions_from_logits(&self.members[0])),
        }
    }
}

pub fn ingest_logits(manifest_path: &Path) -> Result<LogitsBundle, FormatError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: LogitsManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.members.is_empty() {
        return Err(FormatError::Member {
            index: 0,
            path: manifest_path.display().to_string(),
            reason: "manifest lists no members".into(),
        });
    }
    let mut members: Vec<DenseMatrix<f64>> = Vec::with_capacity(manifest.members.len());
    for (index, rel) in manifest.members.iter().enumerate() {
        let path: PathBuf = base.join(rel);
        let member_err = |reason: String| FormatError::Member {
            index,
            path: path.display().to_string(),
            reason,
        };
        if !path.is_file() {
            return Err(member_err("file not found".into()));
        }
        let m = read_matrix(&path).map_err(|e| member_err(e.to_string()))?;
        if m.cols() != manifest.n_classes {
            return Err(member_err(format!(
                "has {} classes, manifest says {}",
                m.cols(),
                manifest.n_classes
            )));
        }
        if let Some(first) = members.first() {
            if m.shape() != first.shape() {
                return Err(member_err(format!(
                    "shape {:?} differs from member 0 shape {:?}",
                    m.shape(),
                    first.shape()
                )));
            }
        }
        if m.rows() == 0 {
            return Err(member_err("has no rows".into()));
        }
        members.push(m);
    }
    let labels = match &manifest.labels {
        None => None,
        Some(rel) => {
            let path = base.join(rel);
            let m = read_matrix(&path)?;
            if m.shape() != (members[0].rows(), 1) {
                return Err(FormatError::Csv(format!(
                    "{}: labels must be {}x1, got {:?}",
                    path.display(),
                    members[0].rows(),
                    m.shape()
                )));
            }
            let labels = m
                .as_slice()
                .iter()
                .enumerate()
                .map(|(r, &v)| label_from_f64(v, r))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(bad) = labels.iter().find(|&&l| l >= manifest.n_classes) {
                return Err(FormatError::Csv(format!("label {bad} >= n_classes")));
            }
            Some(labels)
        }
    };
    Ok(LogitsBundle {
        members,
        labels,
        n_classes: manifest.n_classes,
        dataset: manifest.dataset,
    })
}

/// Pretty JSON with a trailing newline. Field order follows the struct
/// definitions, so equal values always serialize to equal bytes.
pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String, FormatError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn report_json(report: &RunReport) -> Result<String, FormatError> {
    to_canonical_json(report)
}

pub fn parse_report_json(text: &str) -> Result<RunReport, FormatError> {
    Ok(serde_json::from_str(text)?)
}

pub fn records_csv(records: &[EvaluationRecord]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.condition,
            r.method,
            r.target,
            r.seed,
            r.n_samples,
            r.true_accuracy,
            r.predicted_accuracy,
            r.abs_error,
            r.signed_error
        );
    }
    out
}

pub fn summary_csv(cells: &[SummaryCell]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.condition,
            c.method,
            c.target,
            c.n,
            c.mae,
            c.std,
            c.mean_true_accuracy,
            c.mean_predicted_accuracy,
            c.mean_signed_error
        );
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `report.json`, `records.csv` and `summary.csv` into `dir`;
/// returns the file names written.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<String>, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        ("report.json", report_json(report)?),
        ("records.csv", records_csv(&report.records)),
        ("summary.csv", summary_csv(&report.summary)),
    ];
    for (name, text) in &files {
        write_text(&dir.join(name), text)?;
    }
    Ok(files.iter().map(|(n, _)| n.to_string()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    /// Half-height of the error bar; `None` draws no bar.
    pub err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Categorical tick labels at `x = 0, 1, ...`; numeric ticks otherwise.
    pub x_categories: Option<Vec<String>>,
    pub series: Vec<PlotSeries>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders `plot` as a standalone SVG document.
///
/// Markers are `<circle class="marker" data-x=.. data-y=..>`, error bars are
/// `<line class="errorbar" data-x=..>`, x ticks `<text class="xtick" data-x=..>`.
pub fn render_svg(plot: &Plot) -> Result<String, FormatError> {
    let points: Vec<&PlotPoint> = plot.series.iter().flat_map(|s| &s.points).collect();
    if points.is_empty() {
        return Err(FormatError::Csv("plot has no data points".into()));
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &points {
        if !(p.x.is_finite() && p.y.is_finite() && p.err.is_none_or(f64::is_finite)) {
            return Err(FormatError::Csv("plot points must be finite".into()));
        }
        let e = p.err.unwrap_or(0.0).abs();
        x_lo = x_lo.min(p.x);
        x_hi = x_hi.max(p.x);
        y_lo = y_lo.min(p.y - e);
        y_hi = y_hi.max(p.y + e);
    }
    let (x_lo, x_hi) = padded_range(x_lo, x_hi);
    let (y_lo, y_hi) = padded_range(y_lo, y_hi);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text class="title" x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&plot.title)
    );
    let (x0, y0) = (LEFT, TOP + plot_h);
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"#,
        LEFT + plot_w
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{x0:.2}" y1="{TOP:.2}" x2="{x0:.2}" y2="{y0:.2}" stroke="black"/>"#
    );

    let mut ticks: Vec<(f64, String)> = match &plot.x_categories {
        Some(cats) => cats.iter().enumerate().map(|(i, c)| (i as f64, c.clone())).collect(),
        None => points.iter().map(|p| (p.x, format!("{}", p.x))).collect(),
    };
    ticks.sort_by(|a, b| a.0.total_cmp(&b.0));
    ticks.dedup_by(|a, b| a.0 == b.0);
    for (x, label) in &ticks {
        let px = sx(*x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#,
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text class="xtick" data-x="{x}" x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 16.0,
            escape(label)
        );
    }
    for k in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text class="ytick" x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            x0 - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 18.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&plot.y_label)
    );

    for (k, series) in plot.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&series.label));
        if series.points.len() > 1 {
            let path: Vec<String> = series
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}"/>"#,
                path.join(" ")
            );
        }
        for p in &series.points {
            let (px, py) = (sx(p.x), sy(p.y));
            if let Some(e) = p.err {
                let e = e.abs();
                let _ = writeln!(
                    s,
                    r#"<line class="errorbar" data-x="{}" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{color}"/>"#,
                    p.x,
                    sy(p.y - e),
                    sy(p.y + e)
                );
            }
            let _ = writeln!(
                s,
                r#"<circle class="marker" data-x="{}" data-y="{}" cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"/>"#,
                p.x, p.y
            );
        }
        let ly = TOP + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            WIDTH - RIGHT + 12.0,
            ly + 4.0,
            escape(&series.label)
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(plot: &Plot, path: &Path) -> Result<(), FormatError> {
    write_text(path, &render_svg(plot)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_is_22_bytes() {
        let m = DenseMatrix::new(1, 1, vec![1.0f64]).unwrap();
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[..5], b"GEPB1");
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = DenseMatrix::<f64>::zeros(0, 0);
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(decode_matrix(&bytes).unwrap().shape(), (0, 0));
    }

    #[test]
    fn distinct_errors() {
        let m = DenseMatrix::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_matrix(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(FormatError::BadMagic)));

        let mut bad = good.clone();
        bad[5] = 2;
        assert!(matches!(decode_matrix(&bad), Err(FormatError::UnsupportedDtype(2))));

        let mut bad = good.clone();
        bad[20] ^= 0x40;
        assert!(matches!(decode_matrix(&bad), Err(FormatError::ChecksumMismatch { .. })));

        assert!(matches!(
            decode_matrix(&good[..good.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_matrix(&long),
            Err(FormatError::TrailingBytes { extra: 1 })
        ));
        assert!(matches!(decode_matrix(b"GEP"), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.push(1);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_matrix(&bytes), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        let crc = crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_matrix(&bytes),
            Err(FormatError::NonFinite { row: 0, col: 0 })
        ));
    }

    #[test]
    fn crc_reference_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn dataset_csv_header() {
        let d = LabeledDataset::new(DenseMatrix::from_rows(&[vec![0.5f64, -1.0]]).unwrap(), vec![1], 2, "x").unwrap();
        assert_eq!(dataset_csv_string(&d), "f0,f1,label\n0.5,-1,1\n");
        let back = parse_dataset_csv(&dataset_csv_string(&d), Some(2), "x").unwrap();
        assert_eq!(back, d);
        assert!(parse_dataset_csv("a,b\n1,2\n", None, "x").is_err());
    }

    #[test]
    fn svg_single_point() {
        let plot = Plot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_categories: None,
            series: vec![PlotSeries {
                label: "a<b".into(),
                points: vec![PlotPoint {
                    x: 1.0,
                    y: 0.5,
                    err: None,
                }],
            }],
        };
        let svg = render_svg(&plot).unwrap();
        assert_eq!(svg.matches("class=\"marker\"").count(), 1);
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg, render_svg(&plot).unwrap());
    }
}
