//! Background adjustment, quantile normalization, and log2 transform.
//!
//! Pipeline order is background adjustment, then quantile normalization on
//! the linear scale, then log2. Normalizing a chip set against its own
//! target makes every chip share one value distribution exactly.

use ndarray::Array2;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::IntensityMatrix;
use crate::stats;

/// Floor applied after background subtraction so values stay positive.
pub const BACKGROUND_FLOOR: f64 = 1.0 / ((1u64 << 20) as f64); // 2^-20

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BackgroundMethod {
    None,
    Offset { c: f64 },
}

impl BackgroundMethod {
    fn validate(&self) -> Result<()> {
        match self {
            BackgroundMethod::None => Ok(()),
            BackgroundMethod::Offset { c } if *c >= 0.0 && c.is_finite() => Ok(()),
            BackgroundMethod::Offset { c } => Err(Error::Config(format!(
                "background offset must be a nonnegative finite number, got {c}"
            ))),
        }
    }
}

impl FromStr for BackgroundMethod {
    type Err = Error;

    /// Accepts `none` or `offset:<c>` (the CLI syntax).
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(BackgroundMethod::None);
        }
        if let Some(c) = s.strip_prefix("offset:") {
            let c: f64 = c
                .parse()
                .map_err(|_| Error::Config(format!("bad background offset {c:?}")))?;
            let m = BackgroundMethod::Offset { c };
            m.validate()?;
            return Ok(m);
        }
        Err(Error::Config(format!(
            "unknown background method {s:?}; expected none or offset:<c>"
        )))
    }
}

impl std::fmt::Display for BackgroundMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackgroundMethod::None => write!(f, "none"),
            BackgroundMethod::Offset { c } => write!(f, "offset:{c}"),
        }
    }
}

pub fn background_adjust(raw: &IntensityMatrix, method: BackgroundMethod) -> Result<IntensityMatrix> {
    method.validate()?;
    match method {
        BackgroundMethod::None => Ok(raw.clone()),
        BackgroundMethod::Offset { c } => {
            let values = raw.values().mapv(|v| (v - c).max(BACKGROUND_FLOOR));
            IntensityMatrix::new(raw.chip_names().to_vec(), values)
        }
    }
}

/// The shared intensity distribution all chips are normalized to:
/// a nondecreasing, strictly positive vector, one entry per probe rank.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTarget(Vec<f64>);

impl QuantileTarget {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("QuantileTarget"));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::BadInput("quantile target".into()));
        }
        if values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("quantile target must be nondecreasing".into()));
        }
        Ok(QuantileTarget(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One decimal value per line; `#` comments allowed.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            values.push(line.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("cannot parse target value from {line:?}"),
            })?);
        }
        QuantileTarget::new(values)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for v in &self.0 {
            out.push_str(&format!("{v}\n"));
        }
        out
    }
}

/// Rank-wise mean of the per-chip order statistics.
pub fn compute_target(raw: &IntensityMatrix) -> Result<QuantileTarget> {
    let rows: Vec<&[f64]> = raw
        .values()
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major matrix"))
        .collect::<Vec<_>>();
    target_from_rows(&rows)
}

/// Target computation over raw chip rows that need not share an
/// `IntensityMatrix` (used when pooling chips across batches).
pub fn target_from_rows(rows: &[&[f64]]) -> Result<QuantileTarget> {
    if rows.is_empty() {
        return Err(Error::Shape("target needs at least one chip".into()));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("chips differ in probe count".into()));
    }
    let mut acc = vec![0.0f64; n];
    for row in rows {
        let mut sorted = row.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        for (a, v) in acc.iter_mut().zip(&sorted) {
            *a += v;
        }
    }
    let k = rows.len() as f64;
    QuantileTarget::new(acc.into_iter().map(|a| a / k).collect())
}

/// Log2-scale intensities, chips x probes, aligned to the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    chip_names: Vec<String>,
    values: Array2<f64>,
}

impl NormalizedMatrix {
    pub fn new(chip_names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if chip_names.len() != values.nrows() {
            return Err(Error::Shape("chip name count != matrix rows".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::BadInput(format!("normalized value {v}")));
        }
        Ok(NormalizedMatrix { chip_names, values })
    }

    pub fn chip_names(&self) -> &[String] {
        &self.chip_names
    }

    pub fn n_chips(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_probes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn chip_index(&self, name: &str) -> Option<usize> {
        self.chip_names.iter().position(|n| n == name)
    }
}

/// Plain log2 of a linear-scale matrix, without rank replacement. Used for
/// the PM distribution summaries, which describe intensities before
/// normalization forces them to a common distribution.
pub fn log2_matrix(raw: &IntensityMatrix) -> NormalizedMatrix {
    NormalizedMatrix {
        chip_names: raw.chip_names().to_vec(),
        values: raw.values().mapv(f64::log2),
    }
}

fn normalize_row(row: &[f64], target: &[f64]) -> Vec<f64> {
    let n = row.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| row[a].total_cmp(&row[b]));

    let mut out = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && row[order[j]] == row[order[i]] {
            j += 1;
        }
        // Ties share the mean of the target entries over the tied rank span.
        let t = stats::mean(&target[i..j]);
        let log_t = t.log2();
        for &idx in &order[i..j] {
            out[idx] = log_t;
        }
        i = j;
    }
    out
}

/// Replace each chip's values by the target quantiles, rank for rank, then
/// take log2.
pub fn quantile_normalize(
    raw: &IntensityMatrix,
    target: &QuantileTarget,
) -> Result<NormalizedMatrix> {
    if target.len() != raw.n_probes() {
        return Err(Error::Shape(format!(
            "target has {} entries for {} probes",
            target.len(),
            raw.n_probes()
        )));
    }
    let rows: Vec<&[f64]> = raw
        .values()
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major matrix"))
        .collect();

    #[cfg(feature = "parallel")]
    let normalized: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        rows.par_iter()
            .map(|row| normalize_row(row, target.values()))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let normalized: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| normalize_row(row, target.values()))
        .collect();

    let mut values = Array2::zeros((raw.n_chips(), raw.n_probes()));
    for (i, row) in normalized.into_iter().enumerate() {
        values
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(row.as_slice()));
    }
    NormalizedMatrix::new(raw.chip_names().to_vec(), values)
}
