//! Parsing and validation of chip layouts, intensity files, and run manifests.
//!
//! All inputs are line-oriented UTF-8 TSV; lines starting with `#` are
//! comments. The layout fixes the canonical probe order used by every
//! downstream matrix: probes sorted by (probeset_id, probe_rank), so the
//! column order of all matrices is deterministic regardless of file order.
//!
//! Layout file: first line `rows=<R>\tcols=<C>`, then one row per probe
//! `probeset_id\tprobe_rank\tx\ty`. Chip file: rows `x\ty\tintensity`.
//! Manifest: one `layout\t<path>` row plus `chip\t<name>\t<path>[\t<batch>]`
//! rows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub probeset_id: String,
    pub probe_rank: usize,
    pub x: usize,
    pub y: usize,
}

/// Chip geometry plus the probe -> probeset / probe -> grid-cell maps.
#[derive(Debug, Clone)]
pub struct ChipLayout {
    rows: usize,
    cols: usize,
    probes: Vec<Probe>,
    spans: Vec<(String, Range<usize>)>,
    by_coord: HashMap<(usize, usize), usize>,
}

impl PartialEq for ChipLayout {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.probes == other.probes
    }
}

impl ChipLayout {
    /// Validate and index a probe list. Probes may arrive in any order;
    /// they are sorted into the canonical (probeset_id, probe_rank) order.
    pub fn new(rows: usize, cols: usize, mut probes: Vec<Probe>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("grid must have positive dimensions".into()));
        }
        probes.sort_by(|a, b| {
            (a.probeset_id.as_str(), a.probe_rank).cmp(&(b.probeset_id.as_str(), b.probe_rank))
        });

        let mut by_coord = HashMap::with_capacity(probes.len());
        for (idx, p) in probes.iter().enumerate() {
            if p.probeset_id.is_empty() {
                return Err(Error::Config("empty probeset_id".into()));
            }
            if p.x >= cols || p.y >= rows {
                return Err(Error::CoordinateOutOfRange {
                    x: p.x,
                    y: p.y,
                    rows,
                    cols,
                });
            }
            if by_coord.insert((p.x, p.y), idx).is_some() {
                return Err(Error::DuplicateCoordinate { x: p.x, y: p.y });
            }
        }

        let mut spans: Vec<(String, Range<usize>)> = Vec::new();
        let mut start = 0;
        while start < probes.len() {
            let id = &probes[start].probeset_id;
            let mut end = start;
            while end < probes.len() && probes[end].probeset_id == *id {
                end += 1;
            }
            let k = end - start;
            if k < 2 {
                return Err(Error::ProbesetTooSmall { id: id.clone(), n: k });
            }
            for (rank, p) in probes[start..end].iter().enumerate() {
                if p.probe_rank != rank {
                    return Err(Error::BadProbeRank { id: id.clone() });
                }
            }
            spans.push((id.clone(), start..end));
            start = end;
        }

        Ok(ChipLayout {
            rows,
            cols,
            probes,
            spans,
            by_coord,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn n_probes(&self) -> usize {
        self.probes.len()
    }

    pub fn n_probesets(&self) -> usize {
        self.spans.len()
    }

    /// Probeset ids with their contiguous column ranges, in canonical order.
    pub fn probesets(&self) -> &[(String, Range<usize>)] {
        &self.spans
    }

    /// Canonical column index of the probe at grid cell (x, y), if any.
    pub fn column_of(&self, x: usize, y: usize) -> Option<usize> {
        self.by_coord.get(&(x, y)).copied()
    }

    /// Serialize to the layout TSV format; `parse_layout` inverts this.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rows={}\tcols={}", self.rows, self.cols);
        for p in &self.probes {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", p.probeset_id, p.probe_rank, p.x, p.y);
        }
        out
    }
}

/// Raw PM intensities, chips x probes, columns aligned to a `ChipLayout`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMatrix {
    chip_names: Vec<String>,
    values: Array2<f64>,
}

impl IntensityMatrix {
    pub fn new(chip_names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if chip_names.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} chip names for {} matrix rows",
                chip_names.len(),
                values.nrows()
            )));
        }
        let mut seen = HashMap::new();
        for (i, name) in chip_names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), i) {
                return Err(Error::Config(format!(
                    "duplicate chip name {name} (rows {prev} and {i})"
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::BadInput(format!("intensity {v}")));
        }
        Ok(IntensityMatrix { chip_names, values })
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

/// A layout together with the aligned raw intensities and optional batch labels.
#[derive(Debug, Clone)]
pub struct ChipSet {
    pub layout: ChipLayout,
    pub raw: IntensityMatrix,
    /// One batch name per chip, aligned with `raw.chip_names()`.
    pub batch_labels: Option<Vec<String>>,
}

impl ChipSet {
    pub fn new(
        layout: ChipLayout,
        raw: IntensityMatrix,
        batch_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if raw.n_probes() != layout.n_probes() {
            return Err(Error::Shape(format!(
                "matrix has {} probe columns, layout has {} probes",
                raw.n_probes(),
                layout.n_probes()
            )));
        }
        if let Some(labels) = &batch_labels {
            if labels.len() != raw.n_chips() {
                return Err(Error::Config(
                    "batch labels, when present, must cover every chip".into(),
                ));
            }
        }
        Ok(ChipSet {
            layout,
            raw,
            batch_labels,
        })
    }

    pub fn n_chips(&self) -> usize {
        self.raw.n_chips()
    }

    /// Split into per-batch chip sets, batches in order of first appearance.
    /// Errors when the set carries no batch labels.
    pub fn split_batches(&self) -> Result<Vec<(String, ChipSet)>> {
        let labels = self
            .batch_labels
            .as_ref()
            .ok_or_else(|| Error::Config("manifest has no batch labels".into()))?;
        let mut order: Vec<&String> = Vec::new();
        for label in labels {
            if !order.contains(&label) {
                order.push(label);
            }
        }
        let mut out = Vec::with_capacity(order.len());
        for batch in order {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| *l == batch)
                .map(|(i, _)| i)
                .collect();
            let names: Vec<String> = idx
                .iter()
                .map(|&i| self.raw.chip_names()[i].clone())
                .collect();
            let mut values = Array2::zeros((idx.len(), self.raw.n_probes()));
            for (r, &i) in idx.iter().enumerate() {
                values.row_mut(r).assign(&self.raw.values().row(i));
            }
            out.push((
                batch.clone(),
                ChipSet::new(self.layout.clone(), IntensityMatrix::new(names, values)?, None)?,
            ));
        }
        Ok(out)
    }
}

/// Iterator over (1-based line number, content) skipping comments and blanks.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {field:?}"),
    })
}

pub fn parse_layout(text: &str) -> Result<ChipLayout> {
    let mut lines = data_lines(text);
    let (line, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 0, msg: "empty layout file".into() })?;

    let mut rows = None;
    let mut cols = None;
    for field in header.split('\t') {
        if let Some(v) = field.strip_prefix("rows=") {
            rows = Some(parse_field::<usize>(v, line, "rows")?);
        } else if let Some(v) = field.strip_prefix("cols=") {
            cols = Some(parse_field::<usize>(v, line, "cols")?);
        }
    }
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) => (r, c),
        _ => {
            return Err(Error::Parse {
                line,
                msg: "layout header must be rows=<R>\\tcols=<C>".into(),
            })
        }
    };

    let mut probes = Vec::new();
    for (line, content) in lines {
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let probeset_id = fields[0].trim().to_string();
        if probeset_id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty probeset_id".into(),
            });
        }
        probes.push(Probe {
            probeset_id,
            probe_rank: parse_field(fields[1], line, "probe_rank")?,
            x: parse_field(fields[2], line, "x")?,
            y: parse_field(fields[3], line, "y")?,
        });
    }
    ChipLayout::new(rows, cols, probes)
}

/// Parse one chip intensity file and align it to the layout probe order.
pub fn parse_chip(text: &str, layout: &ChipLayout) -> Result<Vec<f64>> {
    parse_chip_opts(text, layout, false)
}

/// As `parse_chip`; with `ignore_unmapped` set, coordinates not present in
/// the layout are skipped instead of rejected.
pub fn parse_chip_opts(text: &str, layout: &ChipLayout, ignore_unmapped: bool) -> Result<Vec<f64>> {
    let mut values: Vec<Option<f64>> = vec![None; layout.n_probes()];
    for (line, content) in data_lines(text) {
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let x: usize = parse_field(fields[0], line, "x")?;
        let y: usize = parse_field(fields[1], line, "y")?;
        let v: f64 = parse_field(fields[2], line, "intensity")?;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::BadIntensity { x, y, value: v });
        }
        match layout.column_of(x, y) {
            Some(col) => {
                if values[col].is_some() {
                    return Err(Error::DuplicateCell { x, y });
                }
                values[col] = Some(v);
            }
            None if ignore_unmapped => {}
            None => return Err(Error::UnknownCoordinate { x, y }),
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(col, v)| {
            v.ok_or_else(|| {
                let p = &layout.probes()[col];
                Error::MissingProbe { x: p.x, y: p.y }
            })
        })
        .collect()
}

/// Serialize a chip intensity vector (layout order) back to chip TSV.
pub fn write_chip_tsv(layout: &ChipLayout, values: &[f64]) -> String {
    let mut out = String::new();
    for (p, v) in layout.probes().iter().zip(values) {
        let _ = writeln!(out, "{}\t{}\t{}", p.x, p.y, v);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestChip {
    pub name: String,
    pub path: String,
    pub batch: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub layout_path: String,
    pub chips: Vec<ManifestChip>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "layout\t{}", self.layout_path);
        for c in &self.chips {
            match &c.batch {
                Some(b) => {
                    let _ = writeln!(out, "chip\t{}\t{}\t{}", c.name, c.path, b);
                }
                None => {
                    let _ = writeln!(out, "chip\t{}\t{}", c.name, c.path);
                }
            }
        }
        out
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut layout_path: Option<String> = None;
    let mut chips: Vec<ManifestChip> = Vec::new();
    for (line, content) in data_lines(text) {
        let fields: Vec<&str> = content.split('\t').collect();
        match fields[0].trim() {
            "layout" => {
                if fields.len() != 2 {
                    return Err(Error::Parse {
                        line,
                        msg: "layout row must be layout\\t<path>".into(),
                    });
                }
                if layout_path.replace(fields[1].trim().to_string()).is_some() {
                    return Err(Error::Parse {
                        line,
                        msg: "multiple layout rows".into(),
                    });
                }
            }
            "chip" => {
                if fields.len() != 3 && fields.len() != 4 {
                    return Err(Error::Parse {
                        line,
                        msg: "chip row must be chip\\t<name>\\t<path>[\\t<batch>]".into(),
                    });
                }
                let name = fields[1].trim().to_string();
                if name.is_empty() {
                    return Err(Error::Parse {
                        line,
                        msg: "empty chip name".into(),
                    });
                }
                if chips.iter().any(|c| c.name == name) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("duplicate chip name {name}"),
                    });
                }
                chips.push(ManifestChip {
                    name,
                    path: fields[2].trim().to_string(),
                    batch: fields.get(3).map(|b| b.trim().to_string()),
                });
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown manifest row kind {other:?}"),
                })
            }
        }
    }
    let layout_path = layout_path.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "manifest has no layout row".into(),
    })?;
    let with_batch = chips.iter().filter(|c| c.batch.is_some()).count();
    if with_batch != 0 && with_batch != chips.len() {
        return Err(Error::Config(
            "batch labels, when present, must cover every chip".into(),
        ));
    }
    Ok(Manifest { layout_path, chips })
}

/// Load a full chip set from a manifest. `file_reader` maps a manifest path
/// to file contents, so callers control filesystem layout (and tests can
/// feed strings). Any parse failure is wrapped with the offending file name.
pub fn load_chipset(
    manifest_text: &str,
    mut file_reader: impl FnMut(&str) -> std::io::Result<String>,
    ignore_unmapped: bool,
) -> Result<ChipSet> {
    let manifest = parse_manifest(manifest_text)?;
    if manifest.chips.len() < 2 {
        return Err(Error::NotEnoughChips {
            n: manifest.chips.len(),
        });
    }

    let layout_text = file_reader(&manifest.layout_path)
        .map_err(|e| Error::from(e).in_file(&manifest.layout_path))?;
    let layout = parse_layout(&layout_text).map_err(|e| e.in_file(&manifest.layout_path))?;

    let mut values = Array2::zeros((manifest.chips.len(), layout.n_probes()));
    let mut names = Vec::with_capacity(manifest.chips.len());
    for (i, chip) in manifest.chips.iter().enumerate() {
        let text = file_reader(&chip.path).map_err(|e| Error::from(e).in_file(&chip.path))?;
        let v = parse_chip_opts(&text, &layout, ignore_unmapped)
            .map_err(|e| e.in_file(&chip.path))?;
        values
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(v.as_slice()));
        names.push(chip.name.clone());
    }

    let batch_labels = if manifest.chips[0].batch.is_some() {
        Some(
            manifest
                .chips
                .iter()
                .map(|c| c.batch.clone().expect("coverage checked in parse_manifest"))
                .collect(),
        )
    } else {
        None
    };

    ChipSet::new(layout, IntensityMatrix::new(names, values)?, batch_labels)
}
