//! Report emission: scores CSV/JSON, RSF tables, SVG boxplot series, and
//! the run summary JSON.
//!
//! Everything written here is byte-deterministic for identical inputs and
//! configuration (the run summary's timestamp excepted). Numbers are
//! serialized with the shortest round-trip decimal form, and the CSV files
//! use exactly the same rendering as the JSON mirrors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ChipSet;
use crate::landscape::{self, Channel, Palette};
use crate::metrics::{BatchQuality, ChipQaSummary, FlagThresholds};
use crate::pipeline::PipelineOutput;
use crate::stats;

/// Fixed fill-color cycle for group coloring, reused in documented order.
pub const GROUP_PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

/// Shortest round-trip decimal rendering, shared by CSV and JSON outputs.
pub fn fmt_f64(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
    pub svg: bool,
    pub png: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats {
            csv: true,
            json: true,
            svg: true,
            png: true,
        }
    }
}

impl std::str::FromStr for Formats {
    type Err = Error;

    /// Comma-separated subset of csv,json,svg,png.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Formats {
            csv: false,
            json: false,
            svg: false,
            png: false,
        };
        for part in s.split(',').filter(|p| !p.is_empty()) {
            match part.trim() {
                "csv" => f.csv = true,
                "json" => f.json = true,
                "svg" => f.svg = true,
                "png" => f.png = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown format {other:?}; expected csv, json, svg, or png"
                    )))
                }
            }
        }
        Ok(f)
    }
}

struct BoxStats {
    median: f64,
    q1: f64,
    q3: f64,
    lo: f64,
    hi: f64,
    outliers: Vec<f64>,
}

fn box_stats(column: &[f64]) -> BoxStats {
    let mut sorted = column.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let q1 = stats::quantile_sorted(&sorted, 0.25);
    let q3 = stats::quantile_sorted(&sorted, 0.75);
    let median = stats::median(&sorted);
    let fence = 1.5 * (q3 - q1);
    let lo = sorted
        .iter()
        .copied()
        .find(|v| *v >= q1 - fence)
        .expect("nonempty column");
    let hi = sorted
        .iter()
        .rev()
        .copied()
        .find(|v| *v <= q3 + fence)
        .expect("nonempty column");
    let outliers = sorted
        .iter()
        .copied()
        .filter(|v| *v < lo || *v > hi)
        .collect();
    BoxStats {
        median,
        q1,
        q3,
        lo,
        hi,
        outliers,
    }
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One box per chip, in column order: median line, type-7 quartile box,
/// whiskers at the most extreme points within 1.5 IQR of the box, and
/// outlier dots beyond. Boxes are fill-colored by group key; each box group
/// carries its statistics as data attributes.
pub fn boxplot_series(
    matrix: ArrayView2<f64>,
    chip_names: &[String],
    group_keys: Option<&[String]>,
    title: &str,
) -> Result<String> {
    let (n_rows, n_chips) = matrix.dim();
    if n_rows == 0 || n_chips == 0 {
        return Err(Error::Shape("boxplot of an empty matrix".into()));
    }
    if chip_names.len() != n_chips {
        return Err(Error::Shape("one label per chip column required".into()));
    }
    if let Some(keys) = group_keys {
        if keys.len() != n_chips {
            return Err(Error::Shape("one group key per chip required".into()));
        }
    }

    let stats_per_chip: Vec<BoxStats> = (0..n_chips)
        .map(|i| box_stats(&matrix.column(i).to_vec()))
        .collect();

    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for v in matrix.iter() {
        ymin = ymin.min(*v);
        ymax = ymax.max(*v);
    }
    let pad = if ymax > ymin { 0.05 * (ymax - ymin) } else { 0.5 };
    ymin -= pad;
    ymax += pad;

    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 50.0;
    const BOTTOM: f64 = 90.0;
    const SLOT: f64 = 30.0;
    const PLOT_H: f64 = 300.0;
    let width = LEFT + SLOT * n_chips as f64 + RIGHT;
    let height = TOP + PLOT_H + BOTTOM;
    let y_of = |v: f64| TOP + (1.0 - (v - ymin) / (ymax - ymin)) * PLOT_H;

    // Group key -> palette color, keys colored in order of first appearance.
    let colors: Vec<&'static str> = match group_keys {
        None => vec![GROUP_PALETTE[0]; n_chips],
        Some(keys) => {
            let mut order: Vec<&str> = Vec::new();
            keys.iter()
                .map(|key| {
                    let pos = order.iter().position(|k| k == key).unwrap_or_else(|| {
                        order.push(key);
                        order.len() - 1
                    });
                    GROUP_PALETTE[pos % GROUP_PALETTE.len()]
                })
                .collect()
        }
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        px(width),
        px(height),
        px(width),
        px(height)
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="28" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        px(width / 2.0),
        xml_escape(title)
    );

    // Y axis with five ticks.
    let _ = writeln!(
        svg,
        r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#,
        l = px(LEFT),
        t = px(TOP),
        b = px(TOP + PLOT_H)
    );
    for k in 0..=4 {
        let v = ymin + (ymax - ymin) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#cccccc"/>"##,
            x0 = px(LEFT),
            x1 = px(width - RIGHT),
            y = px(y)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            x = px(LEFT - 6.0),
            y = px(y + 3.0)
        );
    }

    for (i, bs) in stats_per_chip.iter().enumerate() {
        let cx = LEFT + SLOT * (i as f64 + 0.5);
        let half = 9.0;
        let fill = colors[i];
        let _ = writeln!(
            svg,
            r#"<g data-chip="{}" data-median="{}" data-q1="{}" data-q3="{}" data-lo="{}" data-hi="{}">"#,
            xml_escape(&chip_names[i]),
            fmt_f64(bs.median),
            fmt_f64(bs.q1),
            fmt_f64(bs.q3),
            fmt_f64(bs.lo),
            fmt_f64(bs.hi)
        );
        // Whisker stem and caps.
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="black"/>"#,
            x = px(cx),
            y0 = px(y_of(bs.lo)),
            y1 = px(y_of(bs.hi))
        );
        for v in [bs.lo, bs.hi] {
            let _ = writeln!(
                svg,
                r#"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="black"/>"#,
                x0 = px(cx - half / 2.0),
                x1 = px(cx + half / 2.0),
                y = px(y_of(v))
            );
        }
        // Quartile box and median line.
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="{fill}" stroke="black"/>"#,
            x = px(cx - half),
            y = px(y_of(bs.q3)),
            w = px(2.0 * half),
            h = px((y_of(bs.q1) - y_of(bs.q3)).max(0.0)),
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="black" stroke-width="1.5"/>"#,
            x0 = px(cx - half),
            x1 = px(cx + half),
            y = px(y_of(bs.median))
        );
        for v in &bs.outliers {
            let _ = writeln!(
                svg,
                r#"<circle cx="{x}" cy="{y}" r="2" fill="none" stroke="black"/>"#,
                x = px(cx),
                y = px(y_of(*v))
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="9" text-anchor="end" transform="rotate(-60 {x} {y})">{name}</text>"#,
            x = px(cx),
            y = px(TOP + PLOT_H + 14.0),
            name = xml_escape(&chip_names[i])
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Snapshot of the run configuration, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub background: String,
    pub target: String,
    pub huber_k: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub thresholds: FlagThresholds,
    pub scale_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: String,
    pub rsf: f64,
    pub nrsf: Option<f64>,
    pub n_chips: usize,
    pub n_probesets: usize,
}

impl BatchRow {
    pub fn from_quality(b: &BatchQuality) -> BatchRow {
        BatchRow {
            batch: b.batch_name.clone(),
            rsf: b.rsf,
            nrsf: b.nrsf,
            n_chips: b.n_chips,
            n_probesets: b.residual_scales.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub created_utc: String,
    pub tool_version: String,
    pub config: ConfigEcho,
    pub chips: Vec<ChipQaSummary>,
    pub batches: Option<Vec<BatchRow>>,
    /// Emitted files, relative to the output directory.
    pub files: Vec<String>,
    pub caveats: Vec<String>,
}

impl RunReport {
    pub fn any_fail(&self) -> bool {
        self.chips.iter().any(|c| c.has_fail())
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub formats: Formats,
    /// Landscape channels to render; empty means no landscape PNGs.
    pub landscapes: Vec<Channel>,
    pub palette: Palette,
    pub scale: usize,
    /// One group key per chip for boxplot coloring.
    pub group_keys: Option<Vec<String>>,
    /// Also dump the full NUSE/RLE matrices as TSV.
    pub dump_matrices: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            formats: Formats::default(),
            landscapes: Vec::new(),
            palette: Palette::Color,
            scale: 1,
            group_keys: None,
            dump_matrices: false,
        }
    }
}

fn caveats() -> Vec<String> {
    [
        "RLE and NUSE comparisons assume most probesets are not differentially \
         expressed across the chips being compared.",
        "Med(RLE) reads as a technology bias only when up- and down-regulated \
         probesets are roughly balanced.",
        "Flag thresholds are heuristic defaults; review them against your chip \
         type and study design before acting on a flag.",
        "The scale factor is computed over all layout probes, not a curated \
         probeset selection.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub const SCORES_HEADER: &str =
    "chip,med_pm,iqr_pm,med_rle,iqr_rle,med_nuse,iqr_nuse,avg_background,scale_factor,flags";

fn scores_csv(output: &PipelineOutput) -> String {
    let mut csv = String::from(SCORES_HEADER);
    csv.push('\n');
    for (i, s) in output.summaries.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            s.chip_name,
            fmt_f64(s.med_pm),
            fmt_f64(s.iqr_pm),
            fmt_f64(s.med_rle),
            fmt_f64(s.iqr_rle),
            fmt_f64(s.med_nuse),
            fmt_f64(s.iqr_nuse),
            fmt_f64(output.avg_background[i]),
            fmt_f64(output.scale_factor[i]),
            s.flags_string(),
        );
    }
    csv
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    chip: &'a str,
    med_pm: f64,
    iqr_pm: f64,
    med_rle: f64,
    iqr_rle: f64,
    med_nuse: f64,
    iqr_nuse: f64,
    avg_background: f64,
    scale_factor: f64,
    flags: String,
}

fn scores_json(output: &PipelineOutput) -> Result<String> {
    let rows: Vec<ScoreRow> = output
        .summaries
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreRow {
            chip: &s.chip_name,
            med_pm: s.med_pm,
            iqr_pm: s.iqr_pm,
            med_rle: s.med_rle,
            iqr_rle: s.iqr_rle,
            med_nuse: s.med_nuse,
            iqr_nuse: s.iqr_nuse,
            avg_background: output.avg_background[i],
            scale_factor: output.scale_factor[i],
            flags: s.flags_string(),
        })
        .collect();
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    Ok(json)
}

fn rsf_csv(batches: &[BatchRow]) -> String {
    let mut csv = String::from("batch,rsf,nrsf,n_chips,n_probesets\n");
    for b in batches {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            b.batch,
            fmt_f64(b.rsf),
            b.nrsf.map(fmt_f64).unwrap_or_default(),
            b.n_chips,
            b.n_probesets
        );
    }
    csv
}

fn matrix_tsv(probeset_ids: &[String], chip_names: &[String], m: ArrayView2<f64>) -> String {
    let mut out = String::from("probeset");
    for name in chip_names {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (p, id) in probeset_ids.iter().enumerate() {
        out.push_str(id);
        for v in m.row(p) {
            out.push('\t');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

struct Emitter {
    out_dir: PathBuf,
    written: Vec<PathBuf>,
    files: Vec<String>,
}

impl Emitter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        self.files.push(name.to_string());
        Ok(())
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// Write all requested report artifacts into `out_dir` and return the run
/// summary. On any failure, files already written by this call are removed.
pub fn emit_report(
    chipset: &ChipSet,
    output: &PipelineOutput,
    batches: Option<&[BatchQuality]>,
    out_dir: &Path,
    opts: &ReportOptions,
    config: ConfigEcho,
) -> Result<RunReport> {
    fs::create_dir_all(out_dir)?;
    let mut em = Emitter {
        out_dir: out_dir.to_path_buf(),
        written: Vec::new(),
        files: Vec::new(),
    };
    let batch_rows: Option<Vec<BatchRow>> =
        batches.map(|bs| bs.iter().map(BatchRow::from_quality).collect());

    let result = (|| -> Result<()> {
        if opts.formats.csv {
            em.write("scores.csv", scores_csv(output).as_bytes())?;
            if let Some(rows) = &batch_rows {
                em.write("rsf.csv", rsf_csv(rows).as_bytes())?;
            }
        }
        if opts.formats.json {
            em.write("scores.json", scores_json(output)?.as_bytes())?;
        }
        if opts.formats.svg {
            let keys = opts.group_keys.as_deref();
            let pm = boxplot_series(
                output.pm_log2.values().t(),
                &output.chip_names,
                keys,
                "log2(PM) distribution per chip",
            )?;
            em.write("pm_boxplot.svg", pm.as_bytes())?;
            let rle = boxplot_series(
                output.qa.rle.view(),
                &output.chip_names,
                keys,
                "RLE distribution per chip",
            )?;
            em.write("rle_boxplot.svg", rle.as_bytes())?;
            let nuse = boxplot_series(
                output.qa.nuse.view(),
                &output.chip_names,
                keys,
                "NUSE distribution per chip",
            )?;
            em.write("nuse_boxplot.svg", nuse.as_bytes())?;
        }
        if opts.dump_matrices {
            em.write(
                "nuse.tsv",
                matrix_tsv(&output.qa.probeset_ids, &output.chip_names, output.qa.nuse.view())
                    .as_bytes(),
            )?;
            em.write(
                "rle.tsv",
                matrix_tsv(&output.qa.probeset_ids, &output.chip_names, output.qa.rle.view())
                    .as_bytes(),
            )?;
        }
        if opts.formats.png && !opts.landscapes.is_empty() {
            for chip in &output.chip_names {
                for channel in &opts.landscapes {
                    let l =
                        landscape::build_landscape(&output.plm, &chipset.layout, chip, *channel)?;
                    let png = landscape::render(&l, opts.palette, opts.scale)?;
                    em.write(&format!("{chip}_{}.png", channel.label()), &png)?;
                }
            }
        }
        Ok(())
    })();

    if let Err(e) = result {
        em.cleanup();
        return Err(e);
    }

    let report = RunReport {
        created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        chips: output.summaries.clone(),
        batches: batch_rows,
        files: {
            let mut f = em.files.clone();
            f.push("report.json".to_string());
            f
        },
        caveats: caveats(),
    };
    let mut json = match serde_json::to_string_pretty(&report) {
        Ok(j) => j,
        Err(e) => {
            em.cleanup();
            return Err(e.into());
        }
    };
    json.push('\n');
    if let Err(e) = em.write("report.json", json.as_bytes()) {
        em.cleanup();
        return Err(e);
    }
    Ok(report)
}
