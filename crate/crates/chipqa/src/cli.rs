//! Command-line interface: `chipqa run`, `chipqa synth`, and `chipqa rsf`.
//!
//! Exit codes: 0 on success, 1 on any error, 2 when the run completed but
//! at least one chip carries a fail flag (so pipelines can gate on quality).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::ingest::{self, ChipSet, Manifest, ManifestChip};
use crate::landscape::{Channel, Palette};
use crate::metrics::FlagThresholds;
use crate::pipeline::{self, RunConfig};
use crate::plm::FitConfig;
use crate::preprocess::QuantileTarget;
use crate::report::{self, ConfigEcho, Formats, ReportOptions};
use crate::synthgen::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "chipqa", version, about = "Microarray chip quality assessment")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the QA pipeline on a manifest and write reports
    Run(RunArgs),
    /// Generate a synthetic chip set from a spec file
    Synth(SynthArgs),
    /// Compute residual scale factors for the manifest's batches
    Rsf(RsfArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Huber tuning constant
    #[arg(long, default_value_t = 1.345)]
    huber_k: f64,
    /// Convergence tolerance on the largest parameter change
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Iteration cap for the reweighted fit
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Background adjustment: none or offset:<c>
    #[arg(long, default_value = "none")]
    background: String,
}

impl FitArgs {
    fn config(&self, thresholds: FlagThresholds) -> Result<RunConfig> {
        Ok(RunConfig {
            background: self.background.parse()?,
            fit: FitConfig {
                huber_k: self.huber_k,
                tol: self.tol,
                max_iter: self.max_iter,
            },
            thresholds,
            scale_constant: 500.0,
        })
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (layout + chip files, optional batch labels)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for reports
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated output families: csv,json,svg,png
    #[arg(long, default_value = "csv,json,svg,png")]
    formats: String,
    /// TSV of chip\tgroup-key pairs for boxplot coloring
    #[arg(long)]
    color_by: Option<PathBuf>,
    /// key=value file overriding the default flag thresholds
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Quantile target: self, or a path to a saved target TSV
    #[arg(long, default_value = "self")]
    target: String,
    /// Landscape channels to render: weights,pos,neg,signed
    #[arg(long, value_delimiter = ',')]
    landscapes: Vec<String>,
    /// Landscape palette: color or gray
    #[arg(long, default_value = "color")]
    palette: String,
    /// Integer upscaling for landscape pixels
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Skip intensity rows whose coordinates are not in the layout
    #[arg(long)]
    ignore_unmapped: bool,
    /// Also dump the full NUSE/RLE matrices as TSV
    #[arg(long)]
    matrices: bool,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic chip-set spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for layout, chips, manifest, and ground truth
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RsfArgs {
    /// Run manifest; every chip row must carry a batch label
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for rsf.csv
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path.display().to_string()))
}

/// Manifest paths resolve relative to the manifest's own directory.
fn load_manifest_chipset(manifest_path: &Path, ignore_unmapped: bool) -> Result<ChipSet> {
    let text = read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    ingest::load_chipset(
        &text,
        |name| fs::read_to_string(base.join(name)),
        ignore_unmapped,
    )
}

/// `key = value` lines, `#` comments allowed; unknown keys are errors.
fn parse_thresholds(text: &str) -> Result<FlagThresholds> {
    let mut t = FlagThresholds::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        let value: f64 = value.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("cannot parse number from {:?}", value.trim()),
        })?;
        match key.trim() {
            "nuse_warn" => t.nuse_warn = value,
            "nuse_fail" => t.nuse_fail = value,
            "rle_med_warn" => t.rle_med_warn = value,
            "rle_med_fail" => t.rle_med_fail = value,
            "rle_iqr_factor" => t.rle_iqr_factor = value,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown threshold key {other:?}"),
                })
            }
        }
    }
    Ok(t)
}

/// chip\tkey rows; every chip in the run must be listed.
fn parse_color_by(text: &str, chip_names: &[String]) -> Result<Vec<String>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (chip, key) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected chip\\tkey".into(),
        })?;
        map.insert(chip.trim().to_string(), key.trim().to_string());
    }
    chip_names
        .iter()
        .map(|name| {
            map.get(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("color-by file has no key for chip {name}")))
        })
        .collect()
}

fn run_command(args: &RunArgs) -> Result<i32> {
    let chipset = load_manifest_chipset(&args.manifest, args.ignore_unmapped)?;

    let thresholds = match &args.thresholds {
        Some(path) => parse_thresholds(&read_to_string(path)?)?,
        None => FlagThresholds::default(),
    };
    let config = args.fit.config(thresholds)?;

    let target = match args.target.as_str() {
        "self" => None,
        path => Some(
            QuantileTarget::from_tsv(&read_to_string(Path::new(path))?)
                .map_err(|e| e.in_file(path))?,
        ),
    };

    let output = pipeline::run_pipeline(&chipset, target.as_ref(), &config)?;

    let group_keys = match &args.color_by {
        Some(path) => Some(parse_color_by(
            &read_to_string(path)?,
            &output.chip_names,
        )?),
        None => chipset.batch_labels.clone(),
    };

    let landscapes: Vec<Channel> = args
        .landscapes
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let palette: Palette = args.palette.parse()?;
    let opts = ReportOptions {
        formats: args.formats.parse::<Formats>()?,
        landscapes,
        palette,
        scale: args.scale,
        group_keys,
        dump_matrices: args.matrices,
    };
    let echo = ConfigEcho {
        background: config.background.to_string(),
        target: args.target.clone(),
        huber_k: config.fit.huber_k,
        tol: config.fit.tol,
        max_iter: config.fit.max_iter,
        thresholds: config.thresholds,
        scale_constant: config.scale_constant,
    };

    let report = report::emit_report(&chipset, &output, None, &args.out, &opts, echo)?;

    for chip in &report.chips {
        let flags = chip.flags_string();
        println!(
            "{}\tmed_nuse={:.4}\tmed_rle={:+.4}\t{}",
            chip.chip_name,
            chip.med_nuse,
            chip.med_rle,
            if flags.is_empty() { "ok" } else { &flags }
        );
    }
    println!("report written to {}", args.out.display());

    Ok(if report.any_fail() { 2 } else { 0 })
}

fn synth_command(args: &SynthArgs) -> Result<i32> {
    let spec: SynthSpec = serde_json::from_str(&read_to_string(&args.spec)?)
        .map_err(|e| Error::Config(format!("{}: {e}", args.spec.display())))?;
    let (chipset, truth) = synthgen::generate(&spec)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("layout.tsv"), chipset.layout.to_tsv())?;

    let mut manifest_chips = Vec::new();
    for (i, name) in chipset.raw.chip_names().iter().enumerate() {
        let file = format!("{name}.tsv");
        let values: Vec<f64> = chipset.raw.values().row(i).to_vec();
        fs::write(
            args.out.join(&file),
            ingest::write_chip_tsv(&chipset.layout, &values),
        )?;
        manifest_chips.push(ManifestChip {
            name: name.clone(),
            path: file,
            batch: None,
        });
    }
    let manifest = Manifest {
        layout_path: "layout.tsv".into(),
        chips: manifest_chips,
    };
    fs::write(args.out.join("manifest.tsv"), manifest.to_tsv())?;

    let mut truth_json = serde_json::to_string_pretty(&truth)?;
    truth_json.push('\n');
    fs::write(args.out.join("ground_truth.json"), truth_json)?;

    println!(
        "wrote {} chips ({} probesets x {} probes) to {}",
        spec.n_chips,
        spec.n_probesets,
        spec.probes_per_set,
        args.out.display()
    );
    Ok(0)
}

fn rsf_command(args: &RsfArgs) -> Result<i32> {
    let chipset = load_manifest_chipset(&args.manifest, false)?;
    let config = args.fit.config(FlagThresholds::default())?;
    let batches = pipeline::run_batches(&chipset, &config)?;

    fs::create_dir_all(&args.out)?;
    let rows: Vec<report::BatchRow> = batches.iter().map(report::BatchRow::from_quality).collect();
    let mut csv = String::from("batch,rsf,nrsf,n_chips,n_probesets\n");
    for b in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            b.batch,
            report::fmt_f64(b.rsf),
            b.nrsf.map(report::fmt_f64).unwrap_or_default(),
            b.n_chips,
            b.n_probesets
        ));
    }
    fs::write(args.out.join("rsf.csv"), csv)?;

    for b in &rows {
        match b.nrsf {
            Some(nrsf) => println!("{}\trsf={:.5}\tnrsf={:.5}", b.batch, b.rsf, nrsf),
            None => println!("{}\trsf={:.5}", b.batch, b.rsf),
        }
    }
    Ok(0)
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path too.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run_command(args),
        Command::Synth(args) => synth_command(args),
        Command::Rsf(args) => rsf_command(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}
