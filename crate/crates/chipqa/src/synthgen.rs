//! Seeded synthetic chip sets drawn from the additive log2 model, with
//! injected spatial and global artifacts, for tests and acceptance runs.
//!
//! The biological signal is held constant across chips (each probeset keeps
//! one expression level), so any NUSE/RLE deviation the pipeline reports is
//! attributable to the injected defects. The generator is deterministic:
//! one ChaCha8 stream seeded from `spec.seed` drives, in order, the grid
//! shuffle, the probeset expressions, the affinities, and the per-chip
//! noise.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ChipLayout, ChipSet, IntensityMatrix, Probe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_probesets: usize,
    pub probes_per_set: usize,
    pub n_chips: usize,
    /// Probeset expression range, log2 units.
    pub mu_range: (f64, f64),
    /// Probe affinity spread, log2 units.
    pub alpha_sd: f64,
    /// Per-chip noise scale, log2 units; length must equal `n_chips`.
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    /// Index of the chip the artifact applies to.
    pub chip: usize,
    #[serde(flatten)]
    pub kind: ArtifactKind,
}

/// Defect shapes observed on real chips: dust/bubble discs, scratch lines,
/// corner regions, whole-chip intensity bias, and inflated noise.
/// The `delta` shifts are in log2 units, applied before exponentiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactKind {
    Disc {
        center: (f64, f64),
        radius: f64,
        delta: f64,
    },
    Line {
        from: (f64, f64),
        to: (f64, f64),
        width: f64,
        delta: f64,
    },
    Corner {
        size: usize,
        delta: f64,
    },
    GlobalBias {
        delta: f64,
    },
    NoiseScale {
        factor: f64,
    },
}

/// Everything the generator drew, for oracle checks against pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub rows: usize,
    pub cols: usize,
    pub probeset_ids: Vec<String>,
    /// Per-probeset expression, shared by every chip.
    pub mu: Vec<f64>,
    /// Per-probeset, per-probe affinities (zero-sum within each probeset).
    pub alpha: Vec<Vec<f64>>,
    /// Effective per-chip noise scale after `noise_scale` artifacts.
    pub chip_sigma: Vec<f64>,
    /// Per artifact, the probe cells it covers, sorted by (x, y).
    pub artifact_masks: Vec<Vec<(usize, usize)>>,
}

fn grid_dims(n_probes: usize) -> (usize, usize) {
    let cols = (n_probes as f64).sqrt().ceil() as usize;
    let rows = n_probes.div_ceil(cols);
    (rows, cols)
}

fn validate(spec: &SynthSpec, rows: usize, cols: usize) -> Result<()> {
    if spec.n_probesets < 2 || spec.probes_per_set < 2 || spec.n_chips < 2 {
        return Err(Error::Config(
            "n_probesets, probes_per_set, and n_chips must all be at least 2".into(),
        ));
    }
    if spec.sigma.len() != spec.n_chips {
        return Err(Error::Config(format!(
            "sigma has {} entries for {} chips",
            spec.sigma.len(),
            spec.n_chips
        )));
    }
    if spec.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config("sigma entries must be nonnegative".into()));
    }
    if !(spec.mu_range.0 <= spec.mu_range.1) {
        return Err(Error::Config("mu_range must be nondecreasing".into()));
    }
    if !(spec.alpha_sd >= 0.0) {
        return Err(Error::Config("alpha_sd must be nonnegative".into()));
    }
    for (i, a) in spec.artifacts.iter().enumerate() {
        if a.chip >= spec.n_chips {
            return Err(Error::BadArtifact(format!(
                "artifact {i} targets chip {} of {}",
                a.chip, spec.n_chips
            )));
        }
        let in_grid = |p: (f64, f64)| {
            p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (cols - 1) as f64 && p.1 <= (rows - 1) as f64
        };
        match &a.kind {
            ArtifactKind::Disc { center, radius, delta } => {
                if !in_grid(*center) {
                    return Err(Error::BadArtifact(format!(
                        "artifact {i}: disc center {center:?} outside {rows}x{cols} grid"
                    )));
                }
                if !(*radius >= 0.0) || !delta.is_finite() {
                    return Err(Error::BadArtifact(format!("artifact {i}: bad disc parameters")));
                }
            }
            ArtifactKind::Line { from, to, width, delta } => {
                if !in_grid(*from) || !in_grid(*to) {
                    return Err(Error::BadArtifact(format!(
                        "artifact {i}: line endpoints outside {rows}x{cols} grid"
                    )));
                }
                if !(*width >= 0.0) || !delta.is_finite() {
                    return Err(Error::BadArtifact(format!("artifact {i}: bad line parameters")));
                }
            }
            ArtifactKind::Corner { size, delta } => {
                if *size == 0 || *size > rows || *size > cols {
                    return Err(Error::BadArtifact(format!(
                        "artifact {i}: corner size {size} outside {rows}x{cols} grid"
                    )));
                }
                if !delta.is_finite() {
                    return Err(Error::BadArtifact(format!("artifact {i}: bad corner delta")));
                }
            }
            ArtifactKind::GlobalBias { delta } => {
                if !delta.is_finite() {
                    return Err(Error::BadArtifact(format!("artifact {i}: bad bias delta")));
                }
            }
            ArtifactKind::NoiseScale { factor } => {
                if !(*factor > 0.0) || !factor.is_finite() {
                    return Err(Error::BadArtifact(format!(
                        "artifact {i}: noise factor must be positive"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// Probe cells covered by an artifact's shape, sorted by (x, y). Global
/// artifacts cover every probe cell.
pub fn artifact_mask(artifact: &ArtifactSpec, layout: &ChipLayout) -> Vec<(usize, usize)> {
    let covered = |x: usize, y: usize| -> bool {
        let p = (x as f64, y as f64);
        match &artifact.kind {
            ArtifactKind::Disc { center, radius, .. } => {
                let (dx, dy) = (p.0 - center.0, p.1 - center.1);
                (dx * dx + dy * dy).sqrt() <= *radius
            }
            ArtifactKind::Line { from, to, width, .. } => {
                point_segment_distance(p, *from, *to) <= width / 2.0
            }
            ArtifactKind::Corner { size, .. } => x < *size && y < *size,
            ArtifactKind::GlobalBias { .. } | ArtifactKind::NoiseScale { .. } => true,
        }
    };
    let mut cells: Vec<(usize, usize)> = layout
        .probes()
        .iter()
        .filter(|p| covered(p.x, p.y))
        .map(|p| (p.x, p.y))
        .collect();
    cells.sort_unstable();
    cells
}

/// Generate a chip set with known ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(ChipSet, GroundTruth)> {
    let n_probes = spec.n_probesets * spec.probes_per_set;
    let (rows, cols) = grid_dims(n_probes);
    validate(spec, rows, cols)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Probes land on the grid in shuffled order, like on a real chip.
    let mut cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|y| (0..cols).map(move |x| (x, y)))
        .collect();
    cells.shuffle(&mut rng);

    let id_width = spec.n_probesets.to_string().len();
    let probeset_ids: Vec<String> = (1..=spec.n_probesets)
        .map(|p| format!("PS{p:0id_width$}"))
        .collect();

    let mut probes = Vec::with_capacity(n_probes);
    for (p, id) in probeset_ids.iter().enumerate() {
        for rank in 0..spec.probes_per_set {
            let (x, y) = cells[p * spec.probes_per_set + rank];
            probes.push(Probe {
                probeset_id: id.clone(),
                probe_rank: rank,
                x,
                y,
            });
        }
    }
    let layout = ChipLayout::new(rows, cols, probes)?;

    let mu_dist = Uniform::new_inclusive(spec.mu_range.0, spec.mu_range.1)
        .map_err(|e| Error::Config(format!("bad mu_range: {e}")))?;
    let mu: Vec<f64> = (0..spec.n_probesets).map(|_| mu_dist.sample(&mut rng)).collect();

    let alpha_dist = Normal::new(0.0, spec.alpha_sd)
        .map_err(|e| Error::Config(format!("bad alpha_sd: {e}")))?;
    let alpha: Vec<Vec<f64>> = (0..spec.n_probesets)
        .map(|_| {
            let mut a: Vec<f64> = (0..spec.probes_per_set)
                .map(|_| alpha_dist.sample(&mut rng))
                .collect();
            let m = a.iter().sum::<f64>() / a.len() as f64;
            for v in &mut a {
                *v -= m;
            }
            a
        })
        .collect();

    let mut chip_sigma = spec.sigma.clone();
    for a in &spec.artifacts {
        if let ArtifactKind::NoiseScale { factor } = a.kind {
            chip_sigma[a.chip] *= factor;
        }
    }

    // log2-scale signal, noise added per chip in canonical probe order.
    let mut log2 = Array2::zeros((spec.n_chips, n_probes));
    let unit_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..spec.n_chips {
        for (j, probe) in layout.probes().iter().enumerate() {
            let p: usize = probe.probeset_id[2..].parse().expect("generated id");
            let p = p - 1;
            let noise = chip_sigma[i] * unit_normal.sample(&mut rng);
            log2[[i, j]] = mu[p] + alpha[p][probe.probe_rank] + noise;
        }
    }

    let artifact_masks: Vec<Vec<(usize, usize)>> = spec
        .artifacts
        .iter()
        .map(|a| artifact_mask(a, &layout))
        .collect();

    for (a, mask) in spec.artifacts.iter().zip(&artifact_masks) {
        match a.kind {
            ArtifactKind::Disc { delta, .. }
            | ArtifactKind::Line { delta, .. }
            | ArtifactKind::Corner { delta, .. } => {
                for &(x, y) in mask {
                    let col = layout.column_of(x, y).expect("mask cells are probe cells");
                    log2[[a.chip, col]] += delta;
                }
            }
            ArtifactKind::GlobalBias { delta } => {
                for j in 0..n_probes {
                    log2[[a.chip, j]] += delta;
                }
            }
            ArtifactKind::NoiseScale { .. } => {}
        }
    }

    let raw = log2.mapv(f64::exp2);
    let chip_width = spec.n_chips.to_string().len();
    let chip_names: Vec<String> = (1..=spec.n_chips)
        .map(|i| format!("chip{i:0chip_width$}"))
        .collect();
    let chipset = ChipSet::new(layout, IntensityMatrix::new(chip_names, raw)?, None)?;

    let truth = GroundTruth {
        spec: spec.clone(),
        rows,
        cols,
        probeset_ids,
        mu,
        alpha,
        chip_sigma,
        artifact_masks,
    };
    Ok((chipset, truth))
}
