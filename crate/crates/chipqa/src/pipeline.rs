//! End-to-end glue: background adjustment, normalization, fitting, and
//! metric computation in one call, shared by the CLI and the test suites.

use crate::error::Result;
use crate::ingest::ChipSet;
use crate::metrics::{self, BatchQuality, ChipQaSummary, FlagThresholds, QaMatrices};
use crate::plm::{self, FitConfig, PlmResult};
use crate::preprocess::{self, BackgroundMethod, NormalizedMatrix, QuantileTarget};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub background: BackgroundMethod,
    pub fit: FitConfig,
    pub thresholds: FlagThresholds,
    /// Target constant for the scale factor score (vendor default 500).
    pub scale_constant: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            background: BackgroundMethod::None,
            fit: FitConfig::default(),
            thresholds: FlagThresholds::default(),
            scale_constant: 500.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub chip_names: Vec<String>,
    /// log2 of the background-adjusted intensities (pre-normalization);
    /// feeds the PM summaries and the PM boxplots.
    pub pm_log2: NormalizedMatrix,
    /// Quantile-normalized log2 intensities the model was fitted on.
    pub norm: NormalizedMatrix,
    pub plm: PlmResult,
    pub qa: QaMatrices,
    pub summaries: Vec<ChipQaSummary>,
    pub avg_background: Vec<f64>,
    pub scale_factor: Vec<f64>,
}

/// Run the full QA pipeline on one chip set. `target` of `None` normalizes
/// the set against its own pooled quantiles.
pub fn run_pipeline(
    chipset: &ChipSet,
    target: Option<&QuantileTarget>,
    config: &RunConfig,
) -> Result<PipelineOutput> {
    let adjusted = preprocess::background_adjust(&chipset.raw, config.background)?;
    let own_target;
    let target = match target {
        Some(t) => t,
        None => {
            own_target = preprocess::compute_target(&adjusted)?;
            &own_target
        }
    };
    let norm = preprocess::quantile_normalize(&adjusted, target)?;
    let plm = plm::fit_all(&norm, &chipset.layout, &config.fit)?;
    let qa = QaMatrices::compute(&plm);
    let pm_log2 = preprocess::log2_matrix(&adjusted);
    let summaries = metrics::chip_summaries(&pm_log2, &qa, &config.thresholds);
    let avg_background = metrics::gcos_avg_background(&chipset.raw)?;
    let scale_factor = metrics::gcos_scale_factor(&chipset.raw, config.scale_constant)?;

    Ok(PipelineOutput {
        chip_names: chipset.raw.chip_names().to_vec(),
        pm_log2,
        norm,
        plm,
        qa,
        summaries,
        avg_background,
        scale_factor,
    })
}

/// Split a labeled chip set into batches and compute the residual scale
/// factors over one shared quantile target.
pub fn run_batches(chipset: &ChipSet, config: &RunConfig) -> Result<Vec<BatchQuality>> {
    let batches = chipset.split_batches()?;
    metrics::compute_rsf(&batches, config.background, &config.fit)
}
