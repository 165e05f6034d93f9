//! Chip and batch quality metrics derived from the probe-level fits:
//! NUSE, RLE, per-chip summaries with outlier flags, batch residual scale
//! factors, and the two intensity-only scores from the vendor's chip report.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ChipSet, IntensityMatrix};
use crate::plm::{self, FitConfig, PlmResult, ProbesetFit};
use crate::preprocess::{self, BackgroundMethod, NormalizedMatrix};
use crate::stats;

/// Unscaled standard error per chip: 1/sqrt(total probe weight).
pub fn compute_use(fit: &ProbesetFit) -> Vec<f64> {
    fit.total_weight.iter().map(|w| 1.0 / w.sqrt()).collect()
}

/// NUSE matrix, probesets x chips: each probeset's USE divided by its
/// median across chips, so every row has median exactly 1.
pub fn compute_nuse(result: &PlmResult) -> Array2<f64> {
    let mut out = Array2::zeros((result.n_probesets(), result.n_chips()));
    for (p, fit) in result.fits.iter().enumerate() {
        let use_row = compute_use(fit);
        let med = stats::median(&use_row);
        for (i, u) in use_row.iter().enumerate() {
            out[[p, i]] = u / med;
        }
    }
    out
}

/// The virtual median chip: per probeset, the median expression over chips.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceChip(BTreeMap<String, f64>);

impl ReferenceChip {
    pub fn get(&self, probeset_id: &str) -> Option<f64> {
        self.0.get(probeset_id).copied()
    }

    pub fn from_expressions(values: BTreeMap<String, f64>) -> Self {
        ReferenceChip(values)
    }
}

pub fn reference_chip(result: &PlmResult) -> ReferenceChip {
    let map = result
        .fits
        .iter()
        .map(|f| (f.probeset_id.clone(), stats::median(&f.mu)))
        .collect();
    ReferenceChip(map)
}

/// RLE matrix, probesets x chips: expression minus the reference chip's.
pub fn compute_rle(result: &PlmResult, reference: &ReferenceChip) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((result.n_probesets(), result.n_chips()));
    for (p, fit) in result.fits.iter().enumerate() {
        let r = reference
            .get(&fit.probeset_id)
            .ok_or_else(|| Error::RefMismatch(fit.probeset_id.clone()))?;
        for (i, mu) in fit.mu.iter().enumerate() {
            out[[p, i]] = mu - r;
        }
    }
    Ok(out)
}

/// NUSE, RLE, and USE side by side, probesets x chips.
#[derive(Debug, Clone)]
pub struct QaMatrices {
    pub probeset_ids: Vec<String>,
    pub chip_names: Vec<String>,
    pub nuse: Array2<f64>,
    pub rle: Array2<f64>,
    pub use_: Array2<f64>,
}

impl QaMatrices {
    pub fn compute(result: &PlmResult) -> QaMatrices {
        let reference = reference_chip(result);
        let rle = compute_rle(result, &reference).expect("reference covers its own fits");
        let nuse = compute_nuse(result);
        let mut use_ = Array2::zeros((result.n_probesets(), result.n_chips()));
        for (p, fit) in result.fits.iter().enumerate() {
            for (i, u) in compute_use(fit).iter().enumerate() {
                use_[[p, i]] = *u;
            }
        }
        QaMatrices {
            probeset_ids: result.fits.iter().map(|f| f.probeset_id.clone()).collect(),
            chip_names: result.chip_names.clone(),
            nuse,
            rle,
            use_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagThresholds {
    pub nuse_warn: f64,
    pub nuse_fail: f64,
    pub rle_med_warn: f64,
    pub rle_med_fail: f64,
    /// Warn when a chip's IQR(RLE) exceeds this multiple of the cohort
    /// median IQR(RLE).
    pub rle_iqr_factor: f64,
}

/// Defaults anchored to the separations observed in reference datasets;
/// they are heuristics, not universal standards, and reports label them so.
impl Default for FlagThresholds {
    fn default() -> Self {
        FlagThresholds {
            nuse_warn: 1.05,
            nuse_fail: 1.10,
            rle_med_warn: 0.10,
            rle_med_fail: 0.20,
            rle_iqr_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warn,
    Fail,
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Severity::Warn => write!(f, "warn"),
            Severity::Fail => write!(f, "fail"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagMetric {
    MedNuse,
    MedRle,
    IqrRle,
}

impl FlagMetric {
    fn label(&self) -> &'static str {
        match self {
            FlagMetric::MedNuse => "med_nuse",
            FlagMetric::MedRle => "med_rle",
            FlagMetric::IqrRle => "iqr_rle",
        }
    }
}

/// One fired threshold rule, carrying the observed value and the bound it
/// crossed so reports can show where a flag came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaFlag {
    pub metric: FlagMetric,
    pub severity: Severity,
    pub observed: f64,
    pub threshold: f64,
}

impl std::fmt::Display for QaFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}={}>={}",
            self.severity,
            self.metric.label(),
            self.observed,
            self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipQaSummary {
    pub chip_name: String,
    pub med_pm: f64,
    pub iqr_pm: f64,
    pub med_rle: f64,
    pub iqr_rle: f64,
    pub med_nuse: f64,
    pub iqr_nuse: f64,
    pub flags: Vec<QaFlag>,
}

impl ChipQaSummary {
    pub fn has_fail(&self) -> bool {
        self.flags.iter().any(|f| f.severity == Severity::Fail)
    }

    /// Deterministic one-cell rendering of the flags, `;`-joined.
    pub fn flags_string(&self) -> String {
        self.flags
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Per-chip medians and IQRs of log2 PM, RLE, and NUSE, plus threshold
/// flags. `pm_log2` carries the log2-scale PM values whose distribution the
/// summaries describe; the pipeline passes pre-normalization intensities so
/// brightness differences stay visible.
pub fn chip_summaries(
    pm_log2: &NormalizedMatrix,
    qa: &QaMatrices,
    thresholds: &FlagThresholds,
) -> Vec<ChipQaSummary> {
    let n_chips = qa.chip_names.len();
    assert_eq!(pm_log2.n_chips(), n_chips, "chip dimension mismatch");

    let mut summaries: Vec<ChipQaSummary> = (0..n_chips)
        .map(|i| {
            let pm_row = pm_log2.values().row(i).to_vec();
            let rle_col = qa.rle.column(i).to_vec();
            let nuse_col = qa.nuse.column(i).to_vec();
            ChipQaSummary {
                chip_name: qa.chip_names[i].clone(),
                med_pm: stats::median(&pm_row),
                iqr_pm: stats::iqr(&pm_row),
                med_rle: stats::median(&rle_col),
                iqr_rle: stats::iqr(&rle_col),
                med_nuse: stats::median(&nuse_col),
                iqr_nuse: stats::iqr(&nuse_col),
                flags: Vec::new(),
            }
        })
        .collect();

    let cohort_iqr_rle =
        stats::median(&summaries.iter().map(|s| s.iqr_rle).collect::<Vec<_>>());

    for s in &mut summaries {
        if s.med_nuse >= thresholds.nuse_fail {
            s.flags.push(QaFlag {
                metric: FlagMetric::MedNuse,
                severity: Severity::Fail,
                observed: s.med_nuse,
                threshold: thresholds.nuse_fail,
            });
        } else if s.med_nuse >= thresholds.nuse_warn {
            s.flags.push(QaFlag {
                metric: FlagMetric::MedNuse,
                severity: Severity::Warn,
                observed: s.med_nuse,
                threshold: thresholds.nuse_warn,
            });
        }
        if s.med_rle.abs() >= thresholds.rle_med_fail {
            s.flags.push(QaFlag {
                metric: FlagMetric::MedRle,
                severity: Severity::Fail,
                observed: s.med_rle.abs(),
                threshold: thresholds.rle_med_fail,
            });
        } else if s.med_rle.abs() >= thresholds.rle_med_warn {
            s.flags.push(QaFlag {
                metric: FlagMetric::MedRle,
                severity: Severity::Warn,
                observed: s.med_rle.abs(),
                threshold: thresholds.rle_med_warn,
            });
        }
        let iqr_bound = thresholds.rle_iqr_factor * cohort_iqr_rle;
        if iqr_bound > 0.0 && s.iqr_rle >= iqr_bound {
            s.flags.push(QaFlag {
                metric: FlagMetric::IqrRle,
                severity: Severity::Warn,
                observed: s.iqr_rle,
                threshold: iqr_bound,
            });
        }
    }
    summaries
}

/// Quality of one batch of chips: per-probeset residual scales, their
/// median (RSF), and the cross-batch normalized variants (NRSF) when more
/// than one batch is fitted.
#[derive(Debug, Clone)]
pub struct BatchQuality {
    pub batch_name: String,
    pub probeset_ids: Vec<String>,
    pub residual_scales: Vec<f64>,
    pub rsf: f64,
    pub normalized_scales: Option<Vec<f64>>,
    pub nrsf: Option<f64>,
    pub n_chips: usize,
}

/// Fit the model to each batch separately after normalizing every chip in
/// every batch to one shared target, then summarize the per-probeset
/// residual scales. The shared target is what makes the scales comparable.
pub fn compute_rsf(
    batches: &[(String, ChipSet)],
    background: BackgroundMethod,
    fit: &FitConfig,
) -> Result<Vec<BatchQuality>> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("compute_rsf"));
    }
    let layout = &batches[0].1.layout;
    for (name, set) in batches.iter().skip(1) {
        if set.layout != *layout {
            return Err(Error::LayoutMismatch(name.clone()));
        }
    }

    let adjusted: Vec<IntensityMatrix> = batches
        .iter()
        .map(|(_, set)| preprocess::background_adjust(&set.raw, background))
        .collect::<Result<_>>()?;

    let mut pooled_rows: Vec<&[f64]> = Vec::new();
    for m in &adjusted {
        for row in m.values().rows() {
            pooled_rows.push(row.to_slice().expect("row-major matrix"));
        }
    }
    let target = preprocess::target_from_rows(&pooled_rows)?;

    let mut out = Vec::with_capacity(batches.len());
    for ((name, set), adj) in batches.iter().zip(&adjusted) {
        let norm = preprocess::quantile_normalize(adj, &target)?;
        let result = plm::fit_all(&norm, &set.layout, fit)?;
        let residual_scales: Vec<f64> = result.fits.iter().map(|f| f.sigma).collect();
        let rsf = stats::median(&residual_scales);
        out.push(BatchQuality {
            batch_name: name.clone(),
            probeset_ids: result.fits.iter().map(|f| f.probeset_id.clone()).collect(),
            residual_scales,
            rsf,
            normalized_scales: None,
            nrsf: None,
            n_chips: set.n_chips(),
        });
    }

    if out.len() >= 2 {
        let n_probesets = out[0].residual_scales.len();
        let mut cross = Vec::with_capacity(n_probesets);
        for p in 0..n_probesets {
            let col: Vec<f64> = out.iter().map(|b| b.residual_scales[p]).collect();
            cross.push(stats::median(&col));
        }
        for b in &mut out {
            let normalized: Vec<f64> = b
                .residual_scales
                .iter()
                .zip(&cross)
                .map(|(s, c)| {
                    if *c > 0.0 {
                        s / c
                    } else {
                        // All batches flat for this probeset: no information,
                        // call the ratio 1.
                        1.0
                    }
                })
                .collect();
            b.nrsf = Some(stats::median(&normalized));
            b.normalized_scales = Some(normalized);
        }
    }
    Ok(out)
}

/// Mean of the lowest 2% of raw cell intensities per chip.
pub fn gcos_avg_background(raw: &IntensityMatrix) -> Result<Vec<f64>> {
    let n = raw.n_probes();
    if n < 50 {
        return Err(Error::Shape(format!(
            "average background needs at least 50 probes per chip, got {n}"
        )));
    }
    let k = (0.02 * n as f64).ceil() as usize;
    Ok(raw
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut v = row.to_vec();
            v.sort_unstable_by(f64::total_cmp);
            stats::mean(&v[..k])
        })
        .collect())
}

/// Per-chip scale factor: `constant / trimmed_mean`, trimming 2% from each
/// end. The probe selection is all layout probes.
pub fn gcos_scale_factor(raw: &IntensityMatrix, constant: f64) -> Result<Vec<f64>> {
    if !(constant > 0.0) || !constant.is_finite() {
        return Err(Error::Config(format!(
            "scale factor constant must be positive, got {constant}"
        )));
    }
    raw.values()
        .rows()
        .into_iter()
        .zip(raw.chip_names())
        .map(|(row, name)| {
            let tm = stats::trimmed_mean(row.to_slice().expect("row-major matrix"), 0.02)
                .ok_or_else(|| Error::Shape(format!("chip {name}: too few probes to trim")))?;
            if tm == 0.0 {
                return Err(Error::DegenerateChip(name.clone()));
            }
            Ok(constant / tm)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn fit_with(id: &str, mu: Vec<f64>, total_weight: Vec<f64>) -> ProbesetFit {
        let n_chips = mu.len();
        ProbesetFit {
            probeset_id: id.to_string(),
            mu,
            alpha: vec![0.0, 0.0],
            residuals: Array2::zeros((n_chips, 2)),
            weights: Array2::from_elem((n_chips, 2), 1.0),
            total_weight,
            sigma: 0.0,
            iterations: 1,
            converged: true,
        }
    }

    fn result_of(fits: Vec<ProbesetFit>) -> PlmResult {
        let n_chips = fits[0].mu.len();
        PlmResult {
            chip_names: (0..n_chips).map(|i| format!("c{i}")).collect(),
            fits,
        }
    }

    #[test]
    fn use_is_inverse_root_total_weight() {
        let f = fit_with("PS1", vec![1.0, 2.0], vec![4.0, 1.0]);
        assert_eq!(compute_use(&f), vec![0.5, 1.0]);
    }

    #[test]
    fn equal_weights_give_unit_nuse() {
        let r = result_of(vec![fit_with("PS1", vec![1.0, 2.0, 3.0], vec![2.0, 2.0, 2.0])]);
        let nuse = compute_nuse(&r);
        for i in 0..3 {
            assert_eq!(nuse[[0, i]], 1.0);
        }
    }

    #[test]
    fn nuse_divides_by_row_median() {
        // USE row {0.5, 0.5, 1.0}: median 0.5 -> {1, 1, 2}.
        let r = result_of(vec![fit_with("PS1", vec![0.0; 3], vec![4.0, 4.0, 1.0])]);
        let nuse = compute_nuse(&r);
        assert_eq!(nuse[[0, 0]], 1.0);
        assert_eq!(nuse[[0, 1]], 1.0);
        assert_eq!(nuse[[0, 2]], 2.0);
    }

    #[test]
    fn reference_chip_takes_median_expression() {
        let r = result_of(vec![fit_with("PS1", vec![2.0, 4.0, 6.0], vec![2.0; 3])]);
        assert_eq!(reference_chip(&r).get("PS1"), Some(4.0));
        let r = result_of(vec![fit_with("PS1", vec![2.0, 4.0], vec![2.0; 2])]);
        assert_eq!(reference_chip(&r).get("PS1"), Some(3.0));
    }

    #[test]
    fn rle_is_difference_to_reference() {
        let r = result_of(vec![fit_with("PS1", vec![2.0, 4.0, 6.0], vec![2.0; 3])]);
        let rle = compute_rle(&r, &reference_chip(&r)).unwrap();
        assert_eq!(rle[[0, 0]], -2.0);
        assert_eq!(rle[[0, 1]], 0.0);
        assert_eq!(rle[[0, 2]], 2.0);
    }

    #[test]
    fn rle_missing_probeset_is_ref_mismatch() {
        let r = result_of(vec![fit_with("PS1", vec![2.0, 4.0], vec![2.0; 2])]);
        let empty = ReferenceChip::from_expressions(BTreeMap::new());
        assert!(matches!(compute_rle(&r, &empty), Err(Error::RefMismatch(_))));
    }

    #[test]
    fn qa_matrix_identities_hold() {
        let fits = vec![
            fit_with("PS1", vec![2.0, 4.0, 6.0, 5.0], vec![2.0, 1.5, 1.8, 1.2]),
            fit_with("PS2", vec![7.0, 7.5, 6.5, 7.2], vec![1.0, 2.0, 1.7, 1.9]),
        ];
        let qa = QaMatrices::compute(&result_of(fits));
        for p in 0..2 {
            let nuse_row = qa.nuse.row(p).to_vec();
            let rle_row = qa.rle.row(p).to_vec();
            assert!((stats::median(&nuse_row) - 1.0).abs() < 1e-12);
            assert!(stats::median(&rle_row).abs() < 1e-12);
        }
    }

    fn summaries_for(nuse_med: f64) -> Vec<ChipQaSummary> {
        // Three chips; middle chip's NUSE column pushed to nuse_med.
        let fits = vec![
            fit_with(
                "PS1",
                vec![1.0, 1.0, 1.0],
                vec![4.0, 4.0 / (nuse_med * nuse_med), 4.0],
            ),
            fit_with(
                "PS2",
                vec![1.0, 1.0, 1.0],
                vec![4.0, 4.0 / (nuse_med * nuse_med), 4.0],
            ),
        ];
        let r = result_of(fits);
        let qa = QaMatrices::compute(&r);
        let pm = NormalizedMatrix::new(
            qa.chip_names.clone(),
            Array2::from_elem((3, 4), 8.0),
        )
        .unwrap();
        chip_summaries(&pm, &qa, &FlagThresholds::default())
    }

    #[test]
    fn identical_chips_have_clean_summaries() {
        let s = summaries_for(1.0);
        for chip in &s {
            assert_eq!(chip.med_rle, 0.0);
            assert_eq!(chip.med_nuse, 1.0);
            assert_eq!(chip.iqr_nuse, 0.0);
            assert!(chip.flags.is_empty(), "unexpected flags {:?}", chip.flags);
        }
    }

    #[test]
    fn high_med_nuse_fails() {
        let s = summaries_for(1.2);
        let bad = &s[1];
        assert!(bad.med_nuse > 1.19);
        assert!(bad.has_fail());
        assert_eq!(bad.flags[0].metric, FlagMetric::MedNuse);
        assert_eq!(bad.flags[0].severity, Severity::Fail);
        assert!(!s[0].has_fail());
    }

    #[test]
    fn warn_band_flags_without_fail() {
        let s = summaries_for(1.07);
        let bad = &s[1];
        assert_eq!(bad.flags.len(), 1);
        assert_eq!(bad.flags[0].severity, Severity::Warn);
        assert!(!bad.has_fail());
    }

    #[test]
    fn flags_render_deterministically() {
        let s = summaries_for(1.25);
        let cell = s[1].flags_string();
        assert!(cell.starts_with("fail:med_nuse="), "got {cell}");
        assert!(cell.contains(">=1.1"));
    }

    fn tiny_chipset(scale: f64, n_chips: usize, seed: u64) -> ChipSet {
        use crate::synthgen::{generate, SynthSpec};
        let spec = SynthSpec {
            seed,
            n_probesets: 20,
            probes_per_set: 4,
            n_chips,
            mu_range: (6.0, 10.0),
            alpha_sd: 0.3,
            sigma: vec![scale; n_chips],
            artifacts: vec![],
        };
        generate(&spec).unwrap().0
    }

    #[test]
    fn identical_batches_have_unit_nrsf() {
        let set = tiny_chipset(0.2, 4, 7);
        let batches = vec![("A".to_string(), set.clone()), ("B".to_string(), set)];
        let out = compute_rsf(&batches, BackgroundMethod::None, &FitConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        for b in &out {
            let nrsf = b.nrsf.expect("two batches present");
            assert!((nrsf - 1.0).abs() < 1e-9, "nrsf = {nrsf}");
            for s in b.normalized_scales.as_ref().unwrap() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_batch_has_no_normalized_scales() {
        let set = tiny_chipset(0.2, 4, 7);
        let out = compute_rsf(
            &[("only".to_string(), set)],
            BackgroundMethod::None,
            &FitConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].rsf >= 0.0);
        assert!(out[0].normalized_scales.is_none());
        assert!(out[0].nrsf.is_none());
    }

    #[test]
    fn mismatched_layout_rejected() {
        let a = tiny_chipset(0.2, 4, 7);
        let b = tiny_chipset(0.2, 4, 8); // different seed -> different layout shuffle
        let batches = vec![("A".to_string(), a), ("B".to_string(), b)];
        assert!(matches!(
            compute_rsf(&batches, BackgroundMethod::None, &FitConfig::default()),
            Err(Error::LayoutMismatch(_))
        ));
    }

    fn raw_matrix(rows: Vec<Vec<f64>>) -> IntensityMatrix {
        let n = rows.len();
        let m = rows[0].len();
        let mut values = Array2::zeros((n, m));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                values[[i, j]] = *v;
            }
        }
        IntensityMatrix::new((0..n).map(|i| format!("c{i}")).collect(), values).unwrap()
    }

    #[test]
    fn avg_background_on_constant_chip() {
        let raw = raw_matrix(vec![vec![100.0; 100]]);
        assert_eq!(gcos_avg_background(&raw).unwrap(), vec![100.0]);
    }

    #[test]
    fn avg_background_takes_lowest_two_percent() {
        let mut row: Vec<f64> = vec![1000.0; 100];
        row[17] = 10.0;
        row[63] = 20.0;
        let raw = raw_matrix(vec![row]);
        assert_eq!(gcos_avg_background(&raw).unwrap(), vec![15.0]);
    }

    #[test]
    fn avg_background_needs_enough_probes() {
        let raw = raw_matrix(vec![vec![1.0; 10]]);
        assert!(matches!(gcos_avg_background(&raw), Err(Error::Shape(_))));
    }

    #[test]
    fn scale_factor_examples() {
        let raw = raw_matrix(vec![vec![250.0; 100]]);
        assert_eq!(gcos_scale_factor(&raw, 500.0).unwrap(), vec![2.0]);
        let raw = raw_matrix(vec![vec![500.0; 100]]);
        assert_eq!(gcos_scale_factor(&raw, 500.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn scale_factor_is_inverse_homogeneous() {
        let base: Vec<f64> = (1..=100).map(|i| 10.0 + i as f64).collect();
        let raw = raw_matrix(vec![base.clone()]);
        let tripled = raw_matrix(vec![base.iter().map(|v| 3.0 * v).collect()]);
        let f = gcos_scale_factor(&raw, 500.0).unwrap()[0];
        let f3 = gcos_scale_factor(&tripled, 500.0).unwrap()[0];
        assert!((f3 - f / 3.0).abs() < 1e-9 * f);
    }
}
