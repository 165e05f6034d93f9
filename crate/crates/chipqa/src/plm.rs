//! Robust per-probeset fit of the additive log2 model
//! `y[chip][probe] = mu[chip] + alpha[probe] + noise` by iteratively
//! reweighted least squares with Huber weights.
//!
//! Identifiability comes from the zero-sum constraint on the probe
//! affinities. The residual scale is re-estimated each iteration from the
//! MAD of the residuals; probes discordant with the rest of their set get
//! weights below one, which is what the downstream quality metrics read.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ingest::ChipLayout;
use crate::preprocess::NormalizedMatrix;
use crate::stats;

/// MAD-to-standard-deviation consistency factor for normal noise.
pub const MAD_CONSISTENCY: f64 = 1.4826;

/// Residual scales at or below this are treated as an exact fit: the data
/// are flat to f64 rounding dust and reweighting the dust is meaningless.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Huber weight for a standardized residual: 1 inside the corner `k`,
/// `k/|u|` outside. Never zero.
pub fn huber_weight(u: f64, k: f64) -> f64 {
    debug_assert!(k > 0.0);
    let a = u.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

/// Robust residual scale: 1.4826 x median absolute deviation from the median.
pub fn mad_scale(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("mad_scale"));
    }
    let m = stats::median(residuals);
    let devs: Vec<f64> = residuals.iter().map(|r| (r - m).abs()).collect();
    Ok(MAD_CONSISTENCY * stats::median(&devs))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    /// Huber tuning constant; 1.345 gives 95% efficiency under normal noise.
    pub huber_k: f64,
    /// Convergence threshold on the largest parameter change per sweep.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            huber_k: 1.345,
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.huber_k > 0.0) || !self.huber_k.is_finite() {
            return Err(Error::Config(format!("huber_k must be positive, got {}", self.huber_k)));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the fit produces for one probeset.
#[derive(Debug, Clone)]
pub struct ProbesetFit {
    pub probeset_id: String,
    /// Per-chip expression, log2 units.
    pub mu: Vec<f64>,
    /// Per-probe affinity, log2 units, summing to zero.
    pub alpha: Vec<f64>,
    /// chips x probes, `y - mu - alpha` at the returned parameters.
    pub residuals: Array2<f64>,
    /// chips x probes Huber weights in (0, 1].
    pub weights: Array2<f64>,
    /// Per-chip total probe weight, the row sums of `weights`.
    pub total_weight: Vec<f64>,
    /// Robust residual scale, log2 units.
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProbesetFit {
    pub fn n_chips(&self) -> usize {
        self.mu.len()
    }

    pub fn n_probes(&self) -> usize {
        self.alpha.len()
    }
}

/// Fit one probeset submatrix (chips x probes, log2 scale).
pub fn fit_probeset(probeset_id: &str, y: ArrayView2<f64>, config: &FitConfig) -> Result<ProbesetFit> {
    config.validate()?;
    let (n_chips, n_probes) = y.dim();
    if n_chips < 2 || n_probes < 2 {
        return Err(Error::Shape(format!(
            "fit needs at least 2 chips and 2 probes, got {n_chips}x{n_probes}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadInput("probeset intensities".into()));
    }

    // Median initialization: row medians for mu, column medians of the
    // de-trended matrix for alpha, then shift the alpha mean into mu so the
    // zero-sum constraint holds from the start.
    let mut mu: Vec<f64> = (0..n_chips)
        .map(|i| stats::median(&y.row(i).to_vec()))
        .collect();
    let mut alpha: Vec<f64> = (0..n_probes)
        .map(|j| {
            let col: Vec<f64> = (0..n_chips).map(|i| y[[i, j]] - mu[i]).collect();
            stats::median(&col)
        })
        .collect();
    recenter(&mut mu, &mut alpha);

    let mut residuals = Array2::zeros((n_chips, n_probes));
    let mut weights = Array2::from_elem((n_chips, n_probes), 1.0);
    let mut iterations = 0;
    let mut converged = false;

    for iter in 1..=config.max_iter {
        iterations = iter;
        for i in 0..n_chips {
            for j in 0..n_probes {
                residuals[[i, j]] = y[[i, j]] - mu[i] - alpha[j];
            }
        }
        let sigma = mad_scale(residuals.as_slice().expect("contiguous"))?;
        if sigma <= SIGMA_FLOOR {
            weights.fill(1.0);
            converged = true;
            break;
        }
        for i in 0..n_chips {
            for j in 0..n_probes {
                weights[[i, j]] = huber_weight(residuals[[i, j]] / sigma, config.huber_k);
            }
        }

        // Weighted least-squares sweep: mu given alpha, then alpha given the
        // fresh mu, then re-center.
        let mut new_mu = vec![0.0; n_chips];
        for i in 0..n_chips {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n_probes {
                num += weights[[i, j]] * (y[[i, j]] - alpha[j]);
                den += weights[[i, j]];
            }
            new_mu[i] = num / den;
        }
        let mut new_alpha = vec![0.0; n_probes];
        for j in 0..n_probes {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n_chips {
                num += weights[[i, j]] * (y[[i, j]] - new_mu[i]);
                den += weights[[i, j]];
            }
            new_alpha[j] = num / den;
        }
        recenter(&mut new_mu, &mut new_alpha);

        let mut delta = 0.0f64;
        for (a, b) in mu.iter().zip(&new_mu) {
            delta = delta.max((a - b).abs());
        }
        for (a, b) in alpha.iter().zip(&new_alpha) {
            delta = delta.max((a - b).abs());
        }
        mu = new_mu;
        alpha = new_alpha;
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    // Recompute every reported field from the converged parameters so the
    // stored residuals/weights/scale are mutually consistent.
    for i in 0..n_chips {
        for j in 0..n_probes {
            residuals[[i, j]] = y[[i, j]] - mu[i] - alpha[j];
        }
    }
    let sigma = mad_scale(residuals.as_slice().expect("contiguous"))?;
    if sigma <= SIGMA_FLOOR {
        weights.fill(1.0);
    } else {
        for i in 0..n_chips {
            for j in 0..n_probes {
                weights[[i, j]] = huber_weight(residuals[[i, j]] / sigma, config.huber_k);
            }
        }
    }
    let total_weight: Vec<f64> = (0..n_chips).map(|i| weights.row(i).sum()).collect();

    Ok(ProbesetFit {
        probeset_id: probeset_id.to_string(),
        mu,
        alpha,
        residuals,
        weights,
        total_weight,
        sigma,
        iterations,
        converged,
    })
}

/// Shift the mean of `alpha` into `mu`, leaving `alpha` zero-sum.
fn recenter(mu: &mut [f64], alpha: &mut [f64]) {
    let m = alpha.iter().sum::<f64>() / alpha.len() as f64;
    for a in alpha.iter_mut() {
        *a -= m;
    }
    for u in mu.iter_mut() {
        *u += m;
    }
}

/// One fit per layout probeset, in canonical probeset order.
#[derive(Debug, Clone)]
pub struct PlmResult {
    pub chip_names: Vec<String>,
    pub fits: Vec<ProbesetFit>,
}

impl PlmResult {
    pub fn n_chips(&self) -> usize {
        self.chip_names.len()
    }

    pub fn n_probesets(&self) -> usize {
        self.fits.len()
    }

    /// Lookup by probeset id (fits are sorted by id).
    pub fn fit(&self, probeset_id: &str) -> Option<&ProbesetFit> {
        self.fits
            .binary_search_by(|f| f.probeset_id.as_str().cmp(probeset_id))
            .ok()
            .map(|i| &self.fits[i])
    }
}

fn check_alignment(norm: &NormalizedMatrix, layout: &ChipLayout) -> Result<()> {
    if norm.n_probes() != layout.n_probes() {
        return Err(Error::Shape(format!(
            "matrix has {} probe columns, layout has {} probes",
            norm.n_probes(),
            layout.n_probes()
        )));
    }
    Ok(())
}

fn fit_span(
    norm: &NormalizedMatrix,
    id: &str,
    span: &std::ops::Range<usize>,
    config: &FitConfig,
) -> Result<ProbesetFit> {
    let sub = norm.values().slice(ndarray::s![.., span.clone()]);
    fit_probeset(id, sub, config).map_err(|e| e.in_probeset(id))
}

/// Fit every probeset. With the `parallel` feature (default) probesets are
/// fitted concurrently; results are merged in probeset order either way, so
/// the output is identical.
pub fn fit_all(norm: &NormalizedMatrix, layout: &ChipLayout, config: &FitConfig) -> Result<PlmResult> {
    check_alignment(norm, layout)?;
    #[cfg(feature = "parallel")]
    let fits: Result<Vec<ProbesetFit>> = {
        use rayon::prelude::*;
        layout
            .probesets()
            .par_iter()
            .map(|(id, span)| fit_span(norm, id, span, config))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fits: Result<Vec<ProbesetFit>> = layout
        .probesets()
        .iter()
        .map(|(id, span)| fit_span(norm, id, span, config))
        .collect();
    Ok(PlmResult {
        chip_names: norm.chip_names().to_vec(),
        fits: fits?,
    })
}

/// Single-threaded variant of `fit_all`, always available; the benchmark
/// suite compares it against the parallel path.
pub fn fit_all_sequential(
    norm: &NormalizedMatrix,
    layout: &ChipLayout,
    config: &FitConfig,
) -> Result<PlmResult> {
    check_alignment(norm, layout)?;
    let fits: Result<Vec<ProbesetFit>> = layout
        .probesets()
        .iter()
        .map(|(id, span)| fit_span(norm, id, span, config))
        .collect();
    Ok(PlmResult {
        chip_names: norm.chip_names().to_vec(),
        fits: fits?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fit(y: Array2<f64>) -> ProbesetFit {
        fit_probeset("PS", y.view(), &FitConfig::default()).unwrap()
    }

    #[test]
    fn huber_weight_examples() {
        assert_eq!(huber_weight(0.0, 1.345), 1.0);
        assert!((huber_weight(2.69, 1.345) - 0.5).abs() < 1e-15);
        assert_eq!(huber_weight(-0.5, 1.345), 1.0);
    }

    #[test]
    fn mad_scale_examples() {
        assert_eq!(mad_scale(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((mad_scale(&[-1.0, 0.0, 1.0]).unwrap() - 1.4826).abs() < 1e-12);
        assert_eq!(mad_scale(&[3.0, 3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(mad_scale(&[]), Err(Error::EmptyInput(_))));
    }

    /// Exact-model data built from dyadic rationals so every intermediate
    /// is representable: the fit must recover it with zero residuals.
    #[test]
    fn exact_model_recovered_immediately() {
        let mu = [1.0, 2.0, 3.0];
        let alpha = [-0.5, 0.5];
        let mut y = Array2::zeros((3, 2));
        for i in 0..3 {
            for j in 0..2 {
                y[[i, j]] = mu[i] + alpha[j];
            }
        }
        let f = fit(y);
        assert!(f.converged);
        assert!(f.iterations <= 2, "took {} iterations", f.iterations);
        for i in 0..3 {
            assert!((f.mu[i] - mu[i]).abs() < 1e-12, "mu[{i}] = {}", f.mu[i]);
        }
        for j in 0..2 {
            assert!((f.alpha[j] - alpha[j]).abs() < 1e-12);
        }
        assert!(f.residuals.iter().all(|r| *r == 0.0));
        assert!(f.weights.iter().all(|w| *w == 1.0));
        assert_eq!(f.sigma, 0.0);
        assert_eq!(f.total_weight, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn gross_outlier_is_downweighted() {
        // 3 chips x 4 probes, additive model plus a small non-additive
        // ripple (dyadic, so the clean fit is reproducible), plus +10 on
        // cell (1, 1).
        let mu = [7.0, 8.0, 9.0];
        let alpha = [-0.75, 0.25, 0.25, 0.25];
        let ripple = [[2.0, -3.0, 16.0, -14.0], [-10.0, 3.0, -4.0, -9.0], [11.0, -7.0, 14.0, 7.0]];
        let mut clean = Array2::zeros((3, 4));
        for i in 0..3 {
            for j in 0..4 {
                clean[[i, j]] = mu[i] + alpha[j] + ripple[i][j] / 320.0;
            }
        }
        let clean_fit = fit(clean.clone());
        let mut corrupted = clean;
        corrupted[[1, 1]] += 10.0;
        let f = fit(corrupted);

        assert!(f.weights[[1, 1]] < 0.2, "outlier weight {}", f.weights[[1, 1]]);
        for i in 0..3 {
            for j in 0..4 {
                if (i, j) != (1, 1) {
                    assert!(f.weights[[i, j]] >= 0.9, "weight[{i},{j}] = {}", f.weights[[i, j]]);
                }
            }
        }
        for i in 0..3 {
            assert!(
                (f.mu[i] - clean_fit.mu[i]).abs() < 0.05,
                "mu[{i}] drifted {}",
                (f.mu[i] - clean_fit.mu[i]).abs()
            );
        }
    }

    #[test]
    fn robust_objective_beats_least_squares() {
        // Huber objective at the IRLS solution (sigma frozen at the final
        // IRLS scale) must not exceed the plain least-squares solution's.
        let y = array![
            [8.1, 7.6, 8.9, 8.3, 7.9],
            [9.0, 8.2, 9.6, 9.1, 13.0],
            [7.7, 7.1, 8.4, 7.9, 7.5],
            [8.5, 8.0, 9.2, 8.6, 8.2]
        ];
        let cfg = FitConfig::default();
        let f = fit_probeset("PS", y.view(), &cfg).unwrap();
        assert!(f.sigma > 0.0);

        let rho = |u: f64| {
            let a = u.abs();
            if a <= cfg.huber_k {
                0.5 * u * u
            } else {
                cfg.huber_k * a - 0.5 * cfg.huber_k * cfg.huber_k
            }
        };
        let objective = |mu: &[f64], alpha: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..5 {
                    s += rho((y[[i, j]] - mu[i] - alpha[j]) / f.sigma);
                }
            }
            s
        };

        // Least-squares solution of the two-way layout: row means and
        // column deviations from the grand mean.
        let grand = y.iter().sum::<f64>() / 20.0;
        let ls_mu: Vec<f64> = (0..4).map(|i| y.row(i).sum() / 5.0).collect();
        let ls_alpha: Vec<f64> = (0..5).map(|j| y.column(j).sum() / 4.0 - grand).collect();

        assert!(objective(&f.mu, &f.alpha) <= objective(&ls_mu, &ls_alpha) + 1e-8);
    }

    #[test]
    fn zero_sum_constraint_holds() {
        let y = array![
            [3.5, 2.25, 4.0, 3.125],
            [4.5, 3.0, 5.25, 4.0],
            [2.75, 1.5, 3.5, 2.625]
        ];
        let f = fit(y);
        assert!(f.alpha.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn residuals_recompute_exactly() {
        let y = array![[1.0, 2.0, 4.5], [2.5, 3.0, 5.0], [0.5, 1.75, 3.25]];
        let f = fit(y.clone());
        for i in 0..3 {
            for j in 0..3 {
                let r = y[[i, j]] - f.mu[i] - f.alpha[j];
                assert_eq!(r, f.residuals[[i, j]]);
            }
        }
    }

    #[test]
    fn converged_fit_is_a_fixed_point() {
        let y = array![
            [8.1, 7.6, 8.9, 8.3],
            [9.0, 8.2, 9.6, 9.1],
            [7.7, 7.1, 8.4, 7.9],
            [8.5, 8.0, 9.2, 8.6]
        ];
        let cfg = FitConfig::default();
        let f = fit_probeset("PS", y.view(), &cfg).unwrap();
        assert!(f.converged);
        // One more weighted sweep from the converged parameters.
        let (n_chips, n_probes) = y.dim();
        let mut mu = f.mu.clone();
        let mut alpha = f.alpha.clone();
        for i in 0..n_chips {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n_probes {
                num += f.weights[[i, j]] * (y[[i, j]] - alpha[j]);
                den += f.weights[[i, j]];
            }
            mu[i] = num / den;
        }
        for j in 0..n_probes {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n_chips {
                num += f.weights[[i, j]] * (y[[i, j]] - mu[i]);
                den += f.weights[[i, j]];
            }
            alpha[j] = num / den;
        }
        let m = alpha.iter().sum::<f64>() / n_probes as f64;
        for a in alpha.iter_mut() {
            *a -= m;
        }
        for u in mu.iter_mut() {
            *u += m;
        }
        for i in 0..n_chips {
            assert!((mu[i] - f.mu[i]).abs() < cfg.tol * 10.0);
        }
        for j in 0..n_probes {
            assert!((alpha[j] - f.alpha[j]).abs() < cfg.tol * 10.0);
        }
    }

    #[test]
    fn shift_equivariance() {
        let y = array![
            [8.1, 7.6, 8.9, 8.3],
            [9.0, 8.2, 9.6, 9.1],
            [7.7, 7.1, 8.4, 7.9]
        ];
        let f0 = fit(y.clone());
        let f1 = fit(y.mapv(|v| v + 3.0));
        for i in 0..3 {
            assert!((f1.mu[i] - f0.mu[i] - 3.0).abs() < 1e-9);
        }
        for j in 0..4 {
            assert!((f1.alpha[j] - f0.alpha[j]).abs() < 1e-9);
        }
        assert!((f1.sigma - f0.sigma).abs() < 1e-9);
        for (a, b) in f1.weights.iter().zip(f0.weights.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn chip_permutation_equivariance() {
        let y = array![
            [8.1, 7.6, 8.9, 8.3],
            [9.0, 8.2, 9.6, 9.1],
            [7.7, 7.1, 8.4, 7.9]
        ];
        let perm = [2usize, 0, 1];
        let mut yp = Array2::zeros((3, 4));
        for (to, &from) in perm.iter().enumerate() {
            yp.row_mut(to).assign(&y.row(from));
        }
        let f0 = fit(y);
        let f1 = fit(yp);
        for (to, &from) in perm.iter().enumerate() {
            assert!((f1.mu[to] - f0.mu[from]).abs() < 1e-9);
            assert!((f1.total_weight[to] - f0.total_weight[from]).abs() < 1e-9);
        }
        for j in 0..4 {
            assert!((f1.alpha[j] - f0.alpha[j]).abs() < 1e-9);
        }
        assert!((f1.sigma - f0.sigma).abs() < 1e-9);
    }

    #[test]
    fn weights_stay_in_unit_interval() {
        let y = array![
            [1.0, 9.0, 2.0, 8.5],
            [2.0, 2.1, 2.2, 30.0],
            [1.5, 8.8, 2.4, 8.0]
        ];
        let f = fit(y);
        for w in f.weights.iter() {
            assert!(*w > 0.0 && *w <= 1.0, "weight {w} out of (0,1]");
        }
        for (i, tw) in f.total_weight.iter().enumerate() {
            assert!(*tw > 0.0 && *tw <= 4.0, "total weight {tw} of chip {i}");
        }
    }

    #[test]
    fn degenerate_shapes_rejected() {
        let y = array![[1.0, 2.0]];
        assert!(matches!(
            fit_probeset("PS", y.view(), &FitConfig::default()),
            Err(Error::Shape(_))
        ));
        let y = array![[1.0], [2.0]];
        assert!(matches!(
            fit_probeset("PS", y.view(), &FitConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let y = array![[1.0, f64::NAN], [2.0, 3.0]];
        assert!(matches!(
            fit_probeset("PS", y.view(), &FitConfig::default()),
            Err(Error::BadInput(_))
        ));
    }

    #[test]
    fn fit_all_is_deterministic_and_ordered() {
        use crate::ingest::{ChipLayout, Probe};

        let mut probes = Vec::new();
        for (s, id) in ["B", "A"].iter().enumerate() {
            for j in 0..3 {
                probes.push(Probe {
                    probeset_id: id.to_string(),
                    probe_rank: j,
                    x: j,
                    y: s,
                });
            }
        }
        let layout = ChipLayout::new(2, 3, probes).unwrap();
        let mut values = Array2::zeros((2, 6));
        for i in 0..2 {
            for j in 0..6 {
                values[[i, j]] = (i as f64) * 2.0 + (j as f64) * 0.25 + 5.0;
            }
        }
        let norm =
            NormalizedMatrix::new(vec!["c1".into(), "c2".into()], values).unwrap();
        let r1 = fit_all(&norm, &layout, &FitConfig::default()).unwrap();
        let r2 = fit_all_sequential(&norm, &layout, &FitConfig::default()).unwrap();
        assert_eq!(r1.fits.len(), 2);
        assert_eq!(r1.fits[0].probeset_id, "A");
        assert_eq!(r1.fits[1].probeset_id, "B");
        for (a, b) in r1.fits.iter().zip(r2.fits.iter()) {
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.sigma, b.sigma);
        }
        assert!(r1.fit("A").is_some());
        assert!(r1.fit("Z").is_none());
    }
}
