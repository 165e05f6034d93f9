//! Order-statistic helpers used throughout the metrics.
//!
//! Conventions, stated once and used everywhere: medians average the two
//! central order statistics for even counts; quantiles interpolate linearly
//! between order statistics (the "type 7" rule); IQR = Q3 - Q1.

/// Median with the mean-of-central-pair convention. Panics on empty input.
pub fn median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    median_inplace(&mut buf)
}

/// Median that sorts the provided buffer in place.
pub fn median_inplace(buf: &mut [f64]) -> f64 {
    assert!(!buf.is_empty(), "median of empty slice");
    buf.sort_unstable_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        (buf[n / 2 - 1] + buf[n / 2]) / 2.0
    }
}

/// Type-7 quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile p out of [0,1]");
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut buf = values.to_vec();
    buf.sort_unstable_by(f64::total_cmp);
    quantile_sorted(&buf, p)
}

/// Interquartile range (Q3 - Q1, type-7 quantiles).
pub fn iqr(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    buf.sort_unstable_by(f64::total_cmp);
    quantile_sorted(&buf, 0.75) - quantile_sorted(&buf, 0.25)
}

pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of empty slice");
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean after dropping `ceil(trim * n)` values from each end.
/// Returns `None` when trimming leaves nothing.
pub fn trimmed_mean(values: &[f64], trim: f64) -> Option<f64> {
    let n = values.len();
    let drop = (trim * n as f64).ceil() as usize;
    if 2 * drop >= n {
        return None;
    }
    let mut buf = values.to_vec();
    buf.sort_unstable_by(f64::total_cmp);
    Some(mean(&buf[drop..n - drop]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn type7_quantiles_match_reference() {
        // Same convention as R's default quantile() / numpy's linear method.
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-12);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&x, 0.75) - 3.25).abs() < 1e-12);

        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&x, 0.25), 2.0);
        assert_eq!(quantile(&x, 0.75), 4.0);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 5.0);
    }

    #[test]
    fn iqr_of_constant_is_zero() {
        assert_eq!(iqr(&[2.0, 2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn trimmed_mean_drops_ceil_each_side() {
        // n = 100, trim 0.02 -> drop 2 each side.
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = trimmed_mean(&values, 0.02).unwrap();
        let expected = (3..=98).map(f64::from).sum::<f64>() / 96.0;
        assert!((t - expected).abs() < 1e-12);
        // Everything trimmed away.
        assert_eq!(trimmed_mean(&[1.0, 2.0], 0.5), None);
    }
}
