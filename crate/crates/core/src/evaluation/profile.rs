use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dsc::{planar_dsc, DscConvention};
use crate::data_model::MaskVolume;
use crate::error::{bail, Result};
use crate::{par, seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileOptions {
    pub bootstrap_iters: usize,
    pub confidence: f64,
    /// Drop (scan, slice) pairs whose reference lacks the class.
    pub exclude_reference_empty: bool,
    pub convention: DscConvention,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            bootstrap_iters: 1000,
            confidence: 0.95,
            exclude_reference_empty: true,
            convention: DscConvention::default(),
        }
    }
}

/// Mean planar DSC per registered slice index with a bootstrap band.
/// Entries are NaN where no scan contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceProfile {
    pub class_id: u8,
    pub per_slice_mean: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub contributing: Vec<usize>,
}

/// Smallest sample value whose ECDF reaches `q`: `sorted[ceil(q·n) − 1]`.
pub fn percentile_inverse_ecdf(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Every ordered resample of `values`, when there are at most `limit` of them.
fn exhaustive_resample_means(values: &[f64], limit: usize) -> Option<Vec<f64>> {
    let n = values.len();
    let total = (n as u32).checked_pow(n as u32).filter(|&t| t as usize <= limit)? as usize;
    let means = (0..total)
        .map(|mut code| {
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[code % n];
                code /= n;
            }
            sum / n as f64
        })
        .collect();
    Some(means)
}

/// Percentile bootstrap interval for the mean of `values`. When `n^n ≤ iters`
/// the full resample space is enumerated instead of sampled.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(values: &[f64], iters: usize, confidence: f64, rng: &mut R) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || iters == 0 {
        return (mean, mean, mean);
    }
    let mut means = exhaustive_resample_means(values, iters).unwrap_or_else(|| {
        (0..iters)
            .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
            .collect()
    });
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let lo = percentile_inverse_ecdf(&means, tail).min(mean);
    let hi = percentile_inverse_ecdf(&means, 1.0 - tail).max(mean);
    (mean, lo, hi)
}

/// Scans must already be laterality-registered. Each slice index draws from
/// its own seeded stream, so the result does not depend on worker count.
pub fn slice_profile(
    predictions: &[MaskVolume],
    references: &[MaskVolume],
    class_id: u8,
    opts: &ProfileOptions,
    seed_root: u64,
) -> Result<SliceProfile> {
    if predictions.len() != references.len() || predictions.is_empty() {
        bail!(Data, "need equally many (>0) predictions and references");
    }
    let slices = references[0].slice_count();
    let mut planar = Vec::with_capacity(predictions.len());
    for (p, r) in predictions.iter().zip(references) {
        if r.slice_count() != slices || p.slice_count() != slices {
            bail!(Data, "inconsistent slice counts across registered scans");
        }
        planar.push(planar_dsc(p, r, class_id, opts.convention)?);
    }
    let stats = par::map_range(slices, |s| {
        let values: Vec<f64> = planar
            .iter()
            .filter(|scan| scan[s].1 || !opts.exclude_reference_empty)
            .map(|scan| scan[s].0)
            .collect();
        let mut rng = seed::stream(seed_root, &format!("bootstrap-class{class_id}-slice{s}"));
        let (m, lo, hi) = bootstrap_mean_ci(&values, opts.bootstrap_iters, opts.confidence, &mut rng);
        (m, lo, hi, values.len())
    });
    Ok(SliceProfile {
        class_id,
        per_slice_mean: stats.iter().map(|s| s.0).collect(),
        ci_low: stats.iter().map(|s| s.1).collect(),
        ci_high: stats.iter().map(|s| s.2).collect(),
        contributing: stats.iter().map(|s| s.3).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn inverse_ecdf_indices() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile_inverse_ecdf(&v, 0.025), 1.0);
        assert_eq!(percentile_inverse_ecdf(&v, 0.5), 5.0);
        assert_eq!(percentile_inverse_ecdf(&v, 0.975), 10.0);
    }

    #[test]
    fn degenerate_samples_have_zero_width() {
        let (m, lo, hi) = bootstrap_mean_ci(&[0.7; 9], 500, 0.95, &mut rng_from(0));
        assert!((m - 0.7).abs() < 1e-12);
        assert_eq!((lo, hi), (m, m));
        let (m, lo, hi) = bootstrap_mean_ci(&[0.3], 500, 0.95, &mut rng_from(0));
        assert_eq!((m, lo, hi), (0.3, 0.3, 0.3));
    }

    #[test]
    fn small_samples_are_enumerated() {
        // 3^3 = 27 equally likely resamples of {0, 0, 1}; their means sorted
        let mut all: Vec<f64> = (0..27).map(|c| [0.0, 0.0, 1.0][c % 3] + [0.0, 0.0, 1.0][c / 3 % 3] + [0.0, 0.0, 1.0][c / 9]).map(|s| s / 3.0).collect();
        all.sort_by(f64::total_cmp);
        let (_, lo, hi) = bootstrap_mean_ci(&[0.0, 0.0, 1.0], 1000, 0.9, &mut rng_from(1));
        assert_eq!(lo, percentile_inverse_ecdf(&all, 0.05));
        assert_eq!(hi, percentile_inverse_ecdf(&all, 0.95));
        assert_eq!((lo, hi), (0.0, 2.0 / 3.0));
    }

    #[test]
    fn perfect_predictions_profile() {
        let m = MaskVolume::new(3, 2, 2, vec![1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 0, 0]).unwrap();
        let p = slice_profile(&[m.clone(), m.clone()], &[m.clone(), m], 1, &ProfileOptions::default(), 4).unwrap();
        assert_eq!(p.per_slice_mean, vec![1.0; 3]);
        assert_eq!(p.ci_low, p.ci_high);
    }

    #[test]
    fn inconsistent_slice_counts_are_data_errors() {
        let a = MaskVolume::new(3, 1, 1, vec![0; 3]).unwrap();
        let b = MaskVolume::new(2, 1, 1, vec![0; 2]).unwrap();
        let err = slice_profile(&[a.clone(), b.clone()], &[a, b], 1, &ProfileOptions::default(), 0).unwrap_err();
        assert_eq!(err.code(), "DataError");
    }
}
