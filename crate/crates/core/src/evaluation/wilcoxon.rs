use statrs::distribution::{ContinuousCDF, Normal};

use super::report::DscReport;
use crate::error::{bail, Result};

/// Largest number of nonzero differences handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_pairs: usize,
    pub n_nonzero: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on paired differences. Zeros follow Pratt:
/// they take part in ranking and are then dropped.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.len() < 2 {
        bail!(Data, "signed-rank test needs at least 2 pairs, got {}", diffs.len());
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        bail!(Data, "paired differences must be finite");
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let nonzero: Vec<(f64, bool)> = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, &r)| (r, *d > 0.0))
        .collect();
    let n = nonzero.len();
    let w_plus: f64 = nonzero.iter().filter(|x| x.1).map(|x| x.0).sum();
    let w_minus: f64 = nonzero.iter().filter(|x| !x.1).map(|x| x.0).sum();
    let base = WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        p_value: 1.0,
        n_pairs: diffs.len(),
        n_nonzero: n,
        exact: true,
    };
    if n == 0 {
        return Ok(base);
    }
    let r: Vec<f64> = nonzero.iter().map(|x| x.0).collect();
    if n <= EXACT_MAX_N {
        Ok(WilcoxonResult {
            p_value: exact_p(&r, w_plus),
            ..base
        })
    } else {
        let mean = r.iter().sum::<f64>() / 2.0;
        let var = r.iter().map(|x| x * x).sum::<f64>() / 4.0;
        let z = (w_plus - mean) / var.sqrt();
        let p = 2.0 * Normal::standard().cdf(-z.abs());
        Ok(WilcoxonResult {
            p_value: p.min(1.0),
            exact: false,
            ..base
        })
    }
}

/// Exact two-sided p from the sign-flip null distribution of `W+`, counted
/// over doubled ranks so tied (half-integer) ranks stay integral.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &d in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + d] += counts[s];
            }
        }
        reach += d;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let le: f64 = counts[..=w].iter().sum();
    let ge: f64 = counts[w..].iter().sum();
    (2.0 * le.min(ge) / all).min(1.0)
}

/// Signed-rank test on `b − a` per scan for one class.
pub fn paired_compare(report_a: &DscReport, report_b: &DscReport, class_id: u8) -> Result<WilcoxonResult> {
    let a = report_a.class_values(class_id)?;
    let b = report_b.class_values(class_id)?;
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
        bail!(Data, "reports cover different scan sets");
    }
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y.1 - x.1).collect();
    wilcoxon_signed_rank(&diffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_differences() {
        let r = wilcoxon_signed_rank(&[0.0; 5]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n_nonzero, 0);
    }

    #[test]
    fn too_few_pairs() {
        assert_eq!(wilcoxon_signed_rank(&[0.3]).unwrap_err().code(), "DataError");
    }

    #[test]
    fn ties_average_ranks() {
        assert_eq!(average_ranks(&[0.1, 0.3, 0.1, 0.2]), vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn symmetric_sample_is_not_significant() {
        let r = wilcoxon_signed_rank(&[0.1, -0.1, 0.2, -0.2, 0.3, -0.3]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_branch_for_large_n() {
        let d: Vec<f64> = (1..=40).map(|i| i as f64 * if i % 4 == 0 { -1.0 } else { 1.0 }).collect();
        let r = wilcoxon_signed_rank(&d).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 0.05);
    }
}
