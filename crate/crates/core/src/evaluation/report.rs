use std::collections::BTreeMap;

use super::dsc::{volumetric_dsc, DscConvention};
use crate::data_model::{Manifest, MaskVolume};
use crate::error::{bail, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl GroupStat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanScores {
    pub kl_grade: u8,
    /// Volumetric DSC per evaluated class, aligned with `DscReport::classes`.
    pub dsc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DscReport {
    pub classes: Vec<u8>,
    pub per_scan: BTreeMap<String, ScanScores>,
    pub per_class_mean: Vec<GroupStat>,
    pub stratified: BTreeMap<u8, Vec<GroupStat>>,
    pub convention: DscConvention,
}

impl DscReport {
    pub fn from_scores(classes: Vec<u8>, per_scan: BTreeMap<String, ScanScores>, convention: DscConvention) -> Self {
        let column = |k: usize, grade: Option<u8>| -> Vec<f64> {
            per_scan
                .values()
                .filter(|s| grade.is_none_or(|g| s.kl_grade == g))
                .map(|s| s.dsc[k])
                .collect()
        };
        let per_class_mean = (0..classes.len()).map(|k| GroupStat::of(&column(k, None))).collect();
        let grades: std::collections::BTreeSet<u8> = per_scan.values().map(|s| s.kl_grade).collect();
        let stratified = grades
            .into_iter()
            .map(|g| (g, (0..classes.len()).map(|k| GroupStat::of(&column(k, Some(g)))).collect()))
            .collect();
        Self {
            classes,
            per_scan,
            per_class_mean,
            stratified,
            convention,
        }
    }

    pub fn class_index(&self, class: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `(scan_id, dsc)` for one class in scan-id order.
    pub fn class_values(&self, class: u8) -> Result<Vec<(&str, f64)>> {
        let Some(k) = self.class_index(class) else {
            bail!(Data, "class {class} is not in the report");
        };
        Ok(self.per_scan.iter().map(|(id, s)| (id.as_str(), s.dsc[k])).collect())
    }
}

/// Per-class volumetric DSC per scan, grouped by KL grade and overall.
/// Masks must share the same (registered or native) orientation.
pub fn stratified_report(
    predictions: &BTreeMap<String, MaskVolume>,
    references: &BTreeMap<String, MaskVolume>,
    manifest: &Manifest,
    classes: &[u8],
    convention: DscConvention,
) -> Result<DscReport> {
    if predictions.is_empty() {
        bail!(Data, "no predictions to evaluate");
    }
    let mut jobs = Vec::with_capacity(predictions.len());
    for (id, pred) in predictions {
        let Some(reference) = references.get(id) else {
            bail!(Data, "scan {id} has no reference mask");
        };
        let Some(rec) = manifest.find(id) else {
            bail!(Data, "scan {id} is not in the manifest");
        };
        jobs.push((id, pred, reference, rec.kl_grade));
    }
    let scores = par::map_slice(&jobs, |(id, pred, reference, grade)| {
        let dsc = classes
            .iter()
            .map(|&c| volumetric_dsc(pred, reference, c, convention))
            .collect::<Result<Vec<_>>>()?;
        Ok(((*id).clone(), ScanScores { kl_grade: *grade, dsc }))
    });
    let per_scan = scores.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
    Ok(DscReport::from_scores(classes.to_vec(), per_scan, convention))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(entries: &[(&str, u8, f64)]) -> DscReport {
        let per_scan = entries
            .iter()
            .map(|&(id, g, d)| (id.to_string(), ScanScores { kl_grade: g, dsc: vec![d] }))
            .collect();
        DscReport::from_scores(vec![1], per_scan, DscConvention::default())
    }

    #[test]
    fn all_row_is_average_of_single_scan_grades() {
        let r = scores(&[("a", 1, 0.6), ("b", 2, 0.8)]);
        assert!((r.per_class_mean[0].mean - 0.7).abs() < 1e-15);
        assert_eq!(r.stratified[&1][0].std, 0.0);
        assert_eq!(r.stratified[&2][0].count, 1);
    }

    #[test]
    fn all_row_is_count_weighted_grade_rows() {
        let r = scores(&[("a", 1, 0.6), ("b", 1, 0.9), ("c", 3, 0.2), ("d", 3, 0.5), ("e", 3, 0.55)]);
        let weighted: f64 = r.stratified.values().map(|g| g[0].mean * g[0].count as f64).sum::<f64>() / 5.0;
        assert!((weighted - r.per_class_mean[0].mean).abs() < 1e-9);
        let counts: usize = r.stratified.values().map(|g| g[0].count).sum();
        assert_eq!(counts, r.per_scan.len());
    }
}
