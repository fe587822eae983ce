use serde::{Deserialize, Serialize};

use crate::data_model::{Laterality, MaskVolume, ScanRecord, Volume};
use crate::error::{bail, Result};

/// Scores assigned when one or both masks are empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DscConvention {
    pub both_empty: f64,
}

impl Default for DscConvention {
    fn default() -> Self {
        Self { both_empty: 1.0 }
    }
}

/// `(|pred ∩ ref|, |pred|, |ref|)` for one class.
pub fn dsc_counts(pred: &[u8], reference: &[u8], class: u8) -> Result<(u64, u64, u64)> {
    if pred.len() != reference.len() {
        bail!(Shape, "prediction has {} voxels, reference {}", pred.len(), reference.len());
    }
    let (mut inter, mut p, mut r) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(reference) {
        let (a, b) = (a == class, b == class);
        inter += (a && b) as u64;
        p += a as u64;
        r += b as u64;
    }
    Ok((inter, p, r))
}

fn from_counts(inter: u64, p: u64, r: u64, conv: DscConvention) -> f64 {
    if p + r == 0 {
        conv.both_empty
    } else {
        2.0 * inter as f64 / (p + r) as f64
    }
}

/// `2|P ∩ R| / (|P| + |R|)` on binary masks.
pub fn dsc(pred: &[bool], reference: &[bool], conv: DscConvention) -> Result<f64> {
    if pred.len() != reference.len() {
        bail!(Shape, "prediction has {} voxels, reference {}", pred.len(), reference.len());
    }
    let (mut inter, mut p, mut r) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(reference) {
        inter += (a && b) as u64;
        p += a as u64;
        r += b as u64;
    }
    Ok(from_counts(inter, p, r, conv))
}

pub fn class_dsc(pred: &[u8], reference: &[u8], class: u8, conv: DscConvention) -> Result<f64> {
    let (i, p, r) = dsc_counts(pred, reference, class)?;
    Ok(from_counts(i, p, r, conv))
}

/// Scan-wise DSC over all voxels of the stacked slices.
pub fn volumetric_dsc(pred: &MaskVolume, reference: &MaskVolume, class: u8, conv: DscConvention) -> Result<f64> {
    if pred.dims() != reference.dims() {
        bail!(Shape, "prediction {:?} vs reference {:?}", pred.dims(), reference.dims());
    }
    class_dsc(pred.labels(), reference.labels(), class, conv)
}

/// Per-slice `(DSC, reference contains the class)`.
pub fn planar_dsc(pred: &MaskVolume, reference: &MaskVolume, class: u8, conv: DscConvention) -> Result<Vec<(f64, bool)>> {
    if pred.dims() != reference.dims() {
        bail!(Shape, "prediction {:?} vs reference {:?}", pred.dims(), reference.dims());
    }
    (0..pred.slice_count())
        .map(|s| {
            let (i, p, r) = dsc_counts(pred.slice(s), reference.slice(s), class)?;
            Ok((from_counts(i, p, r, conv), r > 0))
        })
        .collect()
}

pub fn register_mask(mask: &MaskVolume, laterality: Laterality) -> MaskVolume {
    if laterality == Laterality::CANONICAL {
        mask.clone()
    } else {
        mask.mirrored()
    }
}

/// Reverses non-canonical scans along the slice axis so that slice 0 is medial.
pub fn register_laterality(volume: &Volume, mask: &MaskVolume, record: &ScanRecord) -> (Volume, MaskVolume) {
    if record.laterality == Laterality::CANONICAL {
        (volume.clone(), mask.clone())
    } else {
        (volume.mirrored(), mask.mirrored())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definitional_cases() {
        let c = DscConvention::default();
        let a = [true, true, false, false];
        assert_eq!(dsc(&a, &a, c).unwrap(), 1.0);
        assert_eq!(dsc(&a, &[false, false, true, true], c).unwrap(), 0.0);
        assert_eq!(dsc(&[false; 4], &[false; 4], c).unwrap(), 1.0);
        assert_eq!(dsc(&[false; 4], &a, c).unwrap(), 0.0);
        assert!(dsc(&a, &[true], c).is_err());
    }

    #[test]
    fn overlapping_blocks() {
        // 4x4 grid: pred covers columns 0..2 of rows 0..2, ref covers columns 1..3
        let pred: Vec<u8> = (0..16).map(|i| ((i / 4 < 2) && (i % 4 < 2)) as u8).collect();
        let reference: Vec<u8> = (0..16).map(|i| ((i / 4 < 2) && (1..3).contains(&(i % 4))) as u8).collect();
        assert_eq!(class_dsc(&pred, &reference, 1, DscConvention::default()).unwrap(), 0.5);
    }

    #[test]
    fn volumetric_is_not_mean_of_planar() {
        // slice 0: perfect small structure; slice 1: large structure half hit
        let pred = MaskVolume::new(2, 1, 4, vec![1, 0, 0, 0, 1, 1, 0, 0]).unwrap();
        let reference = MaskVolume::new(2, 1, 4, vec![1, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let c = DscConvention::default();
        let vol = volumetric_dsc(&pred, &reference, 1, c).unwrap();
        let planar: Vec<f64> = planar_dsc(&pred, &reference, 1, c).unwrap().into_iter().map(|p| p.0).collect();
        let mean_planar = planar.iter().sum::<f64>() / 2.0;
        assert!((vol - 6.0 / 8.0).abs() < 1e-15);
        assert!((mean_planar - (1.0 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((vol - mean_planar).abs() > 0.05);
    }
}
