use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::config::ExperimentConfig;
use super::trainer::{train_fold, TrainSlice, TrainedFold, ValidationScan};
use crate::data_model::{split_records, subject_wise_partition, DomainRole, Image, Manifest, MaskVolume, ScanRecord};
use crate::error::{bail, Result};
use crate::evaluation::{
    emit_outputs, register_mask, slice_profile, stratified_report, DscReport, EmittedFiles, ProfileOptions, SliceProfile,
};
use crate::networks::prediction::argmax_labels;
use crate::networks::{PredictionBatch, ProbMaps, SegmentationNetwork};
use crate::par;
use crate::preprocess::{preprocess_volume, PreparedSlice};
use crate::seed;
use crate::tensor::Tensor;

/// Records assigned to one fold: labeled source training and validation
/// scans, and the unlabeled target scans used for adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub source_train: Vec<ScanRecord>,
    pub validation: Vec<ScanRecord>,
    pub target_train: Vec<ScanRecord>,
    /// Target fold held out for this source fold.
    pub paired_target_fold: Option<usize>,
}

/// Subject-wise stratified folds per domain, with target folds paired to
/// source folds by a seeded permutation.
pub fn plan_folds(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<FoldPlan>> {
    let k = cfg.fold_count;
    let source = manifest.with_role(DomainRole::LabeledSource);
    if source.is_empty() {
        bail!(Config, "manifest has no labeled source scans");
    }
    let split = split_records(&source, k, seed::derive_seed(cfg.seed, "cv-source"))?;
    let target_plan = if cfg.setting.uses_uda() {
        let target = manifest.with_role(DomainRole::UnlabeledTarget);
        if target.is_empty() {
            bail!(Config, "{} needs an unlabeled target domain in the manifest", cfg.setting);
        }
        let tsplit = split_records(&target, k, seed::derive_seed(cfg.seed, "cv-target"))?;
        let mut pairing: Vec<usize> = (0..k).collect();
        pairing.shuffle(&mut seed::stream(cfg.seed, "fold-pairing"));
        Some((target, tsplit, pairing))
    } else {
        None
    };
    (0..k)
        .map(|f| {
            let (source_train, validation) = subject_wise_partition(&source, &split, f)?;
            let (target_train, paired) = match &target_plan {
                Some((target, tsplit, pairing)) => (subject_wise_partition(target, tsplit, pairing[f])?.0, Some(pairing[f])),
                None => (Vec::new(), None),
            };
            Ok(FoldPlan {
                fold_index: f,
                source_train,
                validation,
                target_train,
                paired_target_fold: paired,
            })
        })
        .collect()
}

fn prepare(manifest: &Manifest, records: &[ScanRecord], cfg: &ExperimentConfig, labeled: bool) -> Result<Vec<Vec<PreparedSlice>>> {
    let pre = &cfg.preprocess;
    par::map_slice(records, |rec| {
        if labeled {
            let (v, m) = manifest.load_labeled(rec)?;
            preprocess_volume(&v, Some(&m), pre)
        } else {
            preprocess_volume(&manifest.load_volume(rec)?, None, pre)
        }
    })
    .into_iter()
    .collect()
}

fn strided<T>(slices: Vec<T>, stride: usize) -> impl Iterator<Item = T> {
    slices.into_iter().enumerate().filter(move |(i, _)| i % stride == 0).map(|(_, s)| s)
}

pub fn load_train_slices(manifest: &Manifest, records: &[ScanRecord], cfg: &ExperimentConfig) -> Result<Vec<TrainSlice>> {
    let mut out = Vec::new();
    for scan in prepare(manifest, records, cfg, true)? {
        out.extend(strided(scan, cfg.slice_stride).map(|s| TrainSlice {
            image: s.image,
            labels: s.labels.expect("labeled scan"),
        }));
    }
    Ok(out)
}

pub fn load_target_slices(manifest: &Manifest, records: &[ScanRecord], cfg: &ExperimentConfig) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for scan in prepare(manifest, records, cfg, false)? {
        out.extend(strided(scan, cfg.slice_stride).map(|s| s.image));
    }
    Ok(out)
}

/// Preprocessed images and reference masks, all slices, native orientation.
pub fn load_eval_scans(manifest: &Manifest, records: &[ScanRecord], cfg: &ExperimentConfig) -> Result<Vec<ValidationScan>> {
    let prepared = prepare(manifest, records, cfg, true)?;
    records
        .iter()
        .zip(prepared)
        .map(|(rec, slices)| {
            let labels: Vec<_> = slices.iter().map(|s| s.labels.clone().expect("labeled scan")).collect();
            Ok(ValidationScan {
                scan_id: rec.scan_id.clone(),
                labels: MaskVolume::from_slices(&labels)?,
                images: slices.into_iter().map(|s| s.image).collect(),
            })
        })
        .collect()
}

/// Trains the planned folds (all, or `only_folds`). Fold `k` writes its
/// artifacts to `out_dir/fold_k`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
    only_folds: Option<&[usize]>,
) -> Result<Vec<TrainedFold>> {
    cfg.validate()?;
    let plans = plan_folds(cfg, manifest)?;
    if let Some(sel) = only_folds {
        if let Some(bad) = sel.iter().find(|&&f| f >= cfg.fold_count) {
            bail!(Config, "fold {bad} out of range for {} folds", cfg.fold_count);
        }
    }
    let mut folds = Vec::new();
    for plan in plans {
        if only_folds.is_some_and(|sel| !sel.contains(&plan.fold_index)) {
            continue;
        }
        let source = load_train_slices(manifest, &plan.source_train, cfg)?;
        let target = if cfg.setting.uses_uda() { load_target_slices(manifest, &plan.target_train, cfg)? } else { Vec::new() };
        let validation = load_eval_scans(manifest, &plan.validation, cfg)?;
        let dir = out_dir.map(|d| d.join(format!("fold_{}", plan.fold_index)));
        folds.push(train_fold(cfg, plan.fold_index, source, target, &validation, dir.as_deref())?);
    }
    Ok(folds)
}

/// Mean of the fold models' softmax maps for a stack of slices, with the
/// per-pixel argmax labels. Averaging is done in double precision.
pub fn ensemble_predict(models: &mut [SegmentationNetwork<f32>], images: &[Image], batch: usize) -> Result<(PredictionBatch<f32>, MaskVolume)> {
    if models.is_empty() {
        bail!(Config, "ensemble needs at least one model");
    }
    if images.is_empty() {
        bail!(Data, "no slices to predict");
    }
    let (h, w) = images[0].dims();
    let classes = models[0].config().class_count;
    if models.iter().any(|m| m.config().class_count != classes || m.config().input_channels != 1) {
        bail!(Shape, "fold models disagree on class or input channel count");
    }
    let mut acc = vec![0f64; images.len() * classes * h * w];
    for m in models.iter_mut() {
        let mut off = 0;
        for chunk in images.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * h * w);
            for im in chunk {
                if im.dims() != (h, w) {
                    bail!(Shape, "slices differ in size");
                }
                data.extend_from_slice(im.data());
            }
            let x = Tensor::from_vec([chunk.len(), 1, h, w], data)?;
            let p = m.predict(&x, false)?;
            for (a, &v) in acc[off..].iter_mut().zip(p.probabilities().data()) {
                *a += f64::from(v);
            }
            off += p.probabilities().data().len();
        }
    }
    let k = models.len() as f64;
    let mean = Tensor::from_vec([images.len(), classes, h, w], acc.into_iter().map(|v| (v / k) as f32).collect())?;
    let labels = argmax_labels(&mean).concat();
    let batch = PredictionBatch {
        main: ProbMaps::from_probabilities(mean)?,
        aux: None,
    };
    Ok((batch, MaskVolume::new(images.len(), h, w, labels)?))
}

/// Ensemble predictions and references for annotated scans, registered to
/// the canonical laterality, keyed by scan id.
pub fn predict_scans(
    models: &mut [SegmentationNetwork<f32>],
    manifest: &Manifest,
    records: &[ScanRecord],
    cfg: &ExperimentConfig,
) -> Result<(BTreeMap<String, MaskVolume>, BTreeMap<String, MaskVolume>)> {
    let scans = load_eval_scans(manifest, records, cfg)?;
    let mut preds = BTreeMap::new();
    let mut refs = BTreeMap::new();
    for (rec, scan) in records.iter().zip(scans) {
        let (_, labels) = ensemble_predict(models, &scan.images, cfg.batch_size)?;
        preds.insert(rec.scan_id.clone(), register_mask(&labels, rec.laterality));
        refs.insert(rec.scan_id.clone(), register_mask(&scan.labels, rec.laterality));
    }
    Ok((preds, refs))
}

/// Stratified report and per-class slice profiles for the test-role scans,
/// written to `out_dir` under `method`.
pub fn evaluate_models(
    models: &mut [SegmentationNetwork<f32>],
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    classes: &[u8],
    opts: &ProfileOptions,
    method: &str,
    out_dir: &Path,
) -> Result<(DscReport, Vec<SliceProfile>, EmittedFiles)> {
    let records = manifest.with_role(DomainRole::Test);
    if records.is_empty() {
        bail!(Data, "manifest has no test-role scans");
    }
    let (preds, refs) = predict_scans(models, manifest, &records, cfg)?;
    let report = stratified_report(&preds, &refs, manifest, classes, opts.convention)?;
    let p: Vec<MaskVolume> = preds.values().cloned().collect();
    let r: Vec<MaskVolume> = refs.values().cloned().collect();
    let profiles = classes
        .iter()
        .map(|&c| slice_profile(&p, &r, c, opts, seed::derive_seed(cfg.seed, "bootstrap")))
        .collect::<Result<Vec<_>>>()?;
    let files = emit_outputs(&report, &profiles, method, out_dir)?;
    Ok((report, profiles, files))
}
