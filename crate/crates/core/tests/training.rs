mod common;

use common::{small_benchmark, small_config};
use kneeseg::data_model::{DomainRole, Manifest};
use kneeseg::training::{ensemble_predict, load_target_slices, load_train_slices, plan_folds, run_experiment, FoldTrainer, Setting};
use kneeseg::Error;

fn segm_curve(f: &kneeseg::training::TrainedFold) -> Vec<f64> {
    f.curves.iter().map(|c| c.segm_loss()).collect()
}

#[test]
fn zero_adversarial_weight_reproduces_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 1);
    let base = small_config(Setting::Baseline);
    let mut uda = base.clone();
    uda.setting = Setting::Uda1;
    uda.uda_weights.gamma_adv = 0.0;
    let a = run_experiment(&base, &m, None, Some(&[0])).unwrap();
    let b = run_experiment(&uda, &m, None, Some(&[0])).unwrap();
    assert_eq!(a[0].segmenter.params.digest(false), b[0].segmenter.params.digest(false));
    assert_eq!(segm_curve(&a[0]), segm_curve(&b[0]));
}

#[test]
fn mixup_with_unit_lambda_reproduces_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 2);
    let base = small_config(Setting::Baseline);
    let mut mix = base.clone();
    mix.setting = Setting::Mixup;
    mix.mixup_force_lambda = Some(1.0);
    let a = run_experiment(&base, &m, None, Some(&[1])).unwrap();
    let b = run_experiment(&mix, &m, None, Some(&[1])).unwrap();
    assert_eq!(a[0].segmenter_digest(), b[0].segmenter_digest());
    assert_eq!(segm_curve(&a[0]), segm_curve(&b[0]));
}

#[test]
fn reruns_write_identical_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    let m = small_benchmark(data.path(), 3);
    let cfg = small_config(Setting::Uda2);
    let (o1, o2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_experiment(&cfg, &m, Some(o1.path()), None).unwrap();
    let b = run_experiment(&cfg, &m, Some(o2.path()), None).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.segmenter_digest(), y.segmenter_digest());
    }
    for f in 0..2 {
        for part in ["segmenter/params.bin", "discriminator/params.bin", "aux_discriminator/params.bin", "curves.csv"] {
            let p = format!("fold_{f}/{part}");
            let (x, y) = (std::fs::read(o1.path().join(&p)).unwrap(), std::fs::read(o2.path().join(&p)).unwrap());
            assert!(x == y, "{p} differs between reruns");
        }
    }
}

#[test]
fn segmenter_step_sees_the_discriminator_before_its_update() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 4);
    let cfg = small_config(Setting::Uda1);
    let plan = &plan_folds(&cfg, &m).unwrap()[0];
    let src = load_train_slices(&m, &plan.source_train, &cfg).unwrap();
    let tgt = load_target_slices(&m, &plan.target_train, &cfg).unwrap();
    let mut fast = cfg.clone();
    fast.lr_discriminator = cfg.lr_discriminator * 50.0;
    let mut a = FoldTrainer::new(&cfg, 0, src.clone(), tgt.clone()).unwrap();
    let mut b = FoldTrainer::new(&fast, 0, src, tgt).unwrap();
    let batches = a.epoch_batches(0);
    let d0 = a.discriminator.as_ref().unwrap().params.digest(true);
    a.step(0, 0, &batches[0]).unwrap();
    b.step(0, 0, &batches[0]).unwrap();
    assert_eq!(a.segmenter.params.digest(true), b.segmenter.params.digest(true));
    let (da, db) = (a.discriminator.as_ref().unwrap().params.digest(true), b.discriminator.as_ref().unwrap().params.digest(true));
    assert_ne!(da, d0);
    assert_ne!(da, db);
    a.step(0, 1, &batches[1]).unwrap();
    b.step(0, 1, &batches[1]).unwrap();
    assert_ne!(a.segmenter.params.digest(true), b.segmenter.params.digest(true));
}

#[test]
fn weight_decay_follows_the_setting() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 5);
    for (s, ws, wd) in [
        (Setting::Baseline, 5e-5, None),
        (Setting::Mixup, 5e-5, None),
        (Setting::MixupNoWd, 0.0, None),
        (Setting::Uda1, 5e-5, Some(5e-5)),
        (Setting::MixupUda1, 0.0, Some(5e-5)),
    ] {
        let mut cfg = small_config(s);
        cfg.epochs = 1;
        cfg.lr_drop_epoch = 1;
        let f = &run_experiment(&cfg, &m, None, Some(&[0])).unwrap()[0];
        assert_eq!(f.segmenter_weight_decay, ws, "{s}");
        assert_eq!(f.discriminator_weight_decay, wd, "{s}");
    }
    let mut bad = small_config(Setting::MixupNoWd);
    bad.weight_decay = 5e-5;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn adaptation_without_target_domain_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 6);
    let recs = m.records.iter().filter(|r| m.role_of(r) != Some(DomainRole::UnlabeledTarget)).cloned().collect();
    let roles = m.domain_roles.iter().filter(|(_, r)| **r != DomainRole::UnlabeledTarget).map(|(k, v)| (k.clone(), *v)).collect();
    let m = Manifest::new(recs, roles, m.root.clone()).unwrap();
    for s in [Setting::Uda1, Setting::Uda2, Setting::MixupUda1] {
        let err = run_experiment(&small_config(s), &m, None, None).unwrap_err();
        assert_eq!(err.code(), "ConfigError", "{s}");
    }
    assert!(run_experiment(&small_config(Setting::Baseline), &m, None, Some(&[0])).is_ok());
}

#[test]
fn ensemble_of_copies_matches_the_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 7);
    let cfg = small_config(Setting::Baseline);
    let plan = &plan_folds(&cfg, &m).unwrap()[0];
    let src = load_train_slices(&m, &plan.validation, &cfg).unwrap();
    let images: Vec<_> = src.iter().map(|s| s.image.clone()).collect();
    let net = FoldTrainer::new(&cfg, 0, src, Vec::new()).unwrap().segmenter;
    let (one, l1) = ensemble_predict(&mut [net.clone()], &images, 4).unwrap();
    let (three, l3) = ensemble_predict(&mut [net.clone(), net.clone(), net], &images, 4).unwrap();
    for (a, b) in one.probabilities().data().iter().zip(three.probabilities().data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(l1, l3);
}
