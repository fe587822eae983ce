#![allow(dead_code)]

use kneeseg::losses::{
    adv_loss, bce_grad, discr_loss, mce_grad, mce_loss, mix_images, mixup_grad, mixup_loss, LabelBatch, MixupDraw,
    SOURCE_LABEL, TARGET_LABEL,
};
use kneeseg::networks::{build_discriminator, build_segmenter, DiscriminatorConfig, DomainDiscriminator, ProbMaps, SegNetConfig, SegmentationNetwork};
use kneeseg::nn::ops::softmax_backward;
use kneeseg::nn::{Grads, Mode, ParamKind, ParamSet};
use kneeseg::tensor::Tensor;
use rand::Rng;

pub const SIDE: usize = 16;

pub fn tiny_segmenter(seed: u64) -> SegmentationNetwork<f64> {
    let cfg = SegNetConfig {
        base_filters: 3,
        depth: 3,
        ..SegNetConfig::default()
    };
    build_segmenter(&cfg, None, seed).unwrap()
}

pub fn tiny_discriminator(seed: u64) -> DomainDiscriminator<f64> {
    let cfg = DiscriminatorConfig {
        filter_sequence: vec![4, 6, 1],
        ..DiscriminatorConfig::default()
    };
    build_discriminator(&cfg, 5, seed).unwrap()
}

pub fn random_images<R: Rng>(n: usize, rng: &mut R) -> Tensor<f64> {
    let data = (0..n * SIDE * SIDE).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec([n, 1, SIDE, SIDE], data).unwrap()
}

pub fn random_labels<R: Rng>(n: usize, rng: &mut R) -> LabelBatch {
    LabelBatch::new(n, SIDE, SIDE, (0..n * SIDE * SIDE).map(|_| rng.random_range(0..5u8)).collect()).unwrap()
}

/// Flat (entry, offset) addresses of every trainable scalar.
fn trainable_coords<T: kneeseg::tensor::Scalar>(ps: &ParamSet<T>) -> Vec<(usize, usize)> {
    ps.entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .flat_map(|(i, e)| (0..e.data.len()).map(move |j| (i, j)))
        .collect()
}

fn grad_at(ps: &ParamSet<f64>, g: &Grads<f64>, (i, j): (usize, usize)) -> f64 {
    let id = ps.ids().nth(i).unwrap();
    g.get(id)[j]
}

/// Largest relative error between analytic and central-difference
/// gradients at `count` random coordinates. The denominator is floored at
/// 1e-6 so coordinates with vanishing gradient compare absolutely.
pub fn check_coords<R: Rng>(
    ps: &mut ParamSet<f64>,
    analytic: &Grads<f64>,
    count: usize,
    rng: &mut R,
    mut loss: impl FnMut(&mut ParamSet<f64>) -> f64,
) -> f64 {
    let coords = trainable_coords(ps);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let c = coords[rng.random_range(0..coords.len())];
        let a = grad_at(ps, analytic, c);
        let orig = ps.entries()[c.0].data[c.1];
        ps.entries_mut()[c.0].data[c.1] = orig + eps;
        let up = loss(ps);
        ps.entries_mut()[c.0].data[c.1] = orig - eps;
        let down = loss(ps);
        ps.entries_mut()[c.0].data[c.1] = orig;
        let n = (up - down) / (2.0 * eps);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
    }
    worst
}

fn seg_probs(s: &mut SegmentationNetwork<f64>, x: &Tensor<f64>) -> ProbMaps<f64> {
    let (out, _) = s.forward(x, Mode::TrainFrozenStats, false).unwrap();
    ProbMaps::from_logits(&out.logits)
}

pub fn gradcheck_mce(seed: u64) -> f64 {
    let mut rng = kneeseg::seed::stream(seed, "gradcheck-mce");
    let mut s = tiny_segmenter(seed);
    let x = random_images(2, &mut rng);
    let y = random_labels(2, &mut rng);
    let (out, cache) = s.forward(&x, Mode::TrainFrozenStats, false).unwrap();
    let p = ProbMaps::from_logits(&out.logits);
    let mut g = Grads::zeros_like(&s.params);
    s.backward(&cache.unwrap(), &mce_grad(&p, &y, 1.0).unwrap(), None, &mut g).unwrap();
    let mut ps = s.params.clone();
    check_coords(&mut ps, &g, 10, &mut rng, |ps| {
        s.params = ps.clone();
        mce_loss(&seg_probs(&mut s, &x), &y).unwrap()
    })
}

pub fn gradcheck_mixup(seed: u64) -> f64 {
    let mut rng = kneeseg::seed::stream(seed, "gradcheck-mixup");
    let mut s = tiny_segmenter(seed);
    let x = random_images(3, &mut rng);
    let y = random_labels(3, &mut rng);
    let draw = MixupDraw {
        lam: 0.37,
        permutation: vec![2, 0, 1],
        alpha: 0.7,
    };
    let xm = mix_images(&x, &draw).unwrap();
    let (out, cache) = s.forward(&xm, Mode::TrainFrozenStats, false).unwrap();
    let p = ProbMaps::from_logits(&out.logits);
    let mut g = Grads::zeros_like(&s.params);
    s.backward(&cache.unwrap(), &mixup_grad(&p, &y, &draw, 1.0).unwrap(), None, &mut g).unwrap();
    let mut ps = s.params.clone();
    check_coords(&mut ps, &g, 10, &mut rng, |ps| {
        s.params = ps.clone();
        mixup_loss(&seg_probs(&mut s, &xm), &y, &draw).unwrap()
    })
}

/// Adversarial loss gradient with respect to the segmenter parameters,
/// back-propagated through a fixed discriminator.
pub fn gradcheck_adversarial(seed: u64) -> f64 {
    let mut rng = kneeseg::seed::stream(seed, "gradcheck-adv");
    let mut s = tiny_segmenter(seed);
    let d = tiny_discriminator(seed);
    let x = random_images(2, &mut rng);
    let (out, cache) = s.forward(&x, Mode::TrainFrozenStats, false).unwrap();
    let p = ProbMaps::from_logits(&out.logits);
    let (dl, dcache) = d.forward(&p.probabilities).unwrap();
    let dp = d.backward(&dcache, &bce_grad(&dl, SOURCE_LABEL, 1.0), None);
    let dlogits = softmax_backward(&p.probabilities, &dp);
    let mut g = Grads::zeros_like(&s.params);
    s.backward(&cache.unwrap(), &dlogits, None, &mut g).unwrap();
    let mut ps = s.params.clone();
    check_coords(&mut ps, &g, 10, &mut rng, |ps| {
        s.params = ps.clone();
        adv_loss(&d, &seg_probs(&mut s, &x)).unwrap()
    })
}

/// Discriminator loss gradient with respect to the discriminator
/// parameters, segmenter outputs held fixed.
pub fn gradcheck_discriminator(seed: u64) -> f64 {
    let mut rng = kneeseg::seed::stream(seed, "gradcheck-discr");
    let mut s = tiny_segmenter(seed);
    let mut d = tiny_discriminator(seed);
    let ps_src = seg_probs(&mut s, &random_images(2, &mut rng));
    let ps_tgt = seg_probs(&mut s, &random_images(2, &mut rng));
    let (ls, cs) = d.forward(&ps_src.probabilities).unwrap();
    let (lt, ct) = d.forward(&ps_tgt.probabilities).unwrap();
    let mut g = Grads::zeros_like(&d.params);
    d.backward(&cs, &bce_grad(&ls, SOURCE_LABEL, 1.0), Some(&mut g));
    d.backward(&ct, &bce_grad(&lt, TARGET_LABEL, 1.0), Some(&mut g));
    let mut ps = d.params.clone();
    check_coords(&mut ps, &g, 10, &mut rng, |ps| {
        d.params = ps.clone();
        discr_loss(&d, &ps_src, &ps_tgt).unwrap().total
    })
}

use kneeseg::data_model::Manifest;
use kneeseg::phantom::{generate_benchmark, BenchmarkSpec, Gap, Scale};
use kneeseg::training::{ExperimentConfig, Setting};

/// Four source subjects, two target and two test scans at tiny scale.
pub fn small_benchmark(dir: &std::path::Path, seed: u64) -> Manifest {
    let mut spec = BenchmarkSpec::with_gap(4, 2, seed, Gap::Strong, Scale::Tiny);
    spec.test_count = Some(2);
    generate_benchmark(dir, &spec).unwrap()
}

/// Two short epochs on 32×32 crops of every fourth slice.
pub fn small_config(setting: Setting) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny(setting);
    cfg.epochs = 2;
    cfg.lr_drop_epoch = 1;
    cfg.fold_count = 2;
    cfg.batch_size = 4;
    cfg.slice_stride = 4;
    cfg.validate_each_epoch = false;
    cfg.preprocess.crop_size = (32, 32);
    cfg
}
