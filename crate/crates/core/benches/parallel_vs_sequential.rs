//! Rayon backend against sequential execution on the hot paths.
//!
//! A default build measures the rayon pool and a one-thread pool; a
//! `--no-default-features` build measures the plain sequential fallback.
//! Compare the two with criterion baselines:
//!
//! ```text
//! cargo bench -p kneeseg --bench parallel_vs_sequential -- --save-baseline rayon
//! cargo bench -p kneeseg --bench parallel_vs_sequential --no-default-features -- --save-baseline sequential
//! ```

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kneeseg::data_model::{Laterality, MaskVolume};
use kneeseg::evaluation::{slice_profile, ProfileOptions};
use kneeseg::networks::{build_segmenter, SegNetConfig};
use kneeseg::nn::Mode;
use kneeseg::par;
use kneeseg::phantom::{gap_appearances, generate_phantom, Gap, PhantomSpec, Scale};
use kneeseg::tensor::Tensor;

/// `(label, pool)` pairs to run each workload under.
fn backends() -> Vec<(String, Option<rayon::ThreadPool>)> {
    if par::is_parallel() {
        let n = rayon::current_num_threads();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![(format!("rayon-{n}"), None), ("rayon-1".into(), Some(one))]
    } else {
        vec![("sequential".into(), None)]
    }
}

fn run<R>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn segmenter_forward(c: &mut Criterion) {
    let cfg = SegNetConfig {
        base_filters: 8,
        depth: 4,
        ..SegNetConfig::default()
    };
    let net = build_segmenter::<f32>(&cfg, None, 0).unwrap();
    let data = (0..4 * 96 * 96).map(|i| (i % 97) as f32 / 97.0).collect();
    let x = Tensor::from_vec([4, 1, 96, 96], data).unwrap();
    let mut g = c.benchmark_group("segmenter_forward_4x96x96");
    g.sample_size(10);
    for (label, pool) in backends() {
        g.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| {
                let mut n = net.clone();
                run(&pool, || n.forward(&x, Mode::Train, false).unwrap().0)
            })
        });
    }
    g.finish();
}

fn phantom_scan(c: &mut Criterion) {
    let (appearance, _) = gap_appearances(Gap::Mild, Scale::Tiny);
    let spec = PhantomSpec {
        slice_count: 16,
        tissue_geometry_seed: 3,
        severity: 2,
        appearance,
        laterality: Laterality::Left,
    };
    let mut g = c.benchmark_group("phantom_scan_tiny");
    g.sample_size(10);
    for (label, pool) in backends() {
        g.bench_function(BenchmarkId::from_parameter(&label), |b| b.iter(|| run(&pool, || generate_phantom(&spec).unwrap())));
    }
    g.finish();
}

fn bootstrap_profile(c: &mut Criterion) {
    let (s, h, w) = (32, 24, 24);
    let masks = |k: usize| {
        let labels = (0..s * h * w).map(|i| (((i * 7 + k * 13) / 5) % 3) as u8).collect();
        MaskVolume::new(s, h, w, labels).unwrap()
    };
    let preds: Vec<_> = (0..20).map(masks).collect();
    let refs: Vec<_> = (0..20).map(|k| masks(k + 1)).collect();
    let opts = ProfileOptions::default();
    let mut g = c.benchmark_group("slice_profile_20_scans");
    g.sample_size(10);
    for (label, pool) in backends() {
        g.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| run(&pool, || slice_profile(&preds, &refs, 1, &opts, 0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, segmenter_forward, phantom_scan, bootstrap_profile);
criterion_main!(benches);
