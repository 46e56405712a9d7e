use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hmoe_bench::{features, head, image};
use hmoe_core::metrics::ssim;
use hmoe_core::nn::Conv2d;
use hmoe_core::{ExperimentConfig, SrModel};
use rand::SeedableRng;

fn conv(c: &mut Criterion) {
    let x = features(32, 32, 32, 0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv2d_32x32x32");
    for k in [1, 3] {
        let conv = Conv2d::new(32, 32, k, true, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(k), &conv, |b, conv| b.iter(|| conv.forward(&x).unwrap()));
    }
    g.finish();
}

fn dense_vs_dispatch(c: &mut Criterion) {
    let feat = features(16, 24, 24, 2);
    let agg = features(16, 24, 24, 3);
    let mut g = c.benchmark_group("head_x4");
    for m in [2, 8] {
        let h = head(16, m, 4);
        g.bench_with_input(BenchmarkId::new("dense", m), &h, |b, h| b.iter(|| h.combine_dense(&feat, &agg).unwrap()));
        g.bench_with_input(BenchmarkId::new("dispatch", m), &h, |b, h| {
            b.iter(|| h.combine_dispatch(&feat, &agg).unwrap())
        });
    }
    g.finish();
}

fn full_model(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.channels = 16;
    cfg.backbone.blocks = 2;
    let model: SrModel = SrModel::from_seed(&cfg, 0).unwrap();
    let lr = image(32, 32, 4);
    c.bench_function("model_forward_32x32_x4", |b| b.iter(|| model.forward(&lr).unwrap()));
    let (_, cache) = model.forward_cached(&lr).unwrap();
    let d_sr = features(3, 128, 128, 5);
    c.bench_function("model_backward_32x32_x4", |b| b.iter(|| model.backward(&cache, &d_sr, 0.0).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = image(128, 128, 6);
    let b = image(128, 128, 7);
    c.bench_function("ssim_128", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
}

criterion_group!(benches, conv, dense_vs_dispatch, full_model, metrics);
criterion_main!(benches);
