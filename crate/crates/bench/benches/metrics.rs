use anople_bench::{rng, scored_labels, unit_rows};
use anople_core::config::SynthConfig;
use anople_core::eval::auroc;
use anople_core::scoring::{fuse_maps, AnomalyMap, Provenance};
use anople_core::synth::perlin_mask;
use anople_core::MemoryBank;
use candle_core::{Device, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_auroc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auroc");
    for n in [1_000, 100_000] {
        let (s, l) = scored_labels(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| auroc(black_box(&s), black_box(&l)).unwrap())
        });
    }
    group.finish();
}

fn bench_memory(c: &mut Criterion) {
    let dim = 896;
    let bank = MemoryBank::from_rows(unit_rows(225, dim, 2), dim, (15, 15)).unwrap();
    let q = Tensor::from_vec(unit_rows(225, dim, 3), (15, 15, dim), &Device::Cpu).unwrap();
    c.bench_function("memory_query_1shot_vitb", |b| {
        b.iter(|| bank.query(black_box(&q)).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let n = 240 * 240;
    let a = AnomalyMap::new(
        240,
        240,
        (0..n).map(|i| (i % 97) as f32 / 97.0).collect(),
        Provenance::Decoder,
    )
    .unwrap();
    let m = AnomalyMap::new(
        240,
        240,
        (0..n).map(|i| (i % 89) as f32 / 89.0).collect(),
        Provenance::Memory,
    )
    .unwrap();
    c.bench_function("fuse_240x240", |b| {
        b.iter(|| fuse_maps(black_box(&a), black_box(&m)).unwrap())
    });
}

fn bench_perlin(c: &mut Criterion) {
    let cfg = SynthConfig::default();
    let mut r = rng(4);
    c.bench_function("perlin_mask_240", |b| {
        b.iter(|| perlin_mask(240, 240, &cfg, &mut r))
    });
}

criterion_group!(
    benches,
    bench_auroc,
    bench_memory,
    bench_fusion,
    bench_perlin
);
criterion_main!(benches);
