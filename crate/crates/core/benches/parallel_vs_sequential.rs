use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dasm::analysis::{landscape_slice, pad_matrix, sharpness_estimate, LandscapeConfig, ModelObjective, SharpnessConfig};
use dasm::model::{EncoderClassifier, ModelConfig};
use dasm::par::Exec;
use dasm::synth::{gen_feature_benchmark, BenchmarkConfig};

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn small_benchmark() -> BenchmarkConfig {
    BenchmarkConfig { embedding_rates: vec![0.1, 0.3, 0.5], per_cell: 400, ..Default::default() }
}

fn generation(c: &mut Criterion) {
    let cfg = small_benchmark();
    let mut group = c.benchmark_group("generate");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| gen_feature_benchmark(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

fn analyses(c: &mut Criterion) {
    let splits = gen_feature_benchmark(&small_benchmark(), Exec::Sequential).unwrap().remove(1);
    let model = EncoderClassifier::new(ModelConfig::default()).unwrap();
    let obj = ModelObjective::new(&model, &splits.test).unwrap();
    let sharp = SharpnessConfig { m: 16, ..Default::default() };
    let land = LandscapeConfig { grid: 11, ..Default::default() };

    let mut group = c.benchmark_group("analysis");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("pad_matrix", name), &exec, |b, &exec| {
            b.iter(|| pad_matrix(None, &splits.test, &splits.domain_names, splits.er, 0, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sharpness", name), &exec, |b, &exec| {
            b.iter(|| sharpness_estimate(&obj, &sharp, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("landscape", name), &exec, |b, &exec| {
            b.iter(|| landscape_slice(&obj, &land, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, generation, analyses);
criterion_main!(benches);
