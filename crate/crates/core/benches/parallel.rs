//! Sequential vs rayon execution on the two hot loops: backward sampling
//! and the energy-distance permutation test.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vsdm::data::Dataset;
use vsdm::drift::{DriftMatrixGrid, DriftMode};
use vsdm::kernel::KernelTable;
use vsdm::metrics::permutation_test;
use vsdm::par::Exec;
use vsdm::sampler::{sample_batch, SampleMode, SamplerSetup};
use vsdm::schedule::BetaSchedule;
use vsdm::score::{MlpLayout, ScoreModel};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sampling(c: &mut Criterion) {
    let schedule = BetaSchedule::linear(0.1, 10.0, 20).unwrap();
    let drift = DriftMatrixGrid::identity(2, DriftMode::DiagonalInvariant, 20);
    let table = KernelTable::build(&schedule, &drift).unwrap();
    let layout = MlpLayout {
        hidden: vec![64, 64],
        ..MlpLayout::standard(2)
    };
    let model = ScoreModel::new(layout, 1.0, 0).unwrap();
    let mut group = c.benchmark_group("sample_batch");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let setup = SamplerSetup { table: &table, drift: &drift, exec };
        group.bench_with_input(BenchmarkId::new(name, 2048), &setup, |b, setup| {
            b.iter(|| sample_batch(2048, SampleMode::Sde, setup, &model, 7, false).unwrap().checksum())
        });
    }
    group.finish();
}

fn energy(c: &mut Criterion) {
    let data = Dataset::spiral(vec![1.0, 8.0], 0);
    let a = data.generate_seeded(1000, 1);
    let b = data.generate_seeded(1000, 2);
    let mut group = c.benchmark_group("permutation_test");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::new(name, 1000), |bench| {
            bench.iter(|| permutation_test(black_box(a.view()), b.view(), 19, 0.95, 0, exec).unwrap().statistic)
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, energy);
criterion_main!(benches);
