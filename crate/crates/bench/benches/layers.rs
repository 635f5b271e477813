use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use grn_bench::setup;
use grn_core::crf::{viterbi, LatticeScores};
use grn_core::model::{lattice, loss};
use grn_core::{FusionKind, Graph};

fn model_passes(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for fusion in [FusionKind::Grn, FusionKind::None] {
        for seq_len in [10, 40] {
            let (config, params, batch) = setup(fusion, 10, seq_len);
            let id = format!("{fusion}/T={seq_len}");
            group.bench_function(BenchmarkId::new("forward", &id), |b| {
                b.iter(|| {
                    let mut g = Graph::new(0);
                    let p = params.bind(&mut g).unwrap();
                    loss(&mut g, &config, &p, &batch, true).unwrap()
                })
            });
            group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
                b.iter(|| {
                    let mut g = Graph::new(0);
                    let p = params.bind(&mut g).unwrap();
                    let l = loss(&mut g, &config, &p, &batch, true).unwrap();
                    g.backward(l).unwrap();
                })
            });
        }
    }
    group.finish();
}

fn crf_decode(c: &mut Criterion) {
    let (config, params, batch) = setup(FusionKind::Grn, 10, 40);
    let lat: LatticeScores = lattice(&config, &params, &batch).unwrap();
    c.bench_function("crf/viterbi B=10 T=40", |b| b.iter(|| viterbi(&lat)));
    c.bench_function("crf/log_partition B=10 T=40", |b| {
        b.iter(|| (0..10).map(|k| lat.log_partition(k).unwrap()).sum::<f64>())
    });
}

criterion_group!(benches, model_passes, crf_decode);
criterion_main!(benches);
