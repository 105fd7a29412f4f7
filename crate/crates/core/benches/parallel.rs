use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use colam::data::{gen_synthetic, Split, SyntheticSpec};
use colam::labels::update_soft_labels;
use colam::nn::{batch_pass, Network, Objective};
use colam::par::{self, Exec};
use colam::rng::substream;
use colam::training::{run_colam, TrainConfig};

const MODES: [(&str, Exec); 2] = [("seq", Exec::Sequential), ("rayon", Exec::Parallel)];

fn gradient_pass(c: &mut Criterion) {
    let ds = gen_synthetic(&SyntheticSpec::tri_blob(0)).unwrap();
    let net = Network::mlp(ds.dim(), &[64], ds.classes(), &mut substream(0, "init", 0)).unwrap();
    let obj = Objective::tempered(1.5);
    let mut group = c.benchmark_group("batch_pass");
    for n in [64usize, 512, 1500] {
        let idx: Vec<usize> = ds.indices(Split::Train).into_iter().take(n).collect();
        let features: Vec<f64> = idx.iter().flat_map(|&i| ds.sample(i).to_vec()).collect();
        let mut targets = vec![0.0; n * ds.classes()];
        for (r, &i) in idx.iter().enumerate() {
            targets[r * ds.classes() + ds.label(i)] = 1.0;
        }
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| batch_pass(black_box(&net), &features, &targets, None, &obj, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn soft_label_update(c: &mut Criterion) {
    let ds = gen_synthetic(&SyntheticSpec::tri_blob(0)).unwrap();
    let net = Network::mlp(ds.dim(), &[64], ds.classes(), &mut substream(0, "init", 0)).unwrap();
    let mut group = c.benchmark_group("update_soft_labels");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| update_soft_labels(&net, &ds, 500, 1.5, 1, &mut substream(0, "peers", 1), exec).unwrap())
        });
    }
    group.finish();
}

fn independent_runs(c: &mut Criterion) {
    let ds = gen_synthetic(&SyntheticSpec::tri_blob(0)).unwrap();
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("colam_runs_x8");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                par::map(exec, &seeds, |&seed| {
                    let cfg = TrainConfig {
                        stages: 2,
                        epochs_per_stage: 2,
                        seed,
                        ..TrainConfig::default()
                    };
                    run_colam(&cfg, &ds).unwrap().final_test_top1()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gradient_pass, soft_label_update, independent_runs);
criterion_main!(benches);
