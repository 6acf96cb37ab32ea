use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use spurtrain_bench::decoy_batch;
use spurtrain_core::nn::{build_cnn, sgd_step, CnnWidths, Objective};
use spurtrain_core::tensor::{grad_with, GradOptions};
use spurtrain_core::{Graph, SgdConfig, Tensor, XsConfig};

fn conv(c: &mut Criterion) {
    let x = Tensor::new(vec![16, 8, 28, 28], (0..16 * 8 * 784).map(|i| (i % 13) as f64 * 0.1).collect()).unwrap();
    let w = Tensor::new(vec![16, 8, 3, 3], (0..16 * 72).map(|i| (i % 7) as f64 * 0.01).collect()).unwrap();
    c.bench_function("conv2d 16x8x28x28 k3", |b| b.iter(|| black_box(x.conv2d(&w, None, 1, 1).unwrap())));
}

fn training_steps(c: &mut Criterion) {
    let batch = decoy_batch(64);
    let sgd = SgdConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 64,
        epochs: 1,
    };
    let mut group = c.benchmark_group("minibatch step");
    group.sample_size(10);
    for xs in [XsConfig::none(), XsConfig::tap(1e-3), XsConfig::rrr(1e-3)] {
        let mut model = build_cnn(CnnWidths::DESK, 0);
        let mut velocity = Vec::new();
        group.bench_with_input(BenchmarkId::from_parameter(xs.method.name()), &xs, |b, xs| {
            b.iter(|| {
                let graph = Graph::new();
                let params = model.bind(&graph);
                let loss = xs.loss(&model, &params, &batch).unwrap();
                let refs: Vec<&Tensor> = params.iter().collect();
                let grads = grad_with(
                    &loss,
                    &refs,
                    GradOptions {
                        create_graph: false,
                        allow_unused: true,
                    },
                )
                .unwrap();
                drop(params);
                sgd_step(&mut model.params, &grads, &sgd, &mut velocity).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, training_steps);
criterion_main!(benches);
