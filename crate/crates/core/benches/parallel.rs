//! Parallel vs sequential throughput of the hot kernels.
//!
//! With the default `parallel` feature each kernel is measured on a
//! single-thread rayon pool and on the global pool. Built with
//! `--no-default-features` only the sequential path exists.

use airtemp_core::nn::conv2d_forward;
use airtemp_core::synth::{generate_scene, SceneSpec};
use airtemp_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, Runner)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let n = rayon::current_num_threads();
    vec![
        ("1-thread".into(), Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f))),
        (format!("global-{n}"), Box::new(|f: &mut (dyn FnMut() + Send)| f())),
    ]
}

#[cfg(not(feature = "parallel"))]
fn pools() -> Vec<(String, Runner)> {
    vec![("sequential".into(), Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
}

fn conv(c: &mut Criterion) {
    let x = Tensor::from_fn(&[32, 64, 64], |i| ((i * 7919) % 113) as f32 / 113.0 - 0.5);
    let w = Tensor::from_fn(&[32, 32, 3, 3], |i| ((i * 104729) % 97) as f32 / 970.0 - 0.05);
    let b = Tensor::zeros(&[32]);
    let mut g = c.benchmark_group("conv3x3_32ch_64x64");
    for (name, run) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |bench| {
            bench.iter(|| {
                run(&mut || {
                    black_box(conv2d_forward(&x, &w, &b).unwrap());
                })
            })
        });
    }
    g.finish();
}

fn scene(c: &mut Criterion) {
    let spec = SceneSpec {
        height: 48,
        width: 48,
        n_days: 20,
        n_stations: 8,
        seed: 1,
        ..Default::default()
    };
    let mut g = c.benchmark_group("synth_48x48x20");
    g.sample_size(10);
    for (name, run) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |bench| {
            bench.iter(|| {
                run(&mut || {
                    black_box(generate_scene(&spec).unwrap());
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, scene);
criterion_main!(benches);
