//! Parallel against sequential execution of the two hottest data-parallel paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use texter::attribution::integrated_gradients;
use texter::image::Image;
use texter::models::{Architecture, ClassifierModel};
use texter::numerics::{Graph, Tensor, Var};
use texter::par::{self, Mode};
use texter::rng;

const MODES: [(&str, Mode); 2] = [("parallel", Mode::Parallel), ("sequential", Mode::Sequential)];

fn encoder_forward(c: &mut Criterion) {
    let side = 32;
    let model = ClassifierModel::init(Architecture::cnn(side, 64), 4, 0).unwrap();
    let mut r = rng::seeded(1);
    let images: Vec<Image> = (0..64)
        .map(|_| Image::new(side, side, (0..3 * side * side).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    let mut group = c.benchmark_group("encoder_features_64_images");
    for (name, mode) in MODES {
        par::set_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| model.features(&refs).unwrap()));
    }
    par::set_mode(Mode::Parallel);
    group.finish();
}

fn attribution(c: &mut Criterion) {
    let (d, h) = (512, 64);
    let mut r = rng::seeded(2);
    let a = Tensor::new(&[d, h], (0..d * h).map(|_| rng::normal(&mut r) / (d as f64).sqrt()).collect()).unwrap();
    let head = move |g: &mut Graph, z: Var| {
        let av = g.constant(a.clone());
        let p = g.matmul(z, av)?;
        let t = g.tanh(p);
        Ok(g.sum(t))
    };
    let z: Vec<f64> = (0..d).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
    let base = vec![0.0; d];
    let mut group = c.benchmark_group("integrated_gradients_m100");
    for (name, mode) in MODES {
        par::set_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| integrated_gradients(&head, &z, &base, 100).unwrap())
        });
    }
    par::set_mode(Mode::Parallel);
    group.finish();
}

criterion_group!(benches, encoder_forward, attribution);
criterion_main!(benches);
