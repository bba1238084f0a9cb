use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latent_origin::prelude::*;
use latent_origin::zoo::{train_autoencoder, ConvSpec, TrainingConfig};

fn small_vae() -> Autoencoder {
    let images = synthetic_images([3, 32, 32], 16, 0).unwrap();
    let cfg = TrainingConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainingConfig::default()
    };
    train_autoencoder(&images, &ConvSpec::vae([3, 32, 32]), &cfg).unwrap().0
}

fn decoder(c: &mut Criterion) {
    let m = small_vae();
    let x = synthetic_images([3, 32, 32], 1, 5).unwrap().remove(0);
    let z = m.encode(&x).unwrap();
    c.bench_function("decode 3x32x32", |b| b.iter(|| m.decode(black_box(&z)).unwrap()));
    c.bench_function("loss and latent gradient", |b| {
        b.iter(|| m.loss_and_latent_grad(black_box(&z), &x).unwrap())
    });
}

fn inversion(c: &mut Criterion) {
    let m = small_vae();
    let x = m.make_belonging(&synthetic_images([3, 32, 32], 1, 6).unwrap()[0]).unwrap();
    let mut g = c.benchmark_group("inversion");
    g.sample_size(20);
    g.bench_function("encoder init, 100 steps", |b| {
        let cfg = InversionConfig::encoder();
        b.iter(|| invert_latent(&m, black_box(&x), &cfg).unwrap())
    });
    g.finish();
}

fn student_t(c: &mut Criterion) {
    c.bench_function("t cdf", |b| b.iter(|| student_t_cdf(black_box(2.7), black_box(98.0))));
    c.bench_function("t critical value", |b| {
        b.iter(|| critical_value(black_box(0.0005), black_box(98.0)))
    });
}

criterion_group!(benches, decoder, inversion, student_t);
criterion_main!(benches);
