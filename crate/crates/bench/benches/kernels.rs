use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use immunize_core::diffusion::{edit, EditRequest, EditSettings, ModelConfig, ToyLdm};
use immunize_core::immunize::{diffusion_attack, encoder_attack, AttackConfig, NoiseMode};
use immunize_core::{Graph, Rng};

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = rng.normal_tensor(&[8, 32, 16, 16]);
    let w = rng.normal_tensor(&[32, 32, 3, 3]);
    c.bench_function("conv2d 8x32x16x16 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(wv))
        })
    });
}

fn attacks(c: &mut Criterion) {
    let model = ToyLdm::new(ModelConfig::default(), 2).unwrap();
    let x = Rng::new(3).uniform_tensor(&[3, 32, 32], 0.0, 1.0);
    let cfg = AttackConfig {
        num_steps: 1,
        noise_mode: NoiseMode::Fixed,
        ..Default::default()
    };
    c.bench_function("encoder attack step", |b| {
        b.iter(|| black_box(encoder_attack(&model, &x, None, &cfg).unwrap()))
    });
    let req = EditRequest::new(x.clone(), Some(1), EditSettings::default(), 4);
    c.bench_function("diffusion attack step", |b| {
        b.iter(|| black_box(diffusion_attack(&model, &x, None, &req, &cfg).unwrap()))
    });
    c.bench_function("img2img edit", |b| b.iter(|| black_box(edit(&model, &req).unwrap())));
}

criterion_group!(benches, conv, attacks);
criterion_main!(benches);
