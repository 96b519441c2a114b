use std::collections::BTreeMap;
use std::hint::black_box;

use artemis_core::autoencoder::{sample_latents, Decoder};
use artemis_core::config::DecoderChannelRule;
use artemis_core::gan::{diversity_loss, generator_adversarial_loss};
use artemis_core::params::ParamStore;
use artemis_core::vgg::{Backbone, BlockName};
use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 64;

fn backbone() -> Backbone {
    let path = std::env::temp_dir().join(format!(
        "artemis-bench-vgg-{}.safetensors",
        std::process::id()
    ));
    Backbone::write_random_weights(&path, 0).unwrap();
    let bb = Backbone::load(&path, DType::F32, &Device::Cpu).unwrap();
    let _ = std::fs::remove_file(&path);
    bb
}

fn extract(c: &mut Criterion) {
    let bb = backbone();
    let x = (Tensor::rand(0f32, 255.0, (4, 3, SIDE, SIDE), &Device::Cpu).unwrap())
        .contiguous()
        .unwrap();
    let mut g = c.benchmark_group("extract");
    g.sample_size(10);
    for blocks in [vec![BlockName::Block1Conv1], BlockName::ALL[1..].to_vec()] {
        let label = if blocks.len() == 1 { "block1" } else { "all" };
        g.bench_function(label, |b| {
            b.iter(|| black_box(bb.extract(&x, &blocks).unwrap()))
        });
    }
    g.finish();
}

fn decoder(c: &mut Criterion) {
    let store = ParamStore::new(0, DType::F32, &Device::Cpu);
    let dec = Decoder::new(&store, SIDE, DecoderChannelRule::Halving).unwrap();
    let z = sample_latents(
        &mut ChaCha8Rng::seed_from_u64(1),
        4,
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let mut g = c.benchmark_group("decoder");
    g.sample_size(10);
    g.bench_function("forward", |b| {
        b.iter(|| black_box(dec.forward_t(&z, false).unwrap()))
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let y = dec.forward_t(&z, true).unwrap();
            black_box(y.sum_all().unwrap().backward().unwrap())
        })
    });
    g.finish();
}

fn losses(c: &mut Criterion) {
    let dev = Device::Cpu;
    let z = Tensor::randn(0f32, 1.0, (3, 256), &dev).unwrap();
    let x = Tensor::rand(0f32, 255.0, (3, 3, 256, 256), &dev).unwrap();
    c.bench_function("diversity_loss_k3_256", |b| {
        b.iter(|| black_box(diversity_loss(&z, &x).unwrap()))
    });
    let d: BTreeMap<_, _> = BlockName::ALL[1..]
        .iter()
        .map(|&blk| (blk, Tensor::rand(0.01f32, 0.99, (8, 1), &dev).unwrap()))
        .collect();
    c.bench_function("adversarial_loss_5_blocks", |b| {
        b.iter(|| black_box(generator_adversarial_loss(&d).unwrap()))
    });
}

criterion_group!(benches, extract, decoder, losses);
criterion_main!(benches);
