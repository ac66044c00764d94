//! Serial against rayon execution of the hot batch loops. Build with
//! `--no-default-features` to time the sequential-only library.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dped::dataset::{IndexRow, PatchPair};
use dped::eval::{evaluate_with, SsimMode};
use dped::exec;
use dped::imageio::{images_to_tensor, ImageRGB};
use dped::nets::{GeneratorConfig, GeneratorWeights};

fn image(side: usize, seed: usize) -> ImageRGB {
    ImageRGB::from_fn(side, side, |c, y, x| {
        let t = (y * 7 + x * 13 + c * 5 + seed * 31) as f32;
        0.5 + 0.4 * (t * 0.05).sin() * (y as f32 * 0.11 + seed as f32).cos()
    })
}

fn modes() -> [(&'static str, bool); 2] {
    [("serial", true), ("parallel", false)]
}

fn generator_forward(c: &mut Criterion) {
    let gen = GeneratorWeights::<f32>::init(GeneratorConfig::with_channels(16), 1);
    let imgs: Vec<ImageRGB> = (0..8).map(|i| image(64, i)).collect();
    let refs: Vec<&ImageRGB> = imgs.iter().collect();
    let x = images_to_tensor::<f32>(&refs).unwrap();
    let mut group = c.benchmark_group("generator_forward_8x64");
    group.sample_size(10);
    for (name, serial) in modes() {
        exec::set_serial(serial);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| gen.forward_infer(&x).unwrap()));
    }
    exec::set_serial(false);
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let pairs: Vec<PatchPair> = (0..32)
        .map(|i| PatchPair {
            meta: IndexRow {
                pair_id: format!("p{i}"),
                origin_image: format!("o{i}"),
                row: 0,
                col: 0,
                shift_x: 0,
                shift_y: 0,
                rotation_deg: 0.0,
                cc: 1.0,
            },
            source: image(100, i),
            target: image(100, i + 1),
        })
        .collect();
    let mut group = c.benchmark_group("psnr_ssim_32x100");
    for (name, serial) in modes() {
        exec::set_serial(serial);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(&pairs, SsimMode::Gray, |p| Ok(p.source.clone())).unwrap())
        });
    }
    exec::set_serial(false);
    group.finish();
}

criterion_group!(benches, generator_forward, metrics);
criterion_main!(benches);
