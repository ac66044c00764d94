mod common;

use common::{small_config, small_vgg, toy_pairs};
use dped::imageio::{blur, gaussian_kernel, images_to_tensor, to_grayscale, GaussianKernelSpec, ImageRGB};
use dped::losses::{
    color_loss, content_loss, mse_loss, total_loss, tv_loss, ColorNorm, ContentNorm, LossParts, LossProfile,
    LossWeights,
};
use dped::nets::{GeneratorConfig, GeneratorWeights, VggLayer};
use dped::tensor::Tensor;
use dped::train::{self, TrainState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageRGB {
    ImageRGB::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<ImageRGB> = (0..n).map(|_| random_image(h, w, &mut rng)).collect();
    images_to_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap()
}

fn ssd(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Generator with perturbed running statistics so inference exercises
/// the batch-norm affine path.
fn jittered_generator(channels: usize, seed: u64) -> GeneratorWeights<f32> {
    let mut g = GeneratorWeights::<f32>::init(GeneratorConfig::with_channels(channels), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in g.params_mut().as_mut_slice() {
        if p.name.ends_with("running_var") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        } else if p.name.ends_with("running_mean") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn blur_bounds_differences_by_kernel_mass(seed in any::<u64>(), h in 15usize..40, w in 15usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = gaussian_kernel(&GaussianKernelSpec::default()).unwrap();
        let (x, y) = (random_image(h, w, &mut rng), random_image(h, w, &mut rng));
        let (bx, by) = (blur(&x, &kernel).unwrap(), blur(&y, &kernel).unwrap());
        prop_assert_eq!((bx.height(), bx.width()), (h, w));
        let mass = kernel.sum();
        prop_assert!(ssd(bx.data(), by.data()) <= mass * mass * ssd(x.data(), y.data()) * (1.0 + 1e-6));
    }

    #[test]
    fn grayscale_stays_in_range(seed in any::<u64>(), v in 0.0f32..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = to_grayscale(&random_image(8, 9, &mut rng));
        prop_assert!(g.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let flat = to_grayscale(&ImageRGB::filled(4, 4, [v; 3]));
        prop_assert!(flat.data().iter().all(|&p| p == v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn color_loss_is_bounded_by_ssd(seed in any::<u64>()) {
        let kernel = gaussian_kernel(&GaussianKernelSpec::default()).unwrap();
        let x = random_batch(1, 16, 16, seed);
        let y = random_batch(1, 16, 16, seed.wrapping_add(1));
        let c = color_loss(&x, &y, &kernel, ColorNorm::Sum).unwrap();
        let mass = kernel.sum();
        prop_assert!(c >= 0.0);
        prop_assert!(c <= mass * mass * ssd(x.data(), y.data()) * (1.0 + 1e-6));
        prop_assert_eq!(color_loss(&x, &x, &kernel, ColorNorm::Sum).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_preserves_shape_and_range(n in 1usize..3, h in 16usize..40, w in 16usize..40, seed in any::<u64>()) {
        let g = jittered_generator(4, seed);
        let x = random_batch(n, h, w, seed);
        let y = g.forward_infer(&x).unwrap();
        prop_assert_eq!(y.shape(), [n, 3, h, w]);
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (yt, _) = g.forward_train(&x).unwrap();
        prop_assert_eq!(yt.shape(), [n, 3, h, w]);
        prop_assert!(yt.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn inference_ignores_batch_composition(seed in any::<u64>()) {
        let g = jittered_generator(6, seed);
        let batch = random_batch(3, 24, 20, seed);
        let together = g.forward_infer(&batch).unwrap();
        for i in 0..3 {
            let alone = g.forward_infer(&batch.select(&[i])).unwrap();
            for (a, b) in alone.data().iter().zip(together.item(i)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn losses_vanish_on_identical_pairs(seed in any::<u64>(), c in 0.0f32..1.0) {
        let x = random_batch(2, 32, 32, seed);
        let y = random_batch(2, 32, 32, seed ^ 1);
        let kernel = gaussian_kernel(&GaussianKernelSpec::default()).unwrap();
        let vgg = small_vgg(seed % 3);
        let layer: VggLayer = "relu2_2".parse().unwrap();
        prop_assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(content_loss(&vgg, &x, &x, layer, ContentNorm::Squared).unwrap(), 0.0);
        prop_assert!(mse_loss(&x, &y).unwrap() > 0.0);
        prop_assert!(color_loss(&x, &y, &kernel, ColorNorm::PerPixel).unwrap() > 0.0);
        prop_assert!(content_loss(&vgg, &x, &y, layer, ContentNorm::Squared).unwrap() >= 0.0);
        prop_assert!(tv_loss(&x).unwrap() >= 0.0);
        let flat = Tensor::<f32>::filled([2, 3, 32, 32], c);
        prop_assert_eq!(tv_loss(&flat).unwrap(), 0.0);
        let lifted = x.map(|v| v + 0.25);
        prop_assert!((tv_loss(&lifted).unwrap() - tv_loss(&x).unwrap()).abs() <= 1e-6 * tv_loss(&x).unwrap());
    }

    #[test]
    fn total_loss_is_linear_in_each_term(
        parts in prop::array::uniform5(0.0f64..10.0),
        weights in prop::array::uniform5(0.0f64..5.0),
        delta in 0.01f64..1.0,
    ) {
        let lp = LossParts { content: parts[0], texture: parts[1], color: parts[2], tv: parts[3], mse: parts[4] };
        let w = LossWeights { content: weights[0], texture: weights[1], color: weights[2], tv: weights[3], mse: weights[4] };
        let base = total_loss(&lp, &w).unwrap().total;
        for k in 0..5 {
            let mut up = lp;
            let field = match k { 0 => &mut up.content, 1 => &mut up.texture, 2 => &mut up.color, 3 => &mut up.tv, _ => &mut up.mse };
            *field += delta;
            let moved = total_loss(&up, &w).unwrap().total;
            let tol = 1e-9 * (1.0 + base.abs());
            prop_assert!((moved - base - weights[k] * delta).abs() <= tol);
        }
    }
}

#[test]
fn zero_weight_matches_a_removed_term() {
    let data = toy_pairs(8, 32, 12);
    let vgg = small_vgg(4);
    let mut full = small_config(32, LossProfile::Full);
    full.loss_weights.color = 0.0;
    let mut without = full.clone();
    without.loss_profile = LossProfile::ContentTexture;
    let mut a = TrainState::new(&full);
    let mut b = TrainState::new(&without);
    let idx = train::sample_indices(&mut a.rng, data.len(), full.batch_size);
    let (src, tgt) = train::batch_tensors(&data, &idx).unwrap();
    train::train_step(&mut a, &src, &tgt, &full, Some(&vgg)).unwrap();
    train::train_step(&mut b, &src, &tgt, &without, Some(&vgg)).unwrap();
    assert_eq!(a.generator.params(), b.generator.params());
    assert_eq!(a.discriminator.params(), b.discriminator.params());
    assert_eq!(a.counters.color, 1);
    assert_eq!(b.counters.color, 0);
}
