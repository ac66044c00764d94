#![allow(dead_code)]

use dped::dataset::{IndexRow, PatchPair};
use dped::imageio::ImageRGB;
use dped::nets::{DiscriminatorConfig, GeneratorConfig, VggConfig, VggWeights};
use dped::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth colored texture with a little fine detail.
pub fn texture(side: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..5)
        .map(|_| {
            [
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
                rng.random_range(0.0..6.3),
                rng.random_range(0.1..0.3),
            ]
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    ImageRGB::from_fn(side, side, |c, y, x| {
        let v: f64 = waves
            .iter()
            .map(|w| w[3] * (w[0] * y as f64 + w[1] * x as f64 + w[2] + 0.7 * c as f64).sin())
            .sum();
        (tint[c] + 0.5 * v).clamp(0.0, 1.0) as f32
    })
}

/// Phone-like degradation: darker, lower contrast, blue cast.
pub fn degrade(img: &ImageRGB) -> ImageRGB {
    ImageRGB::from_fn(img.height(), img.width(), |c, y, x| {
        let v = img.get(c, y, x);
        let cast = [0.0, 0.02, 0.08][c];
        (0.2 + 0.55 * v + cast).clamp(0.0, 1.0)
    })
}

pub fn pair(id: &str, source: ImageRGB, target: ImageRGB) -> PatchPair {
    PatchPair {
        meta: IndexRow {
            pair_id: id.to_string(),
            origin_image: id.to_string(),
            row: 0,
            col: 0,
            shift_x: 0,
            shift_y: 0,
            rotation_deg: 0.0,
            cc: 1.0,
        },
        source,
        target,
    }
}

pub fn toy_pairs(n: usize, side: usize, seed: u64) -> Vec<PatchPair> {
    (0..n)
        .map(|i| {
            let t = texture(side, seed * 1000 + i as u64);
            pair(&format!("p{i:03}"), degrade(&t), t)
        })
        .collect()
}

/// Small networks for fast CPU training on `side`-pixel patches.
pub fn small_config(side: usize, profile: dped::losses::LossProfile) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        iterations: 10,
        pretrain_iters: 5,
        loss_profile: profile,
        content_layer: "relu2_2".into(),
        checkpoint_every: 0,
        seed: 7,
        generator: GeneratorConfig::with_channels(8),
        discriminator: DiscriminatorConfig {
            input_side: side,
            ..DiscriminatorConfig::reduced(8)
        },
        ..TrainConfig::default()
    }
}

pub fn small_vgg(seed: u64) -> VggWeights<f32> {
    VggWeights::random(VggConfig::reduced(16), seed)
}

pub mod gradcheck;

/// Phone patches darker than every DSLR patch.
pub fn brightness_pairs(n: usize, side: usize, seed: u64) -> Vec<PatchPair> {
    (0..n)
        .map(|i| {
            let t = texture(side, seed * 1000 + i as u64);
            let dark = t.map(|v| 0.05 + 0.3 * v);
            let bright = t.map(|v| 0.65 + 0.3 * v);
            pair(&format!("b{i:03}"), dark, bright)
        })
        .collect()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}
pub mod synth;

pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Every non-overlapping `side` crop of the bundled natural images, in
/// file-name order.
pub fn natural_crops(side: usize) -> Vec<ImageRGB> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<ImageRGB>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().unwrap().get(&side) {
        return v.clone();
    }
    let mut files: Vec<_> = std::fs::read_dir(fixtures_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "jpg")))
        .collect();
    files.sort();
    let crops: Vec<ImageRGB> = files
        .iter()
        .flat_map(|p| dped::eval::crop_grid(&dped::imageio::load_image(p).unwrap(), side, side))
        .collect();
    cache.lock().unwrap().insert(side, crops.clone());
    crops
}

/// Population variance of all values.
pub fn variance(img: &ImageRGB) -> f64 {
    let n = img.data().len() as f64;
    let m = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    img.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
}

pub const OVERFIT_SIDE: usize = 64;

/// Eight natural patches and their phone-like degradations.
pub fn overfit_pairs() -> Vec<PatchPair> {
    natural_crops(OVERFIT_SIDE)
        .into_iter()
        .step_by(37)
        .take(8)
        .enumerate()
        .map(|(i, c)| pair(&format!("o{i}"), degrade(&c), c))
        .collect()
}

/// Full profile, batch 4, 16-channel generator, 500 iterations.
pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        iterations: 500,
        pretrain_iters: 50,
        loss_profile: dped::losses::LossProfile::Full,
        checkpoint_every: 0,
        seed: 3,
        generator: GeneratorConfig::with_channels(16),
        discriminator: DiscriminatorConfig {
            input_side: OVERFIT_SIDE,
            ..DiscriminatorConfig::reduced(4)
        },
        ..TrainConfig::default()
    }
}

/// Mean of `values[end - window..end]`.
pub fn trailing_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let s = &values[end - window..end];
    s.iter().sum::<f64>() / s.len() as f64
}
