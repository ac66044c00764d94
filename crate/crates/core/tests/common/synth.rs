//! Synthetic scenes and correspondences for registration tests.

use dped::align::{estimate_homography_ransac, AlignConfig, Homography, PointMatch};
use dped::imageio::{sample_bicubic, ImageRGB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random colored Gaussian blobs over a soft gradient.
pub fn blobs(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (h * w / 300).max(8);
    let spots: Vec<(f64, f64, f64, [f64; 3])> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(2.0..6.0),
                std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            )
        })
        .collect();
    let mut acc = vec![0f64; 3 * h * w];
    for &(cy, cx, s, amp) in &spots {
        let r = (3.0 * s) as isize;
        let (y0, x0) = (cy as isize, cx as isize);
        for y in (y0 - r).max(0)..(y0 + r + 1).min(h as isize) {
            for x in (x0 - r).max(0)..(x0 + r + 1).min(w as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * s * s)).exp();
                for c in 0..3 {
                    acc[(c * h + y as usize) * w + x as usize] += amp[c] * g;
                }
            }
        }
    }
    ImageRGB::from_fn(h, w, |c, y, x| {
        let base = 0.35 + 0.2 * (y as f64 / h as f64) + 0.1 * (x as f64 / w as f64) * c as f64 / 2.0;
        (base + acc[(c * h + y) * w + x]).clamp(0.0, 1.0) as f32
    })
}

/// `out(y, x) = img(f(x, y))` with bicubic sampling.
pub fn resample(img: &ImageRGB, h: usize, w: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> ImageRGB {
    ImageRGB::from_fn(h, w, |c, y, x| {
        let (u, v) = f(x as f64, y as f64);
        sample_bicubic(img.plane(c), img.height(), img.width(), v, u).clamp(0.0, 1.0)
    })
}

/// Near-identity projective map: small rotation, zoom, shear and tilt
/// plus a translation.
pub fn random_homography(rng: &mut ChaCha8Rng, shift: f64) -> Homography {
    let th: f64 = rng.random_range(-0.05..0.05);
    let s: f64 = rng.random_range(0.95..1.05);
    let k: f64 = rng.random_range(-0.02..0.02);
    let (p, q): (f64, f64) = (rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4));
    let (tx, ty) = (rng.random_range(-shift..shift), rng.random_range(-shift..shift));
    Homography([
        [s * th.cos(), -s * th.sin() + k, tx],
        [s * th.sin(), s * th.cos(), ty],
        [p, q, 1.0],
    ])
}

pub struct RansacCase {
    pub truth: Homography,
    pub matches: Vec<PointMatch>,
    /// Noise-free inlier source points.
    pub inliers: Vec<(f64, f64)>,
}

/// `n` correspondences in a `side` square, `outlier_frac` of them uniform
/// junk, the rest mapped through a random homography with Gaussian noise.
pub fn ransac_case(seed: u64, n: usize, outlier_frac: f64, sigma: f64, side: f64) -> RansacCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_homography(&mut rng, 20.0);
    let noise = Normal::new(0.0, sigma).unwrap();
    let n_out = (n as f64 * outlier_frac).round() as usize;
    let mut matches = Vec::with_capacity(n);
    let mut inliers = Vec::new();
    for i in 0..n {
        let src = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        let dst = if i < n_out {
            (rng.random_range(0.0..side), rng.random_range(0.0..side))
        } else {
            inliers.push(src);
            let (x, y) = truth.apply(src.0, src.1);
            (x + noise.sample(&mut rng), y + noise.sample(&mut rng))
        };
        matches.push(PointMatch { src, dst });
    }
    RansacCase {
        truth,
        matches,
        inliers,
    }
}

/// Largest distance between the recovered and true images of the
/// noise-free inlier points.
pub fn reprojection_error(case: &RansacCase, h: &Homography) -> f64 {
    case.inliers
        .iter()
        .map(|&(x, y)| {
            let (a, b) = case.truth.apply(x, y);
            let (c, d) = h.apply(x, y);
            ((a - c).powi(2) + (b - d).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Runs `cases` synthetic recoveries and counts those within `tol_px`.
pub fn ransac_oracle(cases: u64, tol_px: f64) -> (usize, f64) {
    let cfg = AlignConfig::default();
    let mut ok = 0;
    let mut worst = 0f64;
    for seed in 0..cases {
        let case = ransac_case(1000 + seed, 200, 0.3, 0.5, 400.0);
        let err = match estimate_homography_ransac(&case.matches, &cfg, seed) {
            Ok((h, _)) => reprojection_error(&case, &h),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
        if err <= tol_px {
            ok += 1;
        }
    }
    (ok, worst)
}
