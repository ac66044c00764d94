//! PSNR/SSIM evaluation, the MSE-versus-color-loss shift curve and the
//! loss-profile ablation.

mod ablation;

pub use ablation::{ablation_run, read_ablation_csv, AblationRow, ABLATION_CSV, ABLATION_MD};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_json, PatchPair};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::{
    correlate_plane, gaussian_kernel, images_to_tensor, reflect_index, tensor_to_image, to_grayscale,
    GaussianKernelSpec, ImageGray, ImageRGB,
};
use crate::nets::GeneratorWeights;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(1 / MSE)` over all values; identical images report 100 dB.
pub fn psnr(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::Shape(format!(
            "psnr of {}x{} and {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = ssim_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over all fully-contained window positions.
pub fn ssim(x: &ImageGray, y: &ImageGray) -> Result<f64> {
    let (h, w) = (x.height(), x.width());
    if h != y.height() || w != y.width() {
        return Err(Error::Shape(format!("ssim of {h}x{w} and {}x{}", y.height(), y.width())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let a: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    Ok(ssim_plane(&a, &b, h, w))
}

/// How color images are reduced for SSIM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    #[default]
    Gray,
    /// Mean of the per-channel scores.
    ChannelMean,
}

pub fn ssim_rgb(x: &ImageRGB, y: &ImageRGB, mode: SsimMode) -> Result<f64> {
    match mode {
        SsimMode::Gray => ssim(&to_grayscale(x), &to_grayscale(y)),
        SsimMode::ChannelMean => {
            let (h, w) = (x.height(), x.width());
            let mut s = 0.0;
            for c in 0..3 {
                let px = ImageGray::new(h, w, x.plane(c).to_vec())?;
                let py = ImageGray::new(y.height(), y.width(), y.plane(c).to_vec())?;
                s += ssim(&px, &py)?;
            }
            Ok(s / 3.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let n = rows.len();
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
        let aggregates = Aggregates {
            mean_psnr: mean(|r| r.psnr_db),
            mean_ssim: mean(|r| r.ssim),
            count: n,
        };
        MetricsReport { rows, aggregates }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &self.aggregates)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// Scores `enhance(pair)` against each target. Items run in parallel;
/// rows keep the input order.
pub fn evaluate_with<F>(pairs: &[PatchPair], mode: SsimMode, enhance: F) -> Result<MetricsReport>
where
    F: Fn(&PatchPair) -> Result<ImageRGB> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to evaluate".into()));
    }
    let rows = exec::try_map_indexed(pairs.len(), |i| {
        let p = &pairs[i];
        let out = enhance(p)?;
        Ok(MetricsRow {
            id: p.id().to_string(),
            psnr_db: psnr(&out, &p.target)?,
            ssim: ssim_rgb(&out, &p.target, mode)?,
        })
    })?;
    Ok(MetricsReport::from_rows(rows))
}

/// Enhances each source patch in inference mode and scores it.
pub fn evaluate_dataset(gen: &GeneratorWeights<f32>, pairs: &[PatchPair]) -> Result<MetricsReport> {
    evaluate_with(pairs, SsimMode::Gray, |p| enhance_image(gen, &p.source))
}

/// Full-resolution inference on one image.
pub fn enhance_image(gen: &GeneratorWeights<f32>, img: &ImageRGB) -> Result<ImageRGB> {
    let x = images_to_tensor::<f32>(&[img])?;
    tensor_to_image(&gen.forward_infer(&x)?, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftCurve {
    pub shifts: Vec<usize>,
    pub mse: Vec<f64>,
    pub color: Vec<f64>,
}

impl ShiftCurve {
    /// `mse / color` per shift; `None` where the color value is zero.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.mse
            .iter()
            .zip(&self.color)
            .map(|(&m, &c)| (c > 0.0).then(|| m / c))
            .collect()
    }

    /// CSV with columns `shift,mse,color_loss,ratio`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["shift", "mse", "color_loss", "ratio"]).map_err(|e| csv_io(path, e))?;
        for (i, r) in self.ratios().into_iter().enumerate() {
            w.write_record([
                self.shifts[i].to_string(),
                self.mse[i].to_string(),
                self.color[i].to_string(),
                r.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Translates by `(dy, dx)` with reflected fill: `out(y, x) = img(y - dy, x - dx)`.
pub fn shift_image(img: &ImageRGB, dy: isize, dx: isize) -> ImageRGB {
    let (h, w) = (img.height(), img.width());
    ImageRGB::from_fn(h, w, |c, y, x| {
        img.get(c, reflect_index(y as isize - dy, h), reflect_index(x as isize - dx, w))
    })
}

/// Unit step for each of the four axis directions.
const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

/// Mean per-value MSE and color loss between each image and its copy
/// shifted by `n` pixels, for `n = 0..=n_max`. Every image gets one seeded
/// axis direction that is reused at all magnitudes.
pub fn shift_sensitivity_curve(
    images: &[ImageRGB],
    n_max: usize,
    spec: &GaussianKernelSpec,
    seed: u64,
) -> Result<ShiftCurve> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if n_max == 0 {
        return Err(Error::Config("max shift must be at least 1".into()));
    }
    let kernel = gaussian_kernel(spec)?;
    for img in images {
        if kernel.side() > img.height().min(img.width()) {
            return Err(Error::KernelTooLarge {
                side: kernel.side(),
                height: img.height(),
                width: img.width(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<(isize, isize)> = (0..images.len()).map(|_| DIRECTIONS[rng.random_range(0..4)]).collect();
    let per_image = exec::map_indexed(images.len(), |i| {
        let img = &images[i];
        let (h, w) = (img.height(), img.width());
        let plane = h * w;
        let blurred = |im: &ImageRGB| {
            let src: Vec<f64> = im.data().iter().map(|&v| v as f64).collect();
            let mut out = vec![0.0; 3 * plane];
            for c in 0..3 {
                correlate_plane(&src[c * plane..(c + 1) * plane], h, w, &kernel, &mut out[c * plane..(c + 1) * plane]);
            }
            out
        };
        let base_blur = blurred(img);
        (0..=n_max)
            .map(|n| {
                let (dy, dx) = dirs[i];
                let moved = shift_image(img, dy * n as isize, dx * n as isize);
                let count = (3 * plane) as f64;
                let mse = img
                    .data()
                    .iter()
                    .zip(moved.data())
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    / count;
                let color = base_blur
                    .iter()
                    .zip(blurred(&moved))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / count;
                (mse, color)
            })
            .collect::<Vec<_>>()
    });
    let m = images.len() as f64;
    let mut curve = ShiftCurve {
        shifts: (0..=n_max).collect(),
        mse: vec![0.0; n_max + 1],
        color: vec![0.0; n_max + 1],
    };
    for rows in per_image {
        for (n, (a, b)) in rows.into_iter().enumerate() {
            curve.mse[n] += a / m;
            curve.color[n] += b / m;
        }
    }
    Ok(curve)
}

/// Non-overlapping-by-`stride` square crops of side `side`.
pub fn crop_grid(img: &ImageRGB, side: usize, stride: usize) -> Vec<ImageRGB> {
    let mut out = Vec::new();
    if img.height() < side || img.width() < side || stride == 0 {
        return out;
    }
    for top in (0..=img.height() - side).step_by(stride) {
        for left in (0..=img.width() - side).step_by(stride) {
            out.push(img.crop(top, left, side, side).expect("crop inside image"));
        }
    }
    out
}
