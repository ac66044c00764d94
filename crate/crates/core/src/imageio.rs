//! Raster images, PNG/JPEG I/O, color conversion, Gaussian kernels and
//! resampling.
//!
//! Images are stored channel-major (`C x H x W`) as `f32` values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn check_range(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
        Some(i) => Err(Error::InvalidSize(format!(
            "pixel value {} at index {i} is outside [0, 1]",
            data[i]
        ))),
        None => Ok(()),
    }
}

impl ImageRGB {
    /// Builds an image from channel-major data, validating shape and range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::InvalidSize(format!(
                "{}x{} RGB image cannot hold {} values",
                height,
                width,
                data.len()
            )));
        }
        check_range(&data)?;
        Ok(ImageRGB {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        ImageRGB {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v.clamp(0.0, 1.0), height * width));
        }
        ImageRGB::from_raw(height, width, data)
    }

    /// `f(channel, y, x)`, clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        ImageRGB::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sub-image `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::InvalidSize(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let p = self.plane(c);
            for y in top..top + h {
                data.extend_from_slice(&p[y * self.width + left..y * self.width + left + w]);
            }
        }
        Ok(ImageRGB::from_raw(h, w, data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageRGB::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        )
    }
}

impl ImageGray {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidSize(format!(
                "{}x{} gray image cannot hold {} values",
                height,
                width,
                data.len()
            )));
        }
        check_range(&data)?;
        Ok(ImageGray {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        ImageGray {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_rgb(&self) -> ImageRGB {
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageRGB::from_raw(self.height, self.width, data)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(ImageRGB::from_raw(h, w, data))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height, img.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px[c] = quantize(img.data[c * h * w + i]);
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

pub fn to_grayscale(img: &ImageRGB) -> ImageGray {
    let n = img.height * img.width;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..n)
        .map(|i| {
            // R=G=B must map to exactly that value
            if r[i] == g[i] && g[i] == b[i] {
                r[i]
            } else {
                (LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).clamp(0.0, 1.0)
            }
        })
        .collect();
    ImageGray::from_raw(img.height, img.width, data)
}

/// Parameters of the 2-D Gaussian `A exp(-(k-mu_x)^2/(2 sigma_x) - (l-mu_y)^2/(2 sigma_y))`.
/// Note `sigma` enters as a variance, not a standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianKernelSpec {
    pub amplitude: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub radius: usize,
}

impl Default for GaussianKernelSpec {
    fn default() -> Self {
        GaussianKernelSpec {
            amplitude: 0.053,
            mu_x: 0.0,
            mu_y: 0.0,
            sigma_x: 3.0,
            sigma_y: 3.0,
            radius: 7,
        }
    }
}

/// Square correlation kernel indexed by offsets in `[-radius, radius]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    values: Vec<f64>,
}

impl Kernel2D {
    pub fn new(radius: usize, values: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if values.len() != side * side {
            return Err(Error::InvalidSpec(format!(
                "kernel of radius {radius} needs {} values",
                side * side
            )));
        }
        Ok(Kernel2D { radius, values })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at row offset `k`, column offset `l`.
    pub fn at(&self, k: isize, l: isize) -> f64 {
        let r = self.radius as isize;
        self.values[((k + r) as usize) * self.side() + (l + r) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn gaussian_kernel(spec: &GaussianKernelSpec) -> Result<Kernel2D> {
    if !(spec.sigma_x > 0.0 && spec.sigma_y > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "sigma must be positive, got ({}, {})",
            spec.sigma_x, spec.sigma_y
        )));
    }
    if spec.radius < 1 {
        return Err(Error::InvalidSpec("radius must be at least 1".into()));
    }
    if !(spec.amplitude.is_finite() && spec.amplitude >= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "amplitude must be finite and nonnegative, got {}",
            spec.amplitude
        )));
    }
    let r = spec.radius as isize;
    let mut values = Vec::with_capacity((2 * spec.radius + 1).pow(2));
    for k in -r..=r {
        for l in -r..=r {
            let dk = k as f64 - spec.mu_x;
            let dl = l as f64 - spec.mu_y;
            values.push(
                spec.amplitude
                    * (-(dk * dk) / (2.0 * spec.sigma_x) - (dl * dl) / (2.0 * spec.sigma_y)).exp(),
            );
        }
    }
    Kernel2D::new(spec.radius, values)
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 2-D correlation of one plane with reflection padding.
pub fn correlate_plane<T: Real>(src: &[T], h: usize, w: usize, kernel: &Kernel2D, dst: &mut [T]) {
    let r = kernel.radius as isize;
    let side = kernel.side();
    let kv: Vec<T> = kernel.values.iter().map(|&v| T::of(v)).collect();
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|x| (-r..=r).map(|l| reflect_index(x as isize + l, w)).collect())
        .collect();
    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|k| reflect_index(y as isize + k, h)).collect();
        for x in 0..w {
            let cx = &cols[x];
            let mut acc = T::zero();
            for (ki, &sy) in rows.iter().enumerate() {
                let srow = &src[sy * w..(sy + 1) * w];
                let krow = &kv[ki * side..(ki + 1) * side];
                for (li, &sx) in cx.iter().enumerate() {
                    acc += srow[sx] * krow[li];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Adjoint of [`correlate_plane`]: accumulates `A^T g` into `acc`.
pub fn correlate_plane_adjoint<T: Real>(
    grad: &[T],
    h: usize,
    w: usize,
    kernel: &Kernel2D,
    acc: &mut [T],
) {
    let r = kernel.radius as isize;
    let side = kernel.side();
    let kv: Vec<T> = kernel.values.iter().map(|&v| T::of(v)).collect();
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|x| (-r..=r).map(|l| reflect_index(x as isize + l, w)).collect())
        .collect();
    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|k| reflect_index(y as isize + k, h)).collect();
        for x in 0..w {
            let g = grad[y * w + x];
            for (ki, &sy) in rows.iter().enumerate() {
                let krow = &kv[ki * side..(ki + 1) * side];
                for (li, &sx) in cols[x].iter().enumerate() {
                    acc[sy * w + sx] += g * krow[li];
                }
            }
        }
    }
}

/// Per-channel correlation with the kernel. The output is not clamped.
pub fn blur(img: &ImageRGB, kernel: &Kernel2D) -> Result<ImageRGB> {
    let side = kernel.side();
    if side > img.height.min(img.width) {
        return Err(Error::KernelTooLarge {
            side,
            height: img.height,
            width: img.width,
        });
    }
    let n = img.height * img.width;
    let mut out = vec![0f32; 3 * n];
    for c in 0..3 {
        correlate_plane(
            img.plane(c),
            img.height,
            img.width,
            kernel,
            &mut out[c * n..(c + 1) * n],
        );
    }
    Ok(ImageRGB::from_raw(img.height, img.width, out))
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Resampling taps for one axis: for every output index, the source indices
/// and normalized weights. Downscaling widens the kernel by the scale factor
/// so the filter also band-limits.
fn resample_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = 2.0 * scale.max(1.0);
    let stretch = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic((j as f64 - center) / stretch);
                if wgt != 0.0 {
                    let idx = j.clamp(0, src as isize - 1) as usize;
                    match taps.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `new_h x new_w`, clamped to `[0, 1]`.
pub fn downscale(img: &ImageRGB, new_h: usize, new_w: usize) -> Result<ImageRGB> {
    if new_h < 1 || new_w < 1 || new_h > img.height || new_w > img.width {
        return Err(Error::InvalidSize(format!(
            "cannot downscale {}x{} to {new_h}x{new_w}",
            img.height, img.width
        )));
    }
    if new_h == img.height && new_w == img.width {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let ty = resample_taps(h, new_h);
    let tx = resample_taps(w, new_w);
    let mut out = vec![0f32; 3 * new_h * new_w];
    let mut tmp = vec![0f64; h * new_w];
    for c in 0..3 {
        let p = img.plane(c);
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                tmp[y * new_w + x] = taps.iter().map(|&(j, wt)| p[y * w + j] as f64 * wt).sum();
            }
        }
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..new_w {
                let v: f64 = taps.iter().map(|&(j, wt)| tmp[j * new_w + x] * wt).sum();
                out[(c * new_h + y) * new_w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(ImageRGB::from_raw(new_h, new_w, out))
}

/// Bicubic sample of a plane at real coordinates; neighbors outside the
/// plane are clamped to the edge.
pub fn sample_bicubic(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut acc = 0.0f64;
    for dy in -1..=2isize {
        let wy = cubic(fy - dy as f64);
        if wy == 0.0 {
            continue;
        }
        let sy = (y0 + dy).clamp(0, h as isize - 1) as usize;
        for dx in -1..=2isize {
            let wx = cubic(fx - dx as f64);
            if wx == 0.0 {
                continue;
            }
            let sx = (x0 + dx).clamp(0, w as isize - 1) as usize;
            acc += wy * wx * plane[sy * w + sx] as f64;
        }
    }
    acc as f32
}

/// Bilinear sample with edge clamping.
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Stacks images of equal size into an `N x 3 x H x W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&ImageRGB]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

/// Item `n` of an `N x 3 x H x W` tensor as an image, clamped to `[0, 1]`.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, n: usize) -> Result<ImageRGB> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            t.channels()
        )));
    }
    let data = t
        .item(n)
        .iter()
        .map(|v| (v.f64() as f32).clamp(0.0, 1.0))
        .collect();
    Ok(ImageRGB::from_raw(t.height(), t.width(), data))
}

/// Grayscale images as an `N x 1 x H x W` tensor.
pub fn grays_to_tensor<T: Real>(images: &[&ImageGray]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape("grayscale batch mixes sizes".into()));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}
