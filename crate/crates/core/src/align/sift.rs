//! Difference-of-Gaussians keypoints with 128-dimensional gradient
//! histogram descriptors.

use std::f64::consts::PI;

use super::{FeatureDetector, Keypoint};
use crate::error::{Error, Result};
use crate::imageio::{reflect_index, ImageGray};

pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SiftParams {
    pub scales_per_octave: usize,
    pub sigma: f64,
    /// Blur already present in the input.
    pub input_sigma: f64,
    /// DoG contrast threshold for intensities in `[0, 1]`.
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    pub max_octaves: usize,
    /// Start the pyramid from a 2x bilinear upsampling of the input, which
    /// adds the finest octave.
    pub upsample: bool,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            scales_per_octave: 3,
            sigma: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            max_octaves: 8,
            upsample: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sift {
    pub params: SiftParams,
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

fn gaussian_1d(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

fn blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_1d(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (p.h, p.w);
    let xi: Vec<Vec<usize>> = (0..w)
        .map(|x| (-r..=r).map(|d| reflect_index(x as isize + d, w)).collect())
        .collect();
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = xi[x].iter().zip(&k).map(|(&s, &c)| row[s] * c).sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let rows: Vec<usize> = (-r..=r).map(|d| reflect_index(y as isize + d, h)).collect();
        for x in 0..w {
            out[y * w + x] = rows.iter().zip(&k).map(|(&s, &c)| tmp[s * w + x] * c).sum();
        }
    }
    Plane { h, w, data: out }
}

fn half(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| p.at(2 * y, 2 * x)).collect();
    Plane { h, w, data }
}

/// `out(y, x) = in(y / 2, x / 2)`, bilinear.
fn double(p: &Plane) -> Plane {
    let (h, w) = (2 * p.h, 2 * p.w);
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (y0, x0) = (y / 2, x / 2);
            let (y1, x1) = ((y0 + y % 2).min(p.h - 1), (x0 + x % 2).min(p.w - 1));
            0.25 * (p.at(y0, x0) + p.at(y0, x1) + p.at(y1, x0) + p.at(y1, x1))
        })
        .collect();
    Plane { h, w, data }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

impl Sift {
    fn pyramid(&self, img: &ImageGray) -> Vec<Octave> {
        let prm = &self.params;
        let s = prm.scales_per_octave;
        let k = 2f64.powf(1.0 / s as f64);
        let mut base = Plane {
            h: img.height(),
            w: img.width(),
            data: img.data().to_vec(),
        };
        let mut input_sigma = prm.input_sigma;
        if prm.upsample {
            base = double(&base);
            input_sigma *= 2.0;
        }
        let first = (prm.sigma * prm.sigma - input_sigma * input_sigma).max(0.0).sqrt();
        let mut cur = blur(&base, first);
        let n_oct = ((base.h.min(base.w) as f64).log2().floor() as usize)
            .saturating_sub(3)
            .clamp(1, prm.max_octaves);
        let incr: Vec<f64> = (1..s + 3)
            .map(|i| {
                let prev = prm.sigma * k.powi(i as i32 - 1);
                let next = prev * k;
                (next * next - prev * prev).sqrt()
            })
            .collect();
        let mut octaves = Vec::with_capacity(n_oct);
        for o in 0..n_oct {
            let mut gauss = vec![cur.clone()];
            for &sg in &incr {
                let next = blur(gauss.last().unwrap(), sg);
                gauss.push(next);
            }
            let dog = gauss
                .windows(2)
                .map(|g| Plane {
                    h: g[0].h,
                    w: g[0].w,
                    data: g[1].data.iter().zip(&g[0].data).map(|(a, b)| a - b).collect(),
                })
                .collect();
            if o + 1 < n_oct {
                cur = half(&gauss[s]);
            }
            octaves.push(Octave { gauss, dog });
        }
        octaves
    }

    fn is_extremum(dog: &[Plane], i: usize, y: usize, x: usize) -> bool {
        let v = dog[i].at(y, x);
        let mut is_max = true;
        let mut is_min = true;
        for layer in &dog[i - 1..=i + 1] {
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let u = layer.at(yy, xx);
                    if std::ptr::eq(layer, &dog[i]) && yy == y && xx == x {
                        continue;
                    }
                    is_max &= v > u;
                    is_min &= v < u;
                }
            }
            if !is_max && !is_min {
                return false;
            }
        }
        is_max || is_min
    }

    /// Quadratic refinement; returns (layer, y, x, offset, value) or None.
    fn refine(&self, dog: &[Plane], mut i: usize, mut y: usize, mut x: usize) -> Option<(usize, f64, f64, f64, f64)> {
        let s = self.params.scales_per_octave;
        let (h, w) = (dog[0].h, dog[0].w);
        for _ in 0..5 {
            let d = |l: usize, yy: usize, xx: usize| dog[l].at(yy, xx) as f64;
            let dx = (d(i, y, x + 1) - d(i, y, x - 1)) / 2.0;
            let dy = (d(i, y + 1, x) - d(i, y - 1, x)) / 2.0;
            let ds = (d(i + 1, y, x) - d(i - 1, y, x)) / 2.0;
            let v2 = 2.0 * d(i, y, x);
            let dxx = d(i, y, x + 1) + d(i, y, x - 1) - v2;
            let dyy = d(i, y + 1, x) + d(i, y - 1, x) - v2;
            let dss = d(i + 1, y, x) + d(i - 1, y, x) - v2;
            let dxy = (d(i, y + 1, x + 1) - d(i, y + 1, x - 1) - d(i, y - 1, x + 1) + d(i, y - 1, x - 1)) / 4.0;
            let dxs = (d(i + 1, y, x + 1) - d(i + 1, y, x - 1) - d(i - 1, y, x + 1) + d(i - 1, y, x - 1)) / 4.0;
            let dys = (d(i + 1, y + 1, x) - d(i + 1, y - 1, x) - d(i - 1, y + 1, x) + d(i - 1, y - 1, x)) / 4.0;
            let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
            let grad = nalgebra::Vector3::new(dx, dy, ds);
            let off = -(hess.try_inverse()? * grad);
            if off.iter().all(|v| v.abs() < 0.5) {
                let value = d(i, y, x) + 0.5 * grad.dot(&off);
                if value.abs() * (s as f64) < self.params.contrast_threshold {
                    return None;
                }
                let tr = dxx + dyy;
                let det = dxx * dyy - dxy * dxy;
                let r = self.params.edge_ratio;
                if det <= 0.0 || tr * tr * r >= (r + 1.0).powi(2) * det {
                    return None;
                }
                return Some((i, y as f64 + off[1], x as f64 + off[0], off[2], value));
            }
            let step = |p: usize, o: f64| (p as f64 + o.round()) as isize;
            let (nx, ny, ni) = (step(x, off[0]), step(y, off[1]), step(i, off[2]));
            if ni < 1 || ni > s as isize || ny < 1 || ny >= h as isize - 1 || nx < 1 || nx >= w as isize - 1 {
                return None;
            }
            (x, y, i) = (nx as usize, ny as usize, ni as usize);
        }
        None
    }

    fn orientations(g: &Plane, y: f64, x: f64, sigma: f64) -> Vec<f64> {
        const BINS: usize = 36;
        let sw = 1.5 * sigma;
        let r = (3.0 * sw).round() as isize;
        let (cy, cx) = (y.round() as isize, x.round() as isize);
        let mut hist = [0f64; BINS];
        for dy in -r..=r {
            let yy = cy + dy;
            if yy <= 0 || yy >= g.h as isize - 1 {
                continue;
            }
            for dx in -r..=r {
                let xx = cx + dx;
                if xx <= 0 || xx >= g.w as isize - 1 {
                    continue;
                }
                let (yu, xu) = (yy as usize, xx as usize);
                let gx = (g.at(yu, xu + 1) - g.at(yu, xu - 1)) as f64;
                let gy = (g.at(yu + 1, xu) - g.at(yu - 1, xu)) as f64;
                let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sw * sw)).exp();
                let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
                let bin = ((ang / (2.0 * PI) * BINS as f64).round() as usize) % BINS;
                hist[bin] += wgt * (gx * gx + gy * gy).sqrt();
            }
        }
        for _ in 0..2 {
            let prev = hist;
            for b in 0..BINS {
                hist[b] = (prev[(b + BINS - 1) % BINS] + 2.0 * prev[b] + prev[(b + 1) % BINS]) / 4.0;
            }
        }
        let max = hist.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for b in 0..BINS {
            let (l, c, rr) = (hist[(b + BINS - 1) % BINS], hist[b], hist[(b + 1) % BINS]);
            if c > l && c > rr && c >= 0.8 * max {
                let off = 0.5 * (l - rr) / (l - 2.0 * c + rr);
                let ang = ((b as f64 + off) / BINS as f64 * 2.0 * PI).rem_euclid(2.0 * PI);
                out.push(ang);
            }
        }
        out
    }

    fn descriptor(g: &Plane, y: f64, x: f64, sigma: f64, angle: f64) -> Vec<f32> {
        const D: usize = 4;
        const N: usize = 8;
        let cell = 3.0 * sigma;
        let radius = (cell * std::f64::consts::SQRT_2 * (D as f64 + 1.0) * 0.5).round() as isize;
        let (cos, sin) = (angle.cos(), angle.sin());
        let mut hist = vec![0f64; D * D * N];
        let (cy, cx) = (y.round() as isize, x.round() as isize);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                // Sample position relative to the keypoint, rotated into its frame.
                let ry = (-sin * dx as f64 + cos * dy as f64) / cell;
                let rx = (cos * dx as f64 + sin * dy as f64) / cell;
                let by = ry + D as f64 / 2.0 - 0.5;
                let bx = rx + D as f64 / 2.0 - 0.5;
                if by <= -1.0 || by >= D as f64 || bx <= -1.0 || bx >= D as f64 {
                    continue;
                }
                let (yy, xx) = (cy + dy, cx + dx);
                if yy <= 0 || yy >= g.h as isize - 1 || xx <= 0 || xx >= g.w as isize - 1 {
                    continue;
                }
                let (yu, xu) = (yy as usize, xx as usize);
                let gx = (g.at(yu, xu + 1) - g.at(yu, xu - 1)) as f64;
                let gy = (g.at(yu + 1, xu) - g.at(yu - 1, xu)) as f64;
                let mag = (gx * gx + gy * gy).sqrt();
                let ori = (gy.atan2(gx) - angle).rem_euclid(2.0 * PI);
                let wgt = (-(rx * rx + ry * ry) / (2.0 * (0.5 * D as f64).powi(2))).exp();
                let bo = ori / (2.0 * PI) * N as f64;
                let (y0, x0, o0) = (by.floor(), bx.floor(), bo.floor());
                let (fy, fx, fo) = (by - y0, bx - x0, bo - o0);
                for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                    if iy < 0 || iy >= D as isize {
                        continue;
                    }
                    for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                        if ix < 0 || ix >= D as isize {
                            continue;
                        }
                        for (io, wo) in [(o0 as usize % N, 1.0 - fo), ((o0 as usize + 1) % N, fo)] {
                            hist[(iy as usize * D + ix as usize) * N + io] += mag * wgt * wy * wx * wo;
                        }
                    }
                }
            }
        }
        normalize(&mut hist);
        hist.iter_mut().for_each(|v| *v = v.min(0.2));
        normalize(&mut hist);
        hist.into_iter().map(|v| v as f32).collect()
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

impl FeatureDetector for Sift {
    fn detect(&self, img: &ImageGray) -> Result<Vec<Keypoint>> {
        let (h, w) = (img.height(), img.width());
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::ImageTooSmall(format!("keypoint detection needs {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
        }
        let prm = &self.params;
        let s = prm.scales_per_octave;
        let pre = 0.5 * prm.contrast_threshold / s as f64;
        let mut out = Vec::new();
        for (o, oct) in self.pyramid(img).iter().enumerate() {
            let mut scale = (1usize << o) as f64;
            if prm.upsample {
                scale *= 0.5;
            }
            let (oh, ow) = (oct.dog[0].h, oct.dog[0].w);
            let border = 5;
            if oh <= 2 * border || ow <= 2 * border {
                continue;
            }
            for i in 1..=s {
                for y in border..oh - border {
                    for x in border..ow - border {
                        if (oct.dog[i].at(y, x) as f64).abs() <= pre || !Self::is_extremum(&oct.dog, i, y, x) {
                            continue;
                        }
                        let Some((li, ry, rx, os, _)) = self.refine(&oct.dog, i, y, x) else {
                            continue;
                        };
                        if ry < 0.0 || rx < 0.0 || ry > (oh - 1) as f64 || rx > (ow - 1) as f64 {
                            continue;
                        }
                        let sigma_oct = prm.sigma * 2f64.powf((li as f64 + os) / s as f64);
                        let g = &oct.gauss[li];
                        for angle in Self::orientations(g, ry, rx, sigma_oct) {
                            let kx = rx * scale;
                            let ky = ry * scale;
                            if kx >= w as f64 || ky >= h as f64 {
                                continue;
                            }
                            out.push(Keypoint {
                                x: kx,
                                y: ky,
                                scale: sigma_oct * scale,
                                orientation: angle,
                                descriptor: Self::descriptor(g, ry, rx, sigma_oct, angle),
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
