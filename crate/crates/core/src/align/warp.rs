use super::{AlignConfig, Homography};
use crate::error::{Error, Result};
use crate::imageio::{downscale, sample_bicubic, ImageRGB};

/// Largest axis-aligned all-true rectangle of a row-major mask, as
/// `(top, left, height, width)`. Ties keep the first found.
pub fn largest_rectangle(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut heights = vec![0usize; w];
    let mut best: Option<(usize, usize, usize, usize)> = None;
    let mut best_area = 0;
    let mut stack: Vec<usize> = Vec::with_capacity(w + 1);
    for y in 0..h {
        for x in 0..w {
            heights[x] = if mask[y * w + x] { heights[x] + 1 } else { 0 };
        }
        stack.clear();
        for x in 0..=w {
            let cur = if x < w { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] <= cur {
                    break;
                }
                stack.pop();
                let height = heights[top];
                let left = stack.last().map_or(0, |&l| l + 1);
                let area = height * (x - left);
                if area > best_area {
                    best_area = area;
                    best = Some((y + 1 - height, left, height, x - left));
                }
            }
            stack.push(x);
        }
    }
    best
}

/// Warps the DSLR image into the phone frame (`h` maps DSLR to phone
/// coordinates) and crops both to the largest rectangle covered by the
/// warped DSLR image. A DSLR image with more pixels than the phone frame
/// needs is first downscaled so the bicubic warp does not alias.
pub fn warp_and_crop(
    phone: &ImageRGB,
    dslr: &ImageRGB,
    h: &Homography,
    cfg: &AlignConfig,
) -> Result<(ImageRGB, ImageRGB)> {
    let m = h.matrix();
    let det = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).abs();
    let scale = det.sqrt();
    let (mut src, mut hm) = (dslr.clone(), *h);
    if scale.is_finite() && scale < 0.9 {
        let nh = ((dslr.height() as f64 * scale).round() as usize).max(1);
        let nw = ((dslr.width() as f64 * scale).round() as usize).max(1);
        src = downscale(dslr, nh, nw)?;
        let (sy, sx) = (dslr.height() as f64 / nh as f64, dslr.width() as f64 / nw as f64);
        // Pixel-centre mapping from the downscaled grid to the original one.
        let up = Homography([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]]);
        hm = up.compose(h)?;
    }
    let inv = hm.inverse()?;
    let (ph, pw) = (phone.height(), phone.width());
    let (sh, sw) = (src.height() as f64, src.width() as f64);
    const EPS: f64 = 1e-6;
    let mut mask = vec![false; ph * pw];
    let mut coords = vec![(0.0, 0.0); ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let (u, v) = inv.apply(x as f64, y as f64);
            let ok = u.is_finite()
                && v.is_finite()
                && u >= -EPS
                && v >= -EPS
                && u <= sw - 1.0 + EPS
                && v <= sh - 1.0 + EPS;
            mask[y * pw + x] = ok;
            coords[y * pw + x] = (v, u);
        }
    }
    let too_small = || {
        Error::EmptyIntersection(format!(
            "overlap of the warped DSLR image with the phone frame is below {0}x{0}",
            cfg.min_overlap
        ))
    };
    let (top, left, rh, rw) = largest_rectangle(&mask, ph, pw).ok_or_else(too_small)?;
    if rh < cfg.min_overlap || rw < cfg.min_overlap {
        return Err(too_small());
    }
    let phone_crop = phone.crop(top, left, rh, rw)?;
    let (sh, sw) = (src.height(), src.width());
    let planes: Vec<&[f32]> = (0..3).map(|c| src.plane(c)).collect();
    let warped = ImageRGB::from_fn(rh, rw, |c, y, x| {
        let (v, u) = coords[(top + y) * pw + left + x];
        sample_bicubic(planes[c], sh, sw, v, u)
    });
    Ok((phone_crop, warped))
}
