use super::AlignConfig;
use crate::dataset::{IndexRow, PatchPair};
use crate::error::{Error, Result};
use crate::imageio::{sample_bilinear, to_grayscale, ImageGray, ImageRGB};

/// Zero-normalized cross-correlation. A constant patch has no defined
/// score; it reports 0 with `zero_variance` set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub score: f64,
    pub zero_variance: bool,
}

fn zncc(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if !(denom > 1e-12 * n) {
        return Correlation { score: 0.0, zero_variance: true };
    }
    Correlation {
        score: (sab / denom).clamp(-1.0, 1.0),
        zero_variance: false,
    }
}

pub fn cross_correlation(a: &ImageGray, b: &ImageGray) -> Result<Correlation> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "correlating {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let to64 = |g: &ImageGray| g.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok(zncc(&to64(a), &to64(b)))
}

/// Window centred placement: local `(y, x)` of a `p x p` window whose top-left
/// sits at `(top, left)`, rotated by `theta` about the window centre.
struct Placement {
    top: f64,
    left: f64,
    cos: f64,
    sin: f64,
    c: f64,
}

impl Placement {
    fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let (ly, lx) = (y as f64 - self.c, x as f64 - self.c);
        (
            self.top + self.c + self.sin * lx + self.cos * ly,
            self.left + self.c + self.cos * lx - self.sin * ly,
        )
    }
}

/// Splits both aligned images into non-overlapping windows and, for each,
/// searches integer shifts and small rotations of the phone window for
/// the best grayscale correlation with the DSLR window. Windows whose best
/// score does not exceed `cfg.cc_threshold` are dropped, as are candidates
/// that would leave the phone image.
pub fn extract_patch_pairs(
    phone: &ImageRGB,
    dslr: &ImageRGB,
    cfg: &AlignConfig,
    origin: &str,
) -> Result<Vec<PatchPair>> {
    let (h, w) = (phone.height(), phone.width());
    let p = cfg.patch_size;
    if dslr.height() != h || dslr.width() != w {
        return Err(Error::Shape(format!("aligned images differ: {h}x{w} vs {}x{}", dslr.height(), dslr.width())));
    }
    if h < p || w < p {
        return Err(Error::ImageTooSmall(format!("{h}x{w} is smaller than one {p}x{p} patch")));
    }
    let pg = to_grayscale(phone);
    let dg = to_grayscale(dslr);
    let s = cfg.max_shift as isize;
    let mut shifts: Vec<(isize, isize)> = (-s..=s).flat_map(|dy| (-s..=s).map(move |dx| (dy, dx))).collect();
    shifts.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));
    let rotations = cfg.rotations();
    let c = (p as f64 - 1.0) / 2.0;
    let windows: Vec<(usize, usize)> = (0..=h - p)
        .step_by(p)
        .flat_map(|r| (0..=w - p).step_by(p).map(move |col| (r, col)))
        .collect();

    let found = crate::exec::map_indexed(windows.len(), |wi| {
        let (r, col) = windows[wi];
        let target: Vec<f64> = (0..p)
            .flat_map(|y| (0..p).map(move |x| (y, x)))
            .map(|(y, x)| dg.get(r + y, col + x) as f64)
            .collect();
        let mut best: Option<(f64, isize, isize, f64)> = None;
        let mut cand = vec![0f64; p * p];
        for &deg in &rotations {
            let th = deg.to_radians();
            for &(dy, dx) in &shifts {
                let pl = Placement {
                    top: r as f64 + dy as f64,
                    left: col as f64 + dx as f64,
                    cos: th.cos(),
                    sin: th.sin(),
                    c,
                };
                let inside = [(0, 0), (0, p - 1), (p - 1, 0), (p - 1, p - 1)].iter().all(|&(y, x)| {
                    let (yy, xx) = pl.at(y, x);
                    yy >= -1e-9 && xx >= -1e-9 && yy <= (h - 1) as f64 + 1e-9 && xx <= (w - 1) as f64 + 1e-9
                });
                if !inside {
                    continue;
                }
                if deg == 0.0 {
                    let (t, l) = ((r as isize + dy) as usize, (col as isize + dx) as usize);
                    for y in 0..p {
                        for x in 0..p {
                            cand[y * p + x] = pg.get(t + y, l + x) as f64;
                        }
                    }
                } else {
                    for y in 0..p {
                        for x in 0..p {
                            let (yy, xx) = pl.at(y, x);
                            cand[y * p + x] = sample_bilinear(pg.data(), h, w, yy, xx) as f64;
                        }
                    }
                }
                let cc = zncc(&cand, &target);
                if cc.zero_variance {
                    continue;
                }
                if best.map_or(true, |b| cc.score > b.0) {
                    best = Some((cc.score, dy, dx, deg));
                }
            }
        }
        best.filter(|b| b.0 > cfg.cc_threshold).map(|b| (r, col, b))
    });

    let mut out = Vec::new();
    for (r, col, (cc, dy, dx, deg)) in found.into_iter().flatten() {
        let th = deg.to_radians();
        let pl = Placement {
            top: r as f64 + dy as f64,
            left: col as f64 + dx as f64,
            cos: th.cos(),
            sin: th.sin(),
            c,
        };
        let source = if deg == 0.0 {
            phone.crop((r as isize + dy) as usize, (col as isize + dx) as usize, p, p)?
        } else {
            let planes: Vec<&[f32]> = (0..3).map(|ch| phone.plane(ch)).collect();
            ImageRGB::from_fn(p, p, |ch, y, x| {
                let (yy, xx) = pl.at(y, x);
                sample_bilinear(planes[ch], h, w, yy, xx)
            })
        };
        debug_assert!(cc > cfg.cc_threshold && dx.unsigned_abs() <= cfg.max_shift && dy.unsigned_abs() <= cfg.max_shift);
        out.push(PatchPair {
            meta: IndexRow {
                pair_id: format!("{origin}-r{r:05}-c{col:05}"),
                origin_image: origin.to_string(),
                row: r,
                col,
                shift_x: dx as i32,
                shift_y: dy as i32,
                rotation_deg: deg,
                cc,
            },
            source,
            target: dslr.crop(r, col, p, p)?,
        });
    }
    Ok(out)
}
