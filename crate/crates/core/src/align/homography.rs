use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AlignConfig;
use crate::error::{Error, Result};

/// Projective map normalized so the bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::DegenerateConfiguration("homography has a vanishing h33".into()));
        }
        let n = m / s;
        if !(n.determinant().abs() > 1e-12) || n.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateConfiguration("homography is singular".into()));
        }
        Ok(Homography(std::array::from_fn(|r| std::array::from_fn(|c| n[(r, c)]))))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.0[r][c])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        ((h[0][0] * x + h[0][1] * y + h[0][2]) / w, (h[1][0] * x + h[1][1] * y + h[1][2]) / w)
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("homography is not invertible".into()))?;
        Self::from_matrix(&inv)
    }

    pub fn compose(&self, then: &Homography) -> Result<Self> {
        Self::from_matrix(&(then.matrix() * self.matrix()))
    }
}

/// A correspondence: `src` (DSLR frame) should map onto `dst` (phone frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMatch {
    pub src: (f64, f64),
    pub dst: (f64, f64),
}

impl PointMatch {
    pub fn error(&self, h: &Homography) -> f64 {
        let (x, y) = h.apply(self.src.0, self.src.1);
        let e = ((x - self.dst.0).powi(2) + (y - self.dst.1).powi(2)).sqrt();
        if e.is_finite() {
            e
        } else {
            f64::INFINITY
        }
    }
}

/// Similarity taking points to zero mean and mean distance sqrt(2).
fn normalizer(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (mx, my) = pts.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let md = pts.map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if md > 0.0 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform, least squares over all matches.
pub fn estimate_homography(matches: &[PointMatch]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!("{} matches, need at least 4", matches.len())));
    }
    let ts = normalizer(matches.iter().map(|m| m.src));
    let td = normalizer(matches.iter().map(|m| m.dst));
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, m) in matches.iter().enumerate() {
        let p = ts * Vector3::new(m.src.0, m.src.1, 1.0);
        let q = td * Vector3::new(m.dst.0, m.dst.1, 1.0);
        let (x, y) = (p[0] / p[2], p[1] / p[2]);
        let (u, v) = (q[0] / q[2], q[1] / q[2]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = vt.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("degenerate destination points".into()))?;
    Homography::from_matrix(&(td_inv * hn * ts))
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = ((b.0 - a.0).hypot(b.1 - a.1)) * ((c.0 - a.0).hypot(c.1 - a.1));
    cross.abs() <= 1e-6 * scale.max(1e-12)
}

fn degenerate_sample(pts: &[(f64, f64)]) -> bool {
    (0..4).any(|i| {
        let o: Vec<_> = (0..4).filter(|&j| j != i).map(|j| pts[j]).collect();
        collinear(o[0], o[1], o[2])
    })
}

fn inliers(matches: &[PointMatch], h: &Homography, thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(matches.len());
    let (mut count, mut err) = (0, 0.0);
    for m in matches {
        let e = m.error(h);
        let ok = e < thr;
        if ok {
            count += 1;
            err += e;
        }
        mask.push(ok);
    }
    (mask, count, err)
}

/// RANSAC over 4-point samples, then least-squares refits on the inliers.
/// Deterministic for a given seed.
pub fn estimate_homography_ransac(
    matches: &[PointMatch],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if matches.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!("{} matches, need at least 4", matches.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thr = cfg.ransac_inlier_px;
    let mut best: Option<(Homography, usize, f64)> = None;
    let n = matches.len();
    for _ in 0..cfg.ransac_iters {
        let mut idx = [0usize; 4];
        for k in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !idx[..k].contains(&c) {
                    idx[k] = c;
                    break;
                }
            }
        }
        let sample: Vec<PointMatch> = idx.iter().map(|&i| matches[i]).collect();
        if degenerate_sample(&sample.iter().map(|m| m.src).collect::<Vec<_>>())
            || degenerate_sample(&sample.iter().map(|m| m.dst).collect::<Vec<_>>())
        {
            continue;
        }
        let Ok(h) = estimate_homography(&sample) else { continue };
        let (_, count, err) = inliers(matches, &h, thr);
        let better = match &best {
            None => true,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((h, count, err));
        }
    }
    let (mut h, mut count, _) =
        best.ok_or_else(|| Error::DegenerateConfiguration("no non-degenerate sample found".into()))?;
    if count < 4 {
        return Err(Error::DegenerateConfiguration(format!("only {count} inliers")));
    }
    let mut mask = inliers(matches, &h, thr).0;
    for _ in 0..3 {
        let inl: Vec<PointMatch> = matches.iter().zip(&mask).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
        let Ok(refit) = estimate_homography(&inl) else { break };
        let (m2, c2, _) = inliers(matches, &refit, thr);
        if c2 < count {
            break;
        }
        let changed = m2 != mask;
        h = refit;
        mask = m2;
        count = c2;
        if !changed {
            break;
        }
    }
    if count < 4 {
        return Err(Error::DegenerateConfiguration(format!("only {count} inliers")));
    }
    Ok((h, mask))
}
