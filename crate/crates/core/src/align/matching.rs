use super::Keypoint;

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest and second-nearest neighbour of each row of `a` in `b`.
fn nearest(a: &[Keypoint], b: &[Keypoint]) -> Vec<Option<(usize, f32, f32)>> {
    crate::exec::map_indexed(a.len(), |i| {
        let mut best = (usize::MAX, f32::INFINITY);
        let mut second = f32::INFINITY;
        for (j, kb) in b.iter().enumerate() {
            let d = dist2(&a[i].descriptor, &kb.descriptor);
            if d < best.1 {
                second = best.1;
                best = (j, d);
            } else if d < second {
                second = d;
            }
        }
        (best.0 != usize::MAX).then_some((best.0, best.1, second))
    })
}

/// Mutual nearest neighbours whose nearest/second-nearest distance ratio
/// is below `ratio` (a ratio of 1 disables the test).
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let mut out = Vec::new();
    for (i, m) in ab.iter().enumerate() {
        let Some((j, d1, d2)) = *m else { continue };
        if ba[j].map(|(k, _, _)| k) != Some(i) {
            continue;
        }
        let (d1, d2) = ((d1 as f64).sqrt(), (d2 as f64).sqrt());
        if ratio < 1.0 && !(d1 < ratio * d2) {
            continue;
        }
        out.push((i, j));
    }
    out
}
