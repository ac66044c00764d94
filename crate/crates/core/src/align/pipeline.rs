use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    estimate_homography_ransac, extract_patch_pairs, match_descriptors, warp_and_crop, AlignConfig, FeatureDetector,
    Keypoint, PointMatch,
};
use crate::dataset::{PackWriter, PatchPair};
use crate::error::{Error, Result};
use crate::imageio::{downscale, load_image, to_grayscale, ImageRGB};

pub const DSLR_DIR: &str = "dslr";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const HIST_BINS: usize = 10;
/// Images processed together; bounds memory held by pending patches.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub stem: String,
    pub phone: PathBuf,
    pub dslr: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub stem: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub phone_dir: String,
    pub pairs_found: usize,
    pub processed: usize,
    pub skipped: Vec<SkippedImage>,
    pub patches: usize,
    pub cc_histogram: Vec<HistogramBin>,
    pub config: AlignConfig,
    pub seed: u64,
}

fn layout_err(root: &Path, what: &str) -> Error {
    Error::Layout(format!(
        "{what} in {}; expected <root>/<phone-name>/NNN.png paired with <root>/{DSLR_DIR}/NNN.png",
        root.display()
    ))
}

fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Finds stem-paired images. With `phone` unset the root must contain
/// exactly one directory besides `dslr`.
pub fn discover_pairs(root: &Path, phone: Option<&str>) -> Result<(String, Vec<ImagePair>)> {
    if !root.is_dir() {
        return Err(layout_err(root, "not a directory"));
    }
    let dslr_dir = root.join(DSLR_DIR);
    if !dslr_dir.is_dir() {
        return Err(layout_err(root, &format!("no `{DSLR_DIR}` directory")));
    }
    let phone_name = match phone {
        Some(p) => {
            if !root.join(p).is_dir() {
                return Err(layout_err(root, &format!("no `{p}` directory")));
            }
            p.to_string()
        }
        None => {
            let mut dirs = Vec::new();
            for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
                let path = entry.map_err(|e| Error::io(root, e))?.path();
                let name = path.file_name().and_then(|n| n.to_str()).map(str::to_string);
                if let Some(name) = name.filter(|n| path.is_dir() && n != DSLR_DIR) {
                    dirs.push(name);
                }
            }
            dirs.sort();
            match dirs.len() {
                0 => return Err(layout_err(root, "no phone directory")),
                1 => dirs.remove(0),
                _ => return Err(layout_err(root, &format!("several phone directories ({})", dirs.join(", ")))),
            }
        }
    };
    let dslr: std::collections::BTreeMap<String, PathBuf> = image_files(&dslr_dir)?.into_iter().collect();
    let pairs: Vec<ImagePair> = image_files(&root.join(&phone_name))?
        .into_iter()
        .filter_map(|(stem, phone)| {
            dslr.get(&stem).map(|d| ImagePair { stem: stem.clone(), phone, dslr: d.clone() })
        })
        .collect();
    if pairs.is_empty() {
        return Err(layout_err(root, "no stem-paired images"));
    }
    Ok((phone_name, pairs))
}

/// Keypoints of the DSLR image detected at roughly phone resolution and
/// mapped back to full-resolution coordinates.
fn dslr_keypoints(dslr: &ImageRGB, phone: &ImageRGB, detector: &dyn FeatureDetector) -> Result<Vec<Keypoint>> {
    let ratio = (phone.height().max(phone.width()) as f64) / (dslr.height().max(dslr.width()) as f64);
    if ratio >= 0.9 {
        return detector.detect(&to_grayscale(dslr));
    }
    let nh = ((dslr.height() as f64 * ratio).round() as usize).max(1);
    let nw = ((dslr.width() as f64 * ratio).round() as usize).max(1);
    let small = downscale(dslr, nh, nw)?;
    let (sy, sx) = (dslr.height() as f64 / nh as f64, dslr.width() as f64 / nw as f64);
    let mut kps = detector.detect(&to_grayscale(&small))?;
    for k in &mut kps {
        k.x = (k.x + 0.5) * sx - 0.5;
        k.y = (k.y + 0.5) * sy - 0.5;
        k.scale *= sx;
    }
    Ok(kps)
}

/// Registers one phone/DSLR pair and cuts it into patch pairs.
pub fn align_pair(
    phone: &ImageRGB,
    dslr: &ImageRGB,
    cfg: &AlignConfig,
    seed: u64,
    detector: &dyn FeatureDetector,
    origin: &str,
) -> Result<Vec<PatchPair>> {
    let kp_phone = detector.detect(&to_grayscale(phone))?;
    let kp_dslr = dslr_keypoints(dslr, phone, detector)?;
    let matches: Vec<PointMatch> = match_descriptors(&kp_dslr, &kp_phone, cfg.ratio_test)
        .into_iter()
        .map(|(i, j)| PointMatch {
            src: (kp_dslr[i].x, kp_dslr[i].y),
            dst: (kp_phone[j].x, kp_phone[j].y),
        })
        .collect();
    let (h, _) = estimate_homography_ransac(&matches, cfg, seed)?;
    let (p, d) = warp_and_crop(phone, dslr, &h, cfg)?;
    extract_patch_pairs(&p, &d, cfg, origin)
}

fn histogram(ccs: &[f64], lo: f64) -> Vec<HistogramBin> {
    let width = (1.0 - lo) / HIST_BINS as f64;
    let mut bins: Vec<HistogramBin> = (0..HIST_BINS)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &c in ccs {
        let i = (((c - lo) / width).floor().max(0.0) as usize).min(HIST_BINS - 1);
        bins[i].count += 1;
    }
    bins
}

/// Runs alignment over every stem-paired image under `raw_dir` and writes
/// a patch pack to `out_dir`. Images that fail to register are skipped and
/// listed in the summary; an empty result is not an error here.
pub fn prepare(
    raw_dir: &Path,
    out_dir: &Path,
    phone: Option<&str>,
    cfg: &AlignConfig,
    seed: u64,
    detector: &dyn FeatureDetector,
) -> Result<PrepareSummary> {
    cfg.validate()?;
    let (phone_dir, pairs) = discover_pairs(raw_dir, phone)?;
    let mut writer = PackWriter::create(out_dir)?;
    let mut skipped = Vec::new();
    let mut ccs = Vec::new();
    let mut processed = 0;
    for (c, chunk) in pairs.chunks(CHUNK).enumerate() {
        let results = crate::exec::map_indexed(chunk.len(), |k| {
            let pair = &chunk[k];
            let index = (c * CHUNK + k) as u64;
            let phone = load_image(&pair.phone)?;
            let dslr = load_image(&pair.dslr)?;
            align_pair(&phone, &dslr, cfg, seed.wrapping_add(index), detector, &pair.stem)
        });
        for (pair, res) in chunk.iter().zip(results) {
            match res {
                Ok(patches) => {
                    processed += 1;
                    log::info!("{}: {} patch pairs", pair.stem, patches.len());
                    for pp in &patches {
                        writer.add(pp)?;
                        ccs.push(pp.meta.cc);
                    }
                }
                Err(e @ (Error::Io { .. } | Error::Shape(_) | Error::Config(_))) => return Err(e),
                Err(e) => {
                    log::warn!("skipping {}: {e}", pair.stem);
                    skipped.push(SkippedImage { stem: pair.stem.clone(), reason: e.to_string() });
                }
            }
        }
    }
    let summary = PrepareSummary {
        phone_dir,
        pairs_found: pairs.len(),
        processed,
        skipped,
        patches: writer.len(),
        cc_histogram: histogram(&ccs, cfg.cc_threshold),
        config: cfg.clone(),
        seed,
    };
    writer.finish(seed, &summary)?;
    Ok(summary)
}
