//! Phone/DSLR registration: keypoints, descriptor matching, RANSAC
//! homographies, warping into the phone frame and cross-correlation-gated
//! patch extraction.

mod homography;
mod matching;
mod patches;
mod pipeline;
pub mod sift;
mod warp;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imageio::ImageGray;

pub use homography::{estimate_homography, estimate_homography_ransac, Homography, PointMatch};
pub use matching::match_descriptors;
pub use patches::{cross_correlation, extract_patch_pairs, Correlation};
pub use pipeline::{align_pair, discover_pairs, prepare, HistogramBin, ImagePair, PrepareSummary, SkippedImage, DSLR_DIR};
pub use sift::Sift;
pub use warp::{largest_rectangle, warp_and_crop};

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    /// Unit-norm descriptor (128 values for [`Sift`]).
    pub descriptor: Vec<f32>,
}

/// Anything that turns a grayscale image into described keypoints.
pub trait FeatureDetector: Sync {
    fn detect(&self, img: &ImageGray) -> Result<Vec<Keypoint>>;
}

pub fn detect_and_describe(img: &ImageGray) -> Result<Vec<Keypoint>> {
    Sift::default().detect(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub ransac_iters: usize,
    pub ransac_inlier_px: f64,
    pub ratio_test: f64,
    pub patch_size: usize,
    pub cc_threshold: f64,
    pub max_shift: usize,
    /// Rotations searched span `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
    pub rotation_step: f64,
    /// Smallest accepted overlap side after warping.
    pub min_overlap: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            ransac_iters: 2000,
            ransac_inlier_px: 3.0,
            ratio_test: 0.8,
            patch_size: 100,
            cc_threshold: 0.9,
            max_shift: 5,
            rotation_range: 1.5,
            rotation_step: 0.5,
            min_overlap: 64,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.ransac_iters == 0 {
            return bad("ransac_iters must be at least 1");
        }
        if !(self.ransac_inlier_px > 0.0) {
            return bad("ransac_inlier_px must be positive");
        }
        if !(self.ratio_test > 0.0 && self.ratio_test <= 1.0) {
            return bad("ratio_test must lie in (0, 1]");
        }
        if self.patch_size < 16 {
            return bad("patch_size must be at least 16");
        }
        if !(-1.0..=1.0).contains(&self.cc_threshold) {
            return bad("cc_threshold must lie in [-1, 1]");
        }
        if !(self.rotation_range >= 0.0) || (self.rotation_range > 0.0 && !(self.rotation_step > 0.0)) {
            return bad("rotation_range must be >= 0 with a positive rotation_step");
        }
        Ok(())
    }

    /// Candidate rotations in degrees, zero first.
    pub fn rotations(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        if self.rotation_range > 0.0 {
            let n = (self.rotation_range / self.rotation_step + 1e-9).floor() as i64;
            for i in 1..=n {
                let a = i as f64 * self.rotation_step;
                out.push(-a);
                out.push(a);
            }
        }
        out
    }
}
