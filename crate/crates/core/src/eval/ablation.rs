use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{csv_io, evaluate_dataset};
use crate::dataset::{pairs_hash, PatchPair};
use crate::error::{Error, Result};
use crate::losses::LossProfile;
use crate::nets::VggWeights;
use crate::train::{self, TrainConfig};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";

/// Full-scale iPhone scores for context only; never compared against.
fn reference(profile: LossProfile) -> (f64, f64) {
    match profile {
        LossProfile::Full => (20.08, 0.9201),
        LossProfile::ContentTexture => (19.05, 0.9166),
        LossProfile::MseTexture => (20.11, 0.9125),
        LossProfile::Mse => (20.56, 0.9198),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub profile: LossProfile,
    pub label: String,
    pub iterations: usize,
    pub test_count: usize,
    pub train_hash: String,
    pub test_hash: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub final_loss: f64,
    pub reference_psnr: f64,
    pub reference_ssim: f64,
}

fn write_tables(out_dir: &Path, rows: &[AblationRow]) -> Result<()> {
    let path = out_dir.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut md = String::from(
        "| profile | iterations | test pairs | PSNR (dB) | SSIM | full-scale iPhone PSNR | full-scale iPhone SSIM |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        md += &format!(
            "| {} | {} | {} | {:.3} | {:.4} | {:.2} | {:.4} |\n",
            r.label, r.iterations, r.test_count, r.mean_psnr, r.mean_ssim, r.reference_psnr, r.reference_ssim
        );
    }
    if let Some(r) = rows.first() {
        md += &format!("\ntest split sha256: `{}`\n", r.test_hash);
    }
    let path = out_dir.join(ABLATION_MD);
    fs::write(&path, md).map_err(|e| Error::io(&path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_io(path, e))).collect()
}

/// Trains one generator per profile, in the fixed order of
/// [`LossProfile::ALL`], from the same seed and data, and scores each on
/// the same test pairs. Tables under `out_dir` are rewritten after every
/// profile so finished rows survive an abort. `on_row` sees each row as
/// it lands.
pub fn ablation_run(
    train_pairs: &[PatchPair],
    test_pairs: &[PatchPair],
    base_cfg: &TrainConfig,
    vgg: Option<&VggWeights<f32>>,
    out_dir: &Path,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if test_pairs.is_empty() {
        return Err(Error::EmptyDataset("ablation needs a non-empty test split".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let expected_hash = pairs_hash(test_pairs);
    let train_hash = pairs_hash(train_pairs);
    let mut rows: Vec<AblationRow> = Vec::with_capacity(LossProfile::ALL.len());
    for profile in LossProfile::ALL {
        let cfg = TrainConfig {
            loss_profile: profile,
            ..base_cfg.clone()
        };
        let run_dir = out_dir.join(profile.name());
        let outcome = train::train(train_pairs, &cfg, vgg.filter(|_| cfg.needs_vgg()), &run_dir)?;
        let log = train::read_log(&run_dir.join(train::LOG_FILE))?;
        let report = evaluate_dataset(&outcome.state.generator, test_pairs)?;
        let test_hash = pairs_hash(test_pairs);
        if test_hash != expected_hash {
            return Err(Error::Shape(format!("test split changed during {}", profile.name())));
        }
        let (reference_psnr, reference_ssim) = reference(profile);
        let row = AblationRow {
            profile,
            label: profile.label().to_string(),
            iterations: cfg.iterations,
            test_count: report.aggregates.count,
            train_hash: train_hash.clone(),
            test_hash,
            mean_psnr: report.aggregates.mean_psnr,
            mean_ssim: report.aggregates.mean_ssim,
            final_loss: log.last().map_or(f64::NAN, |l| l.total),
            reference_psnr,
            reference_ssim,
        };
        report.write_csv(run_dir.join("metrics.csv"))?;
        report.write_json(run_dir.join("metrics.json"))?;
        rows.push(row);
        write_tables(out_dir, &rows)?;
        on_row(rows.last().expect("just pushed"));
    }
    Ok(rows)
}
