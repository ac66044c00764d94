//! On-disk patch packs: aligned phone/DSLR patch pairs plus an index and a
//! per-photograph train/val/test split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::{load_image, save_image, ImageRGB};

pub const INDEX_FILE: &str = "index.csv";
pub const SPLITS_FILE: &str = "splits.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PATCH_DIR: &str = "patches";

/// One row of `index.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub pair_id: String,
    pub origin_image: String,
    pub row: usize,
    pub col: usize,
    pub shift_x: i32,
    pub shift_y: i32,
    pub rotation_deg: f64,
    pub cc: f64,
}

/// A phone patch (`source`) and its aligned DSLR patch (`target`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub meta: IndexRow,
    pub source: ImageRGB,
    pub target: ImageRGB,
}

impl PatchPair {
    pub fn id(&self) -> &str {
        &self.meta.pair_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Origin photographs assigned to each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Seeded split of whole photographs, roughly 90/5/5. Test gets
    /// `ceil(5%)` once there are two photographs and validation once
    /// there are three, so small packs still have a test split.
    pub fn assign(origins: &[String], seed: u64) -> Self {
        let mut ids: Vec<String> = origins.to_vec();
        ids.sort();
        ids.dedup();
        let n = ids.len();
        let share = (n as f64 * 0.05).ceil() as usize;
        let n_test = if n >= 2 { share } else { 0 };
        let n_val = if n >= 3 { share } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let test = ids.drain(..n_test).collect::<Vec<_>>();
        let val = ids.drain(..n_val).collect::<Vec<_>>();
        let mut s = Splits {
            seed,
            train: ids,
            val,
            test,
        };
        s.train.sort();
        s.val.sort();
        s.test.sort();
        s
    }

    pub fn of(&self, origin: &str) -> Option<Split> {
        let has = |v: &Vec<String>| v.iter().any(|o| o == origin);
        if has(&self.train) {
            Some(Split::Train)
        } else if has(&self.val) {
            Some(Split::Val)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

pub fn patch_paths(root: &Path, pair_id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(PATCH_DIR);
    (dir.join(format!("{pair_id}_src.png")), dir.join(format!("{pair_id}_dst.png")))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// Writes patches and the index; call [`PackWriter::finish`] to add the
/// split and summary files.
pub struct PackWriter {
    root: PathBuf,
    rows: Vec<IndexRow>,
}

impl PackWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dir = root.join(PATCH_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(PackWriter { root, rows: Vec::new() })
    }

    pub fn add(&mut self, pair: &PatchPair) -> Result<()> {
        let (src, dst) = patch_paths(&self.root, pair.id());
        save_image(&pair.source, src)?;
        save_image(&pair.target, dst)?;
        self.rows.push(pair.meta.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes `index.csv`, `splits.json` and `summary.json`.
    pub fn finish<S: Serialize>(self, seed: u64, summary: &S) -> Result<PathBuf> {
        let index = self.root.join(INDEX_FILE);
        let mut w = csv::Writer::from_path(&index).map_err(|e| csv_err(&index, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(&index, e))?;
        }
        w.flush().map_err(|e| Error::io(&index, e))?;
        let origins: Vec<String> = self.rows.iter().map(|r| r.origin_image.clone()).collect();
        write_json(&self.root.join(SPLITS_FILE), &Splits::assign(&origins, seed))?;
        write_json(&self.root.join(SUMMARY_FILE), summary)?;
        Ok(self.root)
    }
}

/// A prepared patch pack opened for reading.
#[derive(Clone, Debug)]
pub struct PatchPack {
    root: PathBuf,
    rows: Vec<IndexRow>,
    splits: Splits,
}

impl PatchPack {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index = root.join(INDEX_FILE);
        let mut r = csv::Reader::from_path(&index).map_err(|e| csv_err(&index, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<IndexRow>, _>>()
            .map_err(|e| csv_err(&index, e))?;
        let splits: Splits = read_json(&root.join(SPLITS_FILE))?;
        for row in &rows {
            if splits.of(&row.origin_image).is_none() {
                return Err(Error::Schema(format!(
                    "origin `{}` of pair `{}` is in no split",
                    row.origin_image, row.pair_id
                )));
            }
        }
        Ok(PatchPack { root, rows, splits })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn rows_in(&self, split: Split) -> Vec<&IndexRow> {
        self.rows
            .iter()
            .filter(|r| self.splits.of(&r.origin_image) == Some(split))
            .collect()
    }

    /// Decodes every pair of a split, in index order.
    pub fn load(&self, split: Split) -> Result<Vec<PatchPair>> {
        let rows = self.rows_in(split);
        exec::try_map_indexed(rows.len(), |i| {
            let (src, dst) = patch_paths(&self.root, &rows[i].pair_id);
            Ok(PatchPair {
                meta: rows[i].clone(),
                source: load_image(src)?,
                target: load_image(dst)?,
            })
        })
    }
}

/// SHA-256 over the ids and pixel data of a list of pairs, identifying the
/// exact evaluation set.
pub fn pairs_hash(pairs: &[PatchPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id().as_bytes());
        h.update([0u8]);
        for img in [&p.source, &p.target] {
            h.update((img.height() as u64).to_le_bytes());
            h.update((img.width() as u64).to_le_bytes());
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
