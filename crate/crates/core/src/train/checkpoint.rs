//! Checkpoint directories: both networks, the Adam moments, the sampling
//! RNG position and a manifest tying them to a configuration.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::adam::Moments;
use super::{TrainConfig, TrainState};
use crate::dataset::write_json;
use crate::error::{Error, Result};
use crate::losses::EvalCounters;
use crate::nets::container::{self, NamedTensor};
use crate::nets::{DiscriminatorWeights, GeneratorWeights, ParamKind, ParamSet};

pub const GENERATOR_FILE: &str = "generator.dpedw";
pub const DISCRIMINATOR_FILE: &str = "discriminator.dpedw";
pub const MOMENTS_FILE: &str = "adam_moments.dpedw";
pub const RNG_FILE: &str = "rng.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
const MOMENTS_KIND: &str = "adam_moments";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub iter: usize,
    pub config_hash: String,
    pub seed: u64,
    pub pretrained: bool,
    pub counters: EvalCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct MomentSteps {
    generator_t: u64,
    discriminator_t: u64,
}

fn moment_tensors(prefix: &str, params: &ParamSet<f32>, m: &Moments<f32>, out: &mut Vec<NamedTensor>) {
    for (i, p) in params.iter().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        for (suffix, buf) in [("m", &m.m[i]), ("v", &m.v[i])] {
            out.push(NamedTensor {
                name: format!("{prefix}/{}.{suffix}", p.name),
                shape: p.shape.clone(),
                data: buf.clone(),
            });
        }
    }
}

fn read_moments(c: &container::Container, prefix: &str, params: &ParamSet<f32>, t: u64) -> Result<Moments<f32>> {
    let mut m = Moments::zeros(params);
    m.t = t;
    let expected: Vec<(String, Vec<usize>)> = params
        .iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .flat_map(|p| {
            ["m", "v"].map(|s| (format!("{prefix}/{}.{s}", p.name), p.shape.clone()))
        })
        .collect();
    let mut data = container::expect_tensors(c, MOMENTS_KIND, &expected)?.into_iter();
    for (i, p) in params.iter().enumerate() {
        if p.kind == ParamKind::Trainable {
            m.m[i] = data.next().expect("m buffer");
            m.v[i] = data.next().expect("v buffer");
        }
    }
    Ok(m)
}

pub fn save(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.generator.save(dir.join(GENERATOR_FILE))?;
    state.discriminator.save(dir.join(DISCRIMINATOR_FILE))?;
    let mut tensors = Vec::new();
    moment_tensors("generator", state.generator.params(), &state.g_moments, &mut tensors);
    moment_tensors("discriminator", state.discriminator.params(), &state.d_moments, &mut tensors);
    let steps = MomentSteps {
        generator_t: state.g_moments.t,
        discriminator_t: state.d_moments.t,
    };
    container::write(
        dir.join(MOMENTS_FILE),
        MOMENTS_KIND,
        serde_json::to_value(steps).expect("serializable"),
        &tensors,
    )?;
    let rng = RngState {
        seed: hex::encode(state.rng.get_seed()),
        stream: state.rng.get_stream(),
        word_pos: state.rng.get_word_pos().to_string(),
    };
    write_json(&dir.join(RNG_FILE), &rng)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &CheckpointManifest {
            iter: state.iter,
            config_hash: cfg.trajectory_hash(),
            seed: cfg.seed,
            pretrained: state.pretrained,
            counters: state.counters,
        },
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_config(dir: &Path) -> Result<TrainConfig> {
    read_json(&dir.join(CONFIG_FILE))
}

/// Restores a training state, refusing checkpoints written under a
/// configuration with a different trajectory.
pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != cfg.trajectory_hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was written under a different configuration",
            dir.display()
        )));
    }
    let generator = GeneratorWeights::<f32>::load(dir.join(GENERATOR_FILE))?;
    let discriminator = DiscriminatorWeights::<f32>::load(dir.join(DISCRIMINATOR_FILE))?;
    let c = container::read(dir.join(MOMENTS_FILE))?;
    let steps: MomentSteps =
        serde_json::from_value(c.arch.clone()).map_err(|e| Error::Schema(format!("moment steps: {e}")))?;
    let g_moments = read_moments(&c, "generator", generator.params(), steps.generator_t)?;
    let d_moments = read_moments(&c, "discriminator", discriminator.params(), steps.discriminator_t)?;
    let rng_state: RngState = read_json(&dir.join(RNG_FILE))?;
    let seed_bytes = hex::decode(&rng_state.seed).map_err(|e| Error::Schema(format!("rng seed: {e}")))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Schema("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = rng_state
        .word_pos
        .parse()
        .map_err(|e| Error::Schema(format!("rng word_pos: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rng_state.stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        generator,
        discriminator,
        g_moments,
        d_moments,
        iter: manifest.iter,
        rng,
        pretrained: manifest.pretrained,
        counters: manifest.counters,
    })
}
