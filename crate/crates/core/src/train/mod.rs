//! Adversarial training: discriminator pretraining, alternating
//! discriminator/generator Adam updates, checkpoints and the per-iteration
//! log.

pub mod adam;
pub mod checkpoint;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, Moments};
pub use config::TrainConfig;

use crate::exec;
use crate::dataset::{write_json, PatchPair};
use crate::error::{Error, Result};
use crate::imageio::{gaussian_kernel, images_to_tensor};
use crate::losses::{self, EvalCounters, LossBreakdown, LossContext};
use crate::nets::{DiscriminatorWeights, GeneratorWeights, VggWeights};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DIVERGENCE_FILE: &str = "divergence.json";

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: GeneratorWeights<f32>,
    pub discriminator: DiscriminatorWeights<f32>,
    pub g_moments: Moments<f32>,
    pub d_moments: Moments<f32>,
    /// Completed joint iterations.
    pub iter: usize,
    /// Batch-sampling stream.
    pub rng: ChaCha8Rng,
    pub pretrained: bool,
    pub counters: EvalCounters,
}

impl TrainState {
    /// Fresh networks and optimizer state derived from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Self {
        let generator = GeneratorWeights::init(cfg.generator.clone(), cfg.seed);
        let discriminator = DiscriminatorWeights::init(cfg.discriminator.clone(), cfg.seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        TrainState {
            g_moments: Moments::zeros(generator.params()),
            d_moments: Moments::zeros(discriminator.params()),
            generator,
            discriminator,
            iter: 0,
            rng,
            pretrained: false,
            counters: EvalCounters::default(),
        }
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

/// Uniform sampling with replacement.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub fn batch_tensors(data: &[PatchPair], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let src: Vec<_> = idx.iter().map(|&i| &data[i].source).collect();
    let dst: Vec<_> = idx.iter().map(|&i| &data[i].target).collect();
    Ok((images_to_tensor(&src)?, images_to_tensor(&dst)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorStep {
    pub loss: f64,
    pub accuracy: f64,
}

/// One Adam update of the discriminator on grayscale fakes and reals.
pub fn discriminator_step(
    state: &mut TrainState,
    fake_gray: &Tensor<f32>,
    real_gray: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<DiscriminatorStep> {
    let out = losses::discriminator_loss(&state.discriminator, fake_gray, real_gray, true)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("discriminator loss {}", out.loss)));
    }
    let grads = out.grads.expect("gradients requested");
    let tape = out.tape.expect("tape recorded");
    state.discriminator.update_running_stats(&tape, cfg.bn_momentum)?;
    adam_step(state.discriminator.params_mut(), &grads, &mut state.d_moments, &adam_config(cfg))?;
    Ok(DiscriminatorStep {
        loss: out.loss,
        accuracy: out.accuracy,
    })
}

/// Trains the discriminator alone to tell phone patches (fake) from DSLR
/// patches (real). Returns the last batch's accuracy, or `None` when
/// `pretrain_iters` is zero.
pub fn pretrain_discriminator(state: &mut TrainState, data: &[PatchPair], cfg: &TrainConfig) -> Result<Option<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no pairs for discriminator pretraining".into()));
    }
    let mut acc = None;
    for _ in 0..cfg.pretrain_iters {
        let idx = sample_indices(&mut state.rng, data.len(), cfg.batch_size);
        let (src, dst) = batch_tensors(data, &idx)?;
        let step = discriminator_step(state, &losses::gray_tensor(&src)?, &losses::gray_tensor(&dst)?, cfg)?;
        acc = Some(step.accuracy);
    }
    state.pretrained = true;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub d_loss: f64,
    pub d_acc: f64,
}

/// Discriminator update(s) on the current generator's output, then one
/// generator update through the profile's objective.
pub fn train_step(
    state: &mut TrainState,
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    cfg: &TrainConfig,
    vgg: Option<&VggWeights<f32>>,
) -> Result<StepReport> {
    if source.batch() != cfg.batch_size {
        return Err(Error::Shape(format!(
            "batch of {} pairs, configured batch size {}",
            source.batch(),
            cfg.batch_size
        )));
    }
    // The generator does not change during the discriminator steps, so one
    // forward pass serves both sides.
    let (enhanced, tape) = state.generator.forward_train(source)?;
    let mut d = DiscriminatorStep::default();
    if cfg.loss_profile.components().texture {
        let real_gray = losses::gray_tensor(target)?;
        let fake_gray = losses::gray_tensor(&enhanced)?;
        for _ in 0..cfg.d_steps_per_g {
            d = discriminator_step(state, &fake_gray, &real_gray, cfg)?;
        }
    }

    let kernel = gaussian_kernel(&cfg.color_kernel)?;
    let ctx = LossContext {
        discriminator: &state.discriminator,
        vgg,
        kernel: &kernel,
        layer: cfg.layer()?,
        weights: cfg.loss_weights,
        profile: cfg.loss_profile,
        color_norm: cfg.color_norm,
        content_norm: cfg.content_norm,
    };
    let (loss, dy) = match losses::generator_objective(&ctx, &enhanced, target, &mut state.counters) {
        Ok(v) => v,
        Err(Error::NonFiniteComponent(m)) => return Err(Error::NonFiniteLoss(m)),
        Err(e) => return Err(e),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("generator total {}", loss.total)));
    }
    let grads = state.generator.backward_params(&tape, &dy)?;
    state.generator.update_running_stats(&tape, cfg.bn_momentum)?;
    adam_step(state.generator.params_mut(), &grads, &mut state.g_moments, &adam_config(cfg))?;
    state.iter += 1;
    Ok(StepReport {
        loss,
        d_loss: d.loss,
        d_acc: d.accuracy,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub total: f64,
    pub content: f64,
    pub texture: f64,
    pub color: f64,
    pub tv: f64,
    pub mse: f64,
    pub d_loss: f64,
    pub d_acc: f64,
    /// Zero in deterministic mode.
    pub wallclock_ms: u64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub pretrain_accuracy: Option<f64>,
}

pub fn checkpoint_path(out_dir: &Path, iter: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("iter-{iter:06}"))
}

fn check_inputs(data: &[PatchPair], cfg: &TrainConfig, vgg: Option<&VggWeights<f32>>) -> Result<()> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::EmptyDataset(format!(
            "{} training pairs, batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if cfg.needs_vgg() && vgg.is_none() {
        return Err(Error::Config(format!("profile `{}` needs VGG-19 weights", cfg.loss_profile)));
    }
    Ok(())
}

/// Pretrains the discriminator, then runs `cfg.iterations` joint steps,
/// writing the log to `out_dir/train_log.ndjson` and checkpoints under
/// `out_dir/checkpoints/`.
pub fn train(
    data: &[PatchPair],
    cfg: &TrainConfig,
    vgg: Option<&VggWeights<f32>>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_inputs(data, cfg, vgg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    run(TrainState::new(cfg), data, cfg, vgg, out_dir)
}

/// Continues from a checkpoint up to `cfg.iterations`, appending to the log.
pub fn resume(
    checkpoint: &Path,
    data: &[PatchPair],
    cfg: &TrainConfig,
    vgg: Option<&VggWeights<f32>>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_inputs(data, cfg, vgg)?;
    let state = checkpoint::load(checkpoint, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    run(state, data, cfg, vgg, out_dir)
}

fn run(
    mut state: TrainState,
    data: &[PatchPair],
    cfg: &TrainConfig,
    vgg: Option<&VggWeights<f32>>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut pretrain_accuracy = None;
    if !state.pretrained {
        if cfg.loss_profile.components().texture {
            pretrain_accuracy = pretrain_discriminator(&mut state, data, cfg)?;
            log::info!("discriminator pretrained, last batch accuracy {pretrain_accuracy:?}");
        }
        state.pretrained = true;
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut last = None;
    while state.iter < cfg.iterations {
        let started = Instant::now();
        let idx = sample_indices(&mut state.rng, data.len(), cfg.batch_size);
        let (src, dst) = batch_tensors(data, &idx)?;
        let report = match train_step(&mut state, &src, &dst, cfg, vgg) {
            Ok(r) => r,
            Err(e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_))) => {
                let dump = serde_json::json!({
                    "iter": state.iter + 1,
                    "error": e.to_string(),
                    "batch": idx,
                });
                write_json(&out_dir.join(DIVERGENCE_FILE), &dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let row = LogRow {
            iter: state.iter,
            total: report.loss.total,
            content: report.loss.content,
            texture: report.loss.texture,
            color: report.loss.color,
            tv: report.loss.tv,
            mse: report.loss.mse,
            d_loss: report.d_loss,
            d_acc: report.d_acc,
            wallclock_ms: if exec::is_deterministic() { 0 } else { started.elapsed().as_millis() as u64 },
        };
        let line = serde_json::to_string(&row).expect("serializable");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if state.iter % 100 == 0 {
            log::info!("iter {} total {:.5} d_loss {:.4}", state.iter, row.total, row.d_loss);
        }
        let periodic = cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0;
        if periodic || state.iter == cfg.iterations {
            let dir = checkpoint_path(out_dir, state.iter);
            checkpoint::save(&dir, &state, cfg)?;
            last = Some(dir);
        }
    }
    let checkpoint = match last {
        Some(p) => p,
        None => {
            // Resumed at or past the budget: still leave a checkpoint behind.
            let dir = checkpoint_path(out_dir, state.iter);
            checkpoint::save(&dir, &state, cfg)?;
            dir
        }
    };
    Ok(TrainOutcome {
        state,
        checkpoint,
        pretrain_accuracy,
    })
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Schema(format!("{}: {e}", path.display()))))
        .collect()
}
