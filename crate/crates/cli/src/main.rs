mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dped::align::{self, AlignConfig, Sift};
use dped::dataset::{PatchPack, PatchPair, Split};
use dped::eval::{self, SsimMode};
use dped::imageio::{self, GaussianKernelSpec};
use dped::losses::LossProfile;
use dped::nets::{DiscriminatorConfig, GeneratorWeights, VggConfig, VggWeights};
use dped::train::{self, checkpoint, TrainConfig};
use dped::{exec, Error};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{apply, from_cli, pick, FileConfig};

/// Phone-to-DSLR photo enhancement: dataset preparation, training,
/// inference and evaluation.
///
/// Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
/// 3 empty result, 4 numeric divergence.
#[derive(Parser)]
#[command(name = "dped", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 picks one per core
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Serial execution and byte-identical outputs
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML file with top-level seed/threads/deterministic and [align], [train], [curve] tables
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Align phone/DSLR captures and write a patch pack
    Prepare {
        /// Root holding <phone>/NNN.jpg and dslr/NNN.jpg
        raw_dir: PathBuf,
        out_dir: PathBuf,
        /// Phone directory name; needed when the root holds several
        #[arg(long)]
        phone: Option<String>,
        #[command(flatten)]
        align: AlignArgs,
    },
    /// Train a generator on the pack's train split
    Train {
        pack_dir: PathBuf,
        out_dir: PathBuf,
        /// VGG-19 weights; required by the content-bearing profiles
        #[arg(long)]
        vgg: Option<PathBuf>,
        /// Continue from this checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ProfileArg::Full)]
        profile: ProfileArg,
        #[arg(long, default_value_t = TrainConfig::default().iterations)]
        iterations: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Enhance one image at full resolution
    Enhance {
        /// Checkpoint directory or generator .dpedw file
        checkpoint: PathBuf,
        input: PathBuf,
        /// Output PNG
        output: PathBuf,
    },
    /// Score a checkpoint on the pack's test split (CSV plus JSON next to it)
    Evaluate {
        checkpoint: PathBuf,
        pack_dir: PathBuf,
        out_csv: PathBuf,
        /// How color images are reduced for SSIM
        #[arg(long, value_enum, default_value_t = SsimArg::Gray)]
        ssim: SsimArg,
    },
    /// Pixel-shift sensitivity of MSE and the color loss
    Curve {
        /// Directory of png/jpg images
        corpus_dir: PathBuf,
        out_csv: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_shift: usize,
        /// Side of the square crops cut from each image; 0 uses whole images
        #[arg(long, default_value_t = 100)]
        crop: usize,
        /// Also draw the two curves into this PNG
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train and score all four loss profiles on the same data
    Ablate {
        pack_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        vgg: Option<PathBuf>,
        /// Iterations per profile
        #[arg(long, default_value_t = ABLATE_ITERS)]
        iterations: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
}

const ABLATE_ITERS: usize = 200;

#[derive(Args)]
struct AlignArgs {
    #[arg(long, default_value_t = AlignConfig::default().patch_size)]
    patch_size: usize,
    /// Minimum normalized cross-correlation of a kept patch pair
    #[arg(long, default_value_t = AlignConfig::default().cc_threshold)]
    cc_threshold: f64,
    /// Largest translation searched by the refinement, in pixels
    #[arg(long, default_value_t = AlignConfig::default().max_shift)]
    max_shift: usize,
    #[arg(long, default_value_t = AlignConfig::default().ransac_iters)]
    ransac_iters: usize,
    #[arg(long, default_value_t = AlignConfig::default().ransac_inlier_px)]
    ransac_inlier_px: f64,
    #[arg(long, default_value_t = AlignConfig::default().ratio_test)]
    ratio_test: f64,
    /// Degrees
    #[arg(long, default_value_t = AlignConfig::default().rotation_range)]
    rotation_range: f64,
    /// Degrees
    #[arg(long, default_value_t = AlignConfig::default().rotation_step)]
    rotation_step: f64,
    #[arg(long, default_value_t = AlignConfig::default().min_overlap)]
    min_overlap: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Discriminator-only steps before joint training
    #[arg(long, default_value_t = TrainConfig::default().pretrain_iters)]
    pretrain_iters: usize,
    #[arg(long, default_value_t = TrainConfig::default().d_steps_per_g)]
    d_steps_per_g: usize,
    /// VGG-19 layer for the content loss
    #[arg(long, default_value_t = TrainConfig::default().content_layer)]
    content_layer: String,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.content)]
    w_content: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.texture)]
    w_texture: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.color)]
    w_color: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.tv)]
    w_tv: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.mse)]
    w_mse: f64,
    /// 0 keeps only the final checkpoint
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().generator.channels)]
    generator_channels: usize,
    /// Divide every discriminator width by this
    #[arg(long, default_value_t = 1)]
    discriminator_divisor: usize,
    /// Width divisor of the stack stored in the --vgg file; 1 is the canonical VGG-19
    #[arg(long, default_value_t = 1)]
    vgg_divisor: usize,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ProfileArg {
    Full,
    ContentTexture,
    MseTexture,
    Mse,
}

impl From<ProfileArg> for LossProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Full => LossProfile::Full,
            ProfileArg::ContentTexture => LossProfile::ContentTexture,
            ProfileArg::MseTexture => LossProfile::MseTexture,
            ProfileArg::Mse => LossProfile::Mse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SsimArg {
    Gray,
    ChannelMean,
}

impl From<SsimArg> for SsimMode {
    fn from(s: SsimArg) -> Self {
        match s {
            SsimArg::Gray => SsimMode::Gray,
            SsimArg::ChannelMean => SsimMode::ChannelMean,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(
            Error::Config(_)
            | Error::Layout(_)
            | Error::Schema(_)
            | Error::Decode { .. }
            | Error::Io { .. }
            | Error::UnknownLayer(_)
            | Error::InvalidSpec(_)
            | Error::InvalidSize(_)
            | Error::KernelTooLarge { .. }
            | Error::Shape(_)
            | Error::ImageTooSmall(_),
        ) => 2,
        Some(Error::EmptyDataset(_) | Error::EmptyCorpus) => 3,
        Some(Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) | Error::NonFiniteComponent(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli, top: &ArgMatches) -> anyhow::Result<()> {
    let file = config::load(cli.global.config.as_deref())?;
    let (name, sub) = top.subcommand().expect("subcommand is required");
    log::debug!("command {name}");

    let threads = pick(top, "threads", &cli.global.threads, file.threads);
    if threads > 0 {
        exec::configure_threads(threads);
    }
    if cli.global.deterministic || file.deterministic.unwrap_or(false) {
        exec::set_deterministic(true);
    }
    let seed = (from_cli(top, "seed") || file.seed.is_some()).then(|| pick(top, "seed", &cli.global.seed, file.seed));

    match cli.command {
        Command::Prepare {
            raw_dir,
            out_dir,
            phone,
            align,
        } => {
            let cfg = align_config(sub, &align, &file)?;
            let summary = align::prepare(&raw_dir, &out_dir, phone.as_deref(), &cfg, seed.unwrap_or(0), &Sift::default())?;
            println!(
                "{} pairs found, {} processed, {} skipped, {} patches",
                summary.pairs_found,
                summary.processed,
                summary.skipped.len(),
                summary.patches
            );
            if summary.patches == 0 {
                return Err(Error::EmptyDataset("alignment produced no patches".into()).into());
            }
        }
        Command::Train {
            pack_dir,
            out_dir,
            vgg,
            resume,
            profile,
            iterations,
            train: args,
        } => {
            let mut cfg = train_config(sub, &args, iterations, &file, TrainConfig::default(), seed)?;
            apply(sub, "profile", &profile.into(), &mut cfg.loss_profile);
            let data = PatchPack::open(&pack_dir)?.load(Split::Train)?;
            fit_discriminator(&mut cfg, &data);
            let vgg = load_vgg(vgg.as_deref(), args.vgg_divisor, &cfg)?;
            let outcome = match resume {
                Some(ckpt) => train::resume(&ckpt, &data, &cfg, vgg.as_ref(), &out_dir)?,
                None => train::train(&data, &cfg, vgg.as_ref(), &out_dir)?,
            };
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Enhance {
            checkpoint: ckpt,
            input,
            output,
        } => {
            let gen = load_generator(&ckpt)?;
            let img = imageio::load_image(&input)?;
            let out = eval::enhance_image(&gen, &img)?;
            imageio::save_image(&out, &output)?;
            println!("wrote {} ({}x{})", output.display(), out.width(), out.height());
        }
        Command::Evaluate {
            checkpoint: ckpt,
            pack_dir,
            out_csv,
            ssim,
        } => {
            let gen = load_generator(&ckpt)?;
            let pairs = PatchPack::open(&pack_dir)?.load(Split::Test)?;
            if pairs.is_empty() {
                return Err(Error::EmptyDataset("test split is empty".into()).into());
            }
            let report = eval::evaluate_with(&pairs, ssim.into(), |p| eval::enhance_image(&gen, &p.source))?;
            report.write_csv(&out_csv)?;
            report.write_json(out_csv.with_extension("json"))?;
            let a = &report.aggregates;
            println!("{} pairs, mean PSNR {:.4} dB, mean SSIM {:.5}", a.count, a.mean_psnr, a.mean_ssim);
        }
        Command::Curve {
            corpus_dir,
            out_csv,
            max_shift,
            crop,
            plot,
        } => {
            let cf = file.curve.unwrap_or_default();
            let max_shift = pick(sub, "max_shift", &max_shift, cf.max_shift);
            let crop = pick(sub, "crop", &crop, cf.crop);
            let kernel = cf.kernel.unwrap_or_else(GaussianKernelSpec::default);
            let images = corpus(&corpus_dir, crop)?;
            let curve = eval::shift_sensitivity_curve(&images, max_shift, &kernel, seed.unwrap_or(0))?;
            curve.write_csv(&out_csv)?;
            if let Some(p) = plot {
                plot::render(&curve, &p)?;
            }
            for (i, r) in curve.ratios().iter().enumerate() {
                let r = r.map_or("-".to_string(), |v| format!("{v:.3}"));
                println!("shift {:>2}: mse {:.6e} color {:.6e} ratio {r}", curve.shifts[i], curve.mse[i], curve.color[i]);
            }
        }
        Command::Ablate {
            pack_dir,
            out_dir,
            vgg,
            iterations,
            train: args,
        } => {
            let base = TrainConfig {
                iterations: ABLATE_ITERS,
                ..TrainConfig::default()
            };
            let mut cfg = train_config(sub, &args, iterations, &file, base, seed)?;
            let pack = PatchPack::open(&pack_dir)?;
            let train_pairs = pack.load(Split::Train)?;
            let test_pairs = pack.load(Split::Test)?;
            fit_discriminator(&mut cfg, &train_pairs);
            let vgg = load_vgg(vgg.as_deref(), args.vgg_divisor, &cfg)?;
            eval::ablation_run(&train_pairs, &test_pairs, &cfg, vgg.as_ref(), &out_dir, |r| {
                println!("{:<22} PSNR {:.4} dB  SSIM {:.5}", r.label, r.mean_psnr, r.mean_ssim);
            })?;
        }
    }
    Ok(())
}

/// Serializes `base`, overlays the keys present in `table` and parses the
/// result, so a partial file section only touches the keys it names.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>) -> anyhow::Result<T> {
    fn merge(dst: &mut toml::Table, src: &toml::Table) {
        for (k, v) in src {
            match (dst.get_mut(k), v) {
                (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
                _ => {
                    dst.insert(k.clone(), v.clone());
                }
            }
        }
    }
    let Some(table) = table else {
        return Ok(toml::Value::try_from(base)?.try_into()?);
    };
    let mut merged = toml::Table::try_from(base)?;
    merge(&mut merged, table);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Config(format!("config file: {e}")).into())
}

fn align_config(m: &ArgMatches, a: &AlignArgs, file: &FileConfig) -> anyhow::Result<AlignConfig> {
    let mut cfg = overlay(&AlignConfig::default(), file.align.as_ref())?;
    apply(m, "patch_size", &a.patch_size, &mut cfg.patch_size);
    apply(m, "cc_threshold", &a.cc_threshold, &mut cfg.cc_threshold);
    apply(m, "max_shift", &a.max_shift, &mut cfg.max_shift);
    apply(m, "ransac_iters", &a.ransac_iters, &mut cfg.ransac_iters);
    apply(m, "ransac_inlier_px", &a.ransac_inlier_px, &mut cfg.ransac_inlier_px);
    apply(m, "ratio_test", &a.ratio_test, &mut cfg.ratio_test);
    apply(m, "rotation_range", &a.rotation_range, &mut cfg.rotation_range);
    apply(m, "rotation_step", &a.rotation_step, &mut cfg.rotation_step);
    apply(m, "min_overlap", &a.min_overlap, &mut cfg.min_overlap);
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(
    m: &ArgMatches,
    a: &TrainArgs,
    iterations: usize,
    file: &FileConfig,
    base: TrainConfig,
    seed: Option<u64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = overlay(&base, file.train.as_ref())?;
    apply(m, "iterations", &iterations, &mut cfg.iterations);
    apply(m, "batch_size", &a.batch_size, &mut cfg.batch_size);
    apply(m, "lr", &a.lr, &mut cfg.lr);
    apply(m, "pretrain_iters", &a.pretrain_iters, &mut cfg.pretrain_iters);
    apply(m, "d_steps_per_g", &a.d_steps_per_g, &mut cfg.d_steps_per_g);
    apply(m, "content_layer", &a.content_layer, &mut cfg.content_layer);
    apply(m, "w_content", &a.w_content, &mut cfg.loss_weights.content);
    apply(m, "w_texture", &a.w_texture, &mut cfg.loss_weights.texture);
    apply(m, "w_color", &a.w_color, &mut cfg.loss_weights.color);
    apply(m, "w_tv", &a.w_tv, &mut cfg.loss_weights.tv);
    apply(m, "w_mse", &a.w_mse, &mut cfg.loss_weights.mse);
    apply(m, "checkpoint_every", &a.checkpoint_every, &mut cfg.checkpoint_every);
    apply(m, "generator_channels", &a.generator_channels, &mut cfg.generator.channels);
    if from_cli(m, "discriminator_divisor") {
        let side = cfg.discriminator.input_side;
        cfg.discriminator = DiscriminatorConfig {
            input_side: side,
            ..DiscriminatorConfig::reduced(a.discriminator_divisor.max(1))
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The discriminator sees whole patches, so its input side follows the pack.
fn fit_discriminator(cfg: &mut TrainConfig, data: &[PatchPair]) {
    if let Some(p) = data.first() {
        let side = p.target.height();
        if cfg.discriminator.input_side != side {
            log::info!("discriminator input side set to the patch side {side}");
            cfg.discriminator.input_side = side;
        }
    }
}

fn load_vgg(path: Option<&Path>, divisor: usize, cfg: &TrainConfig) -> anyhow::Result<Option<VggWeights<f32>>> {
    match path {
        Some(p) if divisor > 1 => Ok(Some(VggWeights::load_with(p, VggConfig::reduced(divisor))?)),
        Some(p) => Ok(Some(VggWeights::load(p)?)),
        None if cfg.needs_vgg() => Err(Error::Config(format!(
            "profile `{}` needs VGG-19 weights; pass --vgg or use --profile mse_texture or mse",
            cfg.loss_profile
        ))
        .into()),
        None => Ok(None),
    }
}

fn load_generator(path: &Path) -> anyhow::Result<GeneratorWeights<f32>> {
    let file = if path.is_dir() {
        path.join(checkpoint::GENERATOR_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(GeneratorWeights::<f32>::load(&file)?)
}

fn corpus(dir: &Path, crop: usize) -> anyhow::Result<Vec<imageio::ImageRGB>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in &paths {
        let img = imageio::load_image(p).with_context(|| format!("corpus image {}", p.display()))?;
        if crop == 0 {
            out.push(img);
        } else {
            out.extend(eval::crop_grid(&img, crop, crop));
        }
    }
    log::info!("{} images, {} crops", paths.len(), out.len());
    Ok(out)
}
