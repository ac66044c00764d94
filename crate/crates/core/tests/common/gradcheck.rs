//! Central finite differences against the hand-written backward passes,
//! in f64, on a reduced generator, discriminator and VGG.
//!
//! ReLU-family networks are only piecewise smooth, and a central
//! difference whose stencil straddles a kink measures neither side's
//! slope. For smooth `f` the one-sided gap `(f(h) + f(-h) - 2 f(0)) / h`
//! is linear in `h`; a kink inside the stencil breaks that, so the step
//! starts at `EPS` and halves until the gap scales. The analytic gradient
//! plays no part in choosing the step.

use dped::imageio::{gaussian_kernel, GaussianKernelSpec};
use dped::losses::{
    discriminator_loss, generator_objective, gray_tensor, ColorNorm, ContentNorm, EvalCounters, LossContext,
    LossProfile, LossWeights,
};
use dped::nets::{
    DiscriminatorConfig, DiscriminatorWeights, GeneratorConfig, GeneratorWeights, ParamKind, VggConfig, VggLayer,
    VggWeights,
};
use dped::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
const MIN_EPS: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;
pub const SIDE: usize = 32;
pub const BATCH: usize = 2;

#[derive(Debug, Default)]
pub struct Report {
    pub checks: usize,
    /// Checks whose step had to shrink below `EPS` to clear a kink.
    pub refined: usize,
    /// Checks that landed on a kink and were compared one-sidedly.
    pub kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Finite-difference estimate of `f'(0)`.
pub struct Numeric {
    pub value: f64,
    /// One-sided slopes when no step down to `MIN_EPS` cleared a kink:
    /// the point sits on the kink itself, where backprop must return the
    /// slope of one side.
    pub one_sided: Option<(f64, f64)>,
    pub step: f64,
    pub f0: f64,
}

/// Central difference of `f` at 0 with the kink-avoiding step schedule.
pub fn central(f: impl Fn(f64) -> f64) -> Numeric {
    let f0 = f(0.0);
    let mut h = EPS;
    let (mut fp, mut fm) = (f(h), f(-h));
    loop {
        let (hp, hm) = (f(h / 2.0), f(-h / 2.0));
        let fine = (hp - hm) / h;
        let gap = (fp + fm - 2.0 * f0) / h;
        let gap_half = (hp + hm - 2.0 * f0) / (h / 2.0);
        let scale = fine.abs().max(noise_floor(f0, h / 2.0));
        let allowed = 0.1 * TOLERANCE * scale + 12.0 * F_NOISE * f0.abs() / h;
        let smooth = (gap - 2.0 * gap_half).abs() <= allowed;
        if smooth || h / 2.0 < MIN_EPS {
            let half = h / 2.0;
            return Numeric {
                value: fine,
                one_sided: (!smooth).then(|| ((f0 - hm) / half, (hp - f0) / half)),
                step: half,
                f0,
            };
        }
        h /= 2.0;
        (fp, fm) = (hp, hm);
    }
}

/// Relative rounding noise of one loss evaluation (long f64 reductions
/// land tens of ulps apart under tiny perturbations).
const F_NOISE: f64 = 1e-14;

/// Gradient magnitude below which a difference quotient at step `eps` is
/// rounding-dominated; smaller gradients are compared against this scale.
fn noise_floor(f0: f64, eps: f64) -> f64 {
    (1.5 / TOLERANCE * F_NOISE * f0.abs() / eps).max(1e-6)
}

impl Report {
    fn record(&mut self, what: String, analytic: f64, n: Numeric) {
        let floor = noise_floor(n.f0, n.step);
        let rel = |numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        let err = match n.one_sided {
            None => rel(n.value),
            Some((left, right)) => rel(left).min(rel(right)),
        };
        self.checks += 1;
        self.refined += usize::from(n.step < EPS / 2.0);
        self.kinks += usize::from(n.one_sided.is_some());
        self.worst = self.worst.max(err);
        if !(err < TOLERANCE) {
            self.failures.push(format!(
                "{what}: analytic {analytic:.9e} numeric {:.9e} one-sided {:?} (step {:.1e}) rel {err:.3e}",
                n.value, n.one_sided, n.step
            ));
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checks += other.checks;
        self.refined += other.refined;
        self.kinks += other.kinks;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
}

fn jitter_bn(params: &mut dped::nets::ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for p in params.as_mut_slice() {
        if p.name.ends_with(".gamma") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if p.name.ends_with(".beta") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

/// (tensor index, element) pairs over trainable tensors, each tensor
/// chosen uniformly so small tensors are not starved.
fn pick(rng: &mut ChaCha8Rng, params: &dped::nets::ParamSet<f64>, count: usize) -> Vec<(usize, usize)> {
    let trainable: Vec<usize> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(i, _)| i)
        .collect();
    (0..count)
        .map(|_| {
            let t = trainable[rng.random_range(0..trainable.len())];
            (t, rng.random_range(0..params.as_slice()[t].data.len()))
        })
        .collect()
}

pub struct Draw {
    pub generator: GeneratorWeights<f64>,
    pub discriminator: DiscriminatorWeights<f64>,
    pub vgg: VggWeights<f64>,
    pub source: Tensor<f64>,
    pub target: Tensor<f64>,
}

pub fn draw(seed: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generator = GeneratorWeights::<f64>::init(GeneratorConfig::with_channels(8), seed);
    jitter_bn(generator.params_mut(), &mut rng);
    let dcfg = DiscriminatorConfig {
        input_side: SIDE,
        ..DiscriminatorConfig::reduced(8)
    };
    let mut discriminator = DiscriminatorWeights::<f64>::init(dcfg, seed + 1);
    jitter_bn(discriminator.params_mut(), &mut rng);
    Draw {
        generator,
        discriminator,
        vgg: VggWeights::<f32>::random(VggConfig::reduced(16), seed + 2).cast(),
        source: random_tensor(&mut rng, [BATCH, 3, SIDE, SIDE]),
        target: random_tensor(&mut rng, [BATCH, 3, SIDE, SIDE]),
    }
}

fn objective(d: &Draw, g: &GeneratorWeights<f64>, x: &Tensor<f64>, profile: LossProfile) -> (f64, Tensor<f64>) {
    let kernel = gaussian_kernel(&GaussianKernelSpec::default()).unwrap();
    let ctx = LossContext {
        discriminator: &d.discriminator,
        vgg: Some(&d.vgg),
        kernel: &kernel,
        layer: VggLayer::RELU5_4,
        weights: LossWeights::default(),
        profile,
        color_norm: ColorNorm::Sum,
        content_norm: ContentNorm::Squared,
    };
    let y = g.forward_train(x).unwrap().0;
    let (b, grad) = generator_objective(&ctx, &y, &d.target, &mut EvalCounters::default()).unwrap();
    (b.total, grad)
}

/// Generator parameters and input pixels under the profile's total loss.
pub fn check_generator(d: &Draw, profile: LossProfile, coords: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut report = Report::default();
    let (y, tape) = d.generator.forward_train(&d.source).unwrap();
    let (_, dy) = {
        let kernel = gaussian_kernel(&GaussianKernelSpec::default()).unwrap();
        let ctx = LossContext {
            discriminator: &d.discriminator,
            vgg: Some(&d.vgg),
            kernel: &kernel,
            layer: VggLayer::RELU5_4,
            weights: LossWeights::default(),
            profile,
            color_norm: ColorNorm::Sum,
            content_norm: ContentNorm::Squared,
        };
        generator_objective(&ctx, &y, &d.target, &mut EvalCounters::default()).unwrap()
    };
    let (grads, dx) = d.generator.backward(&tape, &dy).unwrap();

    for (t, i) in pick(&mut rng, d.generator.params(), coords) {
        let numeric = central(|e| {
            let mut g = d.generator.clone();
            g.params_mut().as_mut_slice()[t].data[i] += e;
            objective(d, &g, &d.source, profile).0
        });
        let name = &d.generator.params().as_slice()[t].name;
        report.record(format!("{profile} G {name}[{i}]"), grads.tensors[t][i], numeric);
    }
    for _ in 0..2 {
        let i = rng.random_range(0..d.source.data().len());
        let numeric = central(|e| {
            let mut x = d.source.clone();
            x.data_mut()[i] += e;
            objective(d, &d.generator, &x, profile).0
        });
        report.record(format!("{profile} input[{i}]"), dx.data()[i], numeric);
    }
    report
}

/// Discriminator parameters under the real/fake cross-entropy.
pub fn check_discriminator(d: &Draw, coords: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
    let mut report = Report::default();
    let fake = gray_tensor(&d.generator.forward_train(&d.source).unwrap().0).unwrap();
    let real = gray_tensor(&d.target).unwrap();
    let out = discriminator_loss(&d.discriminator, &fake, &real, true).unwrap();
    let grads = out.grads.unwrap();
    for (t, i) in pick(&mut rng, d.discriminator.params(), coords) {
        let numeric = central(|e| {
            let mut w = d.discriminator.clone();
            w.params_mut().as_mut_slice()[t].data[i] += e;
            discriminator_loss(&w, &fake, &real, false).unwrap().loss
        });
        let name = &d.discriminator.params().as_slice()[t].name;
        report.record(format!("D {name}[{i}]"), grads.tensors[t][i], numeric);
    }
    report
}

/// Every profile over `draws` random draws.
pub fn run_all(draws: usize, coords: usize) -> Vec<(String, Report)> {
    let mut out = Vec::new();
    for (p, profile) in LossProfile::ALL.into_iter().enumerate() {
        let mut r = Report::default();
        for k in 0..draws {
            let seed = 1000 * p as u64 + k as u64;
            r.merge(check_generator(&draw(seed), profile, coords, seed));
        }
        out.push((profile.name().to_string(), r));
    }
    let mut r = Report::default();
    for k in 0..draws {
        let seed = 9000 + k as u64;
        r.merge(check_discriminator(&draw(seed), coords, seed));
    }
    out.push(("discriminator".to_string(), r));
    out
}

/// Input-gradient check of a scalar function of one tensor.
pub fn check_input(
    what: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> f64,
    coords: usize,
    seed: u64,
) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for _ in 0..coords {
        let i = rng.random_range(0..x.data().len());
        let numeric = central(|e| {
            let mut xe = x.clone();
            xe.data_mut()[i] += e;
            f(&xe)
        });
        report.record(format!("{what}[{i}]"), analytic.data()[i], numeric);
    }
    report
}
