//! Perceptual objective: color, texture, content, total-variation and MSE
//! terms, their weighted total, and the discriminator's cross-entropy.
//!
//! Every term is a mean over the batch. Functions ending in `_grad` also
//! return the gradient with respect to the first image argument.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{correlate_plane, correlate_plane_adjoint, Kernel2D, LUMA};
use crate::nets::{DiscriminatorTape, DiscriminatorWeights, Grads, VggLayer, VggWeights};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub content: f64,
    pub texture: f64,
    pub color: f64,
    pub tv: f64,
    /// Weight of the pixelwise MSE term used by the MSE profiles.
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 1.0,
            texture: 0.4,
            color: 0.1,
            tv: 400.0,
            mse: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("content", self.content),
            ("texture", self.texture),
            ("color", self.color),
            ("tv", self.tv),
            ("mse", self.mse),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Which terms drive the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossProfile {
    /// content + texture + color + tv
    Full,
    /// content + texture + tv
    ContentTexture,
    /// mse + texture + tv
    MseTexture,
    /// mse alone
    Mse,
}

impl LossProfile {
    pub const ALL: [LossProfile; 4] = [
        LossProfile::Full,
        LossProfile::ContentTexture,
        LossProfile::MseTexture,
        LossProfile::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossProfile::Full => "full",
            LossProfile::ContentTexture => "content_texture",
            LossProfile::MseTexture => "mse_texture",
            LossProfile::Mse => "mse",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossProfile::Full => "color+content+texture",
            LossProfile::ContentTexture => "content+texture",
            LossProfile::MseTexture => "mse+texture",
            LossProfile::Mse => "mse",
        }
    }

    pub fn components(self) -> Components {
        match self {
            LossProfile::Full => Components { content: true, texture: true, color: true, tv: true, mse: false },
            LossProfile::ContentTexture => Components { content: true, texture: true, color: false, tv: true, mse: false },
            LossProfile::MseTexture => Components { content: false, texture: true, color: false, tv: true, mse: true },
            LossProfile::Mse => Components { content: false, texture: false, color: false, tv: false, mse: true },
        }
    }
}

impl fmt::Display for LossProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossProfile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss profile `{s}` (full, content_texture, mse_texture, mse)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub content: bool,
    pub texture: bool,
    pub color: bool,
    pub tv: bool,
    pub mse: bool,
}

/// Normalization of the color term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorNorm {
    /// Sum of squared differences per image.
    #[default]
    Sum,
    /// Mean over the `3 * H * W` values of each image.
    PerPixel,
}

/// Norm applied to the feature (content) distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentNorm {
    #[default]
    Squared,
    Plain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub content: f64,
    pub texture: f64,
    pub color: f64,
    pub tv: f64,
    pub mse: f64,
}

/// Raw component values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub content: f64,
    pub texture: f64,
    pub color: f64,
    pub tv: f64,
    pub mse: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("content", parts.content),
        ("texture", parts.texture),
        ("color", parts.color),
        ("tv", parts.tv),
        ("mse", parts.mse),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(format!("{name} = {v}")));
        }
    }
    let total = weights.content * parts.content
        + weights.texture * parts.texture
        + weights.color * parts.color
        + weights.tv * parts.tv
        + weights.mse * parts.mse;
    Ok(LossBreakdown {
        total,
        content: parts.content,
        texture: parts.texture,
        color: parts.color,
        tv: parts.tv,
        mse: parts.mse,
    })
}

fn same_shape<T: Real>(x: &Tensor<T>, y: &Tensor<T>, what: &str) -> Result<()> {
    x.ensure_shape(y, what)?;
    if x.batch() == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

fn blur_diff<T: Real>(x: &Tensor<T>, y: &Tensor<T>, kernel: &Kernel2D) -> Result<Tensor<T>> {
    same_shape(x, y, "color loss")?;
    let [_, _, h, w] = x.shape();
    if kernel.side() > h.min(w) {
        return Err(Error::KernelTooLarge {
            side: kernel.side(),
            height: h,
            width: w,
        });
    }
    // Blurring is linear, so blur(x) - blur(y) = blur(x - y).
    let mut diff = x.clone();
    for (d, &b) in diff.data_mut().iter_mut().zip(y.data()) {
        *d -= b;
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in diff.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        correlate_plane(src, h, w, kernel, dst);
    }
    Ok(out)
}

fn color_scale<T: Real>(x: &Tensor<T>, norm: ColorNorm) -> f64 {
    let per_item = match norm {
        ColorNorm::Sum => 1.0,
        ColorNorm::PerPixel => 1.0 / x.item_len() as f64,
    };
    per_item / x.batch() as f64
}

/// Squared distance between blurred images.
pub fn color_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>, kernel: &Kernel2D, norm: ColorNorm) -> Result<f64> {
    let d = blur_diff(x, y, kernel)?;
    let ssd: f64 = d.data().iter().map(|v| v.f64() * v.f64()).sum();
    Ok(ssd * color_scale(x, norm))
}

pub fn color_loss_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kernel: &Kernel2D,
    norm: ColorNorm,
) -> Result<(f64, Tensor<T>)> {
    let d = blur_diff(x, y, kernel)?;
    let s = color_scale(x, norm);
    let ssd: f64 = d.data().iter().map(|v| v.f64() * v.f64()).sum();
    let [_, _, h, w] = x.shape();
    let mut g = Tensor::zeros(x.shape());
    let two_s = T::of(2.0 * s);
    for (src, acc) in d.data().chunks(h * w).zip(g.data_mut().chunks_mut(h * w)) {
        let scaled: Vec<T> = src.iter().map(|&v| v * two_s).collect();
        correlate_plane_adjoint(&scaled, h, w, kernel, acc);
    }
    Ok((ssd * s, g))
}

/// Mean squared error over every value of the batch.
pub fn mse_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y, "mse loss")?;
    let n = x.data().len() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a - b).f64().powi(2)).sum::<f64>() / n)
}

pub fn mse_loss_grad<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let v = mse_loss(x, y)?;
    let k = T::of(2.0 / x.data().len() as f64);
    let mut g = x.clone();
    for (a, &b) in g.data_mut().iter_mut().zip(y.data()) {
        *a = (*a - b) * k;
    }
    Ok((v, g))
}

fn tv_check<T: Real>(x: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = x.shape();
    if n == 0 || h < 2 || w < 2 {
        return Err(Error::Shape(format!("tv loss needs H, W >= 2, got {:?}", x.shape())));
    }
    Ok(())
}

/// Anisotropic squared total variation, normalized by `C * H * W`.
pub fn tv_loss<T: Real>(x: &Tensor<T>) -> Result<f64> {
    Ok(tv_loss_impl(x, false)?.0)
}

pub fn tv_loss_grad<T: Real>(x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (v, g) = tv_loss_impl(x, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn tv_loss_impl<T: Real>(x: &Tensor<T>, want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    tv_check(x)?;
    let [n, _, h, w] = x.shape();
    let scale = 1.0 / (x.item_len() as f64 * n as f64);
    let mut total = 0.0;
    let mut g = want_grad.then(|| Tensor::zeros(x.shape()));
    let k = T::of(2.0 * scale);
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        for r in 0..h {
            for c in 0..w {
                let v = plane[r * w + c];
                if c + 1 < w {
                    let d = plane[r * w + c + 1] - v;
                    total += d.f64() * d.f64();
                    if let Some(g) = g.as_mut() {
                        let gp = &mut g.data_mut()[pi * h * w..(pi + 1) * h * w];
                        gp[r * w + c + 1] += k * d;
                        gp[r * w + c] -= k * d;
                    }
                }
                if r + 1 < h {
                    let d = plane[(r + 1) * w + c] - v;
                    total += d.f64() * d.f64();
                    if let Some(g) = g.as_mut() {
                        let gp = &mut g.data_mut()[pi * h * w..(pi + 1) * h * w];
                        gp[(r + 1) * w + c] += k * d;
                        gp[r * w + c] -= k * d;
                    }
                }
            }
        }
    }
    Ok((total * scale, g))
}

/// Luma of an `N x 3 x H x W` batch as `N x 1 x H x W`.
pub fn gray_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let l = LUMA.map(|v| T::of(v as f64));
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for p in 0..plane {
            dst[p] = l[0] * src[p] + l[1] * src[plane + p] + l[2] * src[2 * plane + p];
        }
    }
    Ok(out)
}

/// Adjoint of [`gray_tensor`].
pub fn gray_tensor_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = g.shape();
    let plane = h * w;
    let l = LUMA.map(|v| T::of(v as f64));
    let mut out = Tensor::zeros([n, 3, h, w]);
    for i in 0..n {
        let src = g.item(i);
        let dst = out.item_mut(i);
        for c in 0..3 {
            for p in 0..plane {
                dst[c * plane + p] = l[c] * src[p];
            }
        }
    }
    out
}

fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let lo = T::of(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// `-mean log D(x)` for grayscale inputs; D runs in training mode.
pub fn texture_loss<T: Real>(d: &DiscriminatorWeights<T>, gray: &Tensor<T>) -> Result<f64> {
    let (p, _) = d.forward_train(gray)?;
    Ok(texture_from_probs(&p))
}

fn texture_from_probs<T: Real>(p: &[T]) -> f64 {
    -p.iter().map(|&v| clamp_prob(v).0.f64().ln()).sum::<f64>() / p.len() as f64
}

/// Texture loss and its gradient with respect to the grayscale input.
pub fn texture_loss_grad<T: Real>(d: &DiscriminatorWeights<T>, gray: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (p, tape) = d.forward_train(gray)?;
    let n = T::of(p.len() as f64);
    let dp: Vec<T> = p
        .iter()
        .map(|&v| {
            let (c, clamped) = clamp_prob(v);
            if clamped {
                T::zero()
            } else {
                -T::one() / (n * c)
            }
        })
        .collect();
    let (_, dx) = d.backward(&tape, &dp)?;
    Ok((texture_from_probs(&p), dx))
}

/// Cross-entropy of the discriminator, real labelled 1 and fake 0, averaged
/// over all `2N` items. Fake and real items share one forward pass.
pub struct DiscriminatorLoss<T> {
    pub loss: f64,
    /// Fraction of the `2N` items classified correctly at threshold 0.5.
    pub accuracy: f64,
    pub grads: Option<Grads<T>>,
    /// Batch statistics of the forward pass, for running-stat updates.
    pub tape: Option<DiscriminatorTape<T>>,
}

fn stack<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = a.shape();
    let mut data = Vec::with_capacity(a.data().len() * 2);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec([2 * n, c, h, w], data)
}

pub fn discriminator_loss<T: Real>(
    d: &DiscriminatorWeights<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    want_grads: bool,
) -> Result<DiscriminatorLoss<T>> {
    same_shape(fake, real, "discriminator loss")?;
    let n = fake.batch();
    let (p, tape) = d.forward_train(&stack(fake, real)?)?;
    let mut out = discriminator_from_probs(d, &p, n, want_grads.then_some(&tape))?;
    out.tape = Some(tape);
    Ok(out)
}

fn discriminator_from_probs<T: Real>(
    d: &DiscriminatorWeights<T>,
    p: &[T],
    n: usize,
    tape: Option<&DiscriminatorTape<T>>,
) -> Result<DiscriminatorLoss<T>> {
    let m = (2 * n) as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut dp = Vec::with_capacity(2 * n);
    for (i, &v) in p.iter().enumerate() {
        let real = i >= n;
        let (c, clamped) = clamp_prob(v);
        if real {
            loss -= c.f64().ln();
            dp.push(if clamped { T::zero() } else { -T::one() / (T::of(m) * c) });
            correct += usize::from(v > T::of(0.5));
        } else {
            loss -= (T::one() - c).f64().ln();
            dp.push(if clamped { T::zero() } else { T::one() / (T::of(m) * (T::one() - c)) });
            correct += usize::from(v < T::of(0.5));
        }
    }
    let grads = match tape {
        Some(t) => Some(d.backward(t, &dp)?.0),
        None => None,
    };
    Ok(DiscriminatorLoss {
        loss: loss / m,
        accuracy: correct as f64 / m,
        grads,
        tape: None,
    })
}

/// `(1 / (C H W)) * ||psi(x) - psi(y)||^2` at the given VGG stage.
pub fn content_loss<T: Real>(
    vgg: &VggWeights<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    layer: VggLayer,
    norm: ContentNorm,
) -> Result<f64> {
    same_shape(x, y, "content loss")?;
    let fx = vgg.features(x, layer)?;
    let fy = vgg.features(y, layer)?;
    Ok(content_from_features(&fx, &fy, norm).0)
}

pub fn content_loss_grad<T: Real>(
    vgg: &VggWeights<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    layer: VggLayer,
    norm: ContentNorm,
) -> Result<(f64, Tensor<T>)> {
    same_shape(x, y, "content loss")?;
    let (fx, tape) = vgg.features_with_tape(x, layer)?;
    let fy = vgg.features(y, layer)?;
    let (v, df) = content_from_features(&fx, &fy, norm);
    Ok((v, vgg.input_grad(&tape, &df)?))
}

fn content_from_features<T: Real>(fx: &Tensor<T>, fy: &Tensor<T>, norm: ContentNorm) -> (f64, Tensor<T>) {
    let n = fx.batch();
    let chw = fx.item_len() as f64;
    let mut total = 0.0;
    let mut g = Tensor::zeros(fx.shape());
    for i in 0..n {
        let (a, b) = (fx.item(i), fy.item(i));
        let ssd: f64 = a.iter().zip(b).map(|(&p, &q)| (p - q).f64().powi(2)).sum();
        let (v, k) = match norm {
            ContentNorm::Squared => (ssd / chw, 2.0 / (chw * n as f64)),
            ContentNorm::Plain => {
                let r = ssd.sqrt();
                (r / chw, if r > 0.0 { 1.0 / (r * chw * n as f64) } else { 0.0 })
            }
        };
        total += v;
        let k = T::of(k);
        for ((d, &p), &q) in g.item_mut(i).iter_mut().zip(a).zip(b) {
            *d = (p - q) * k;
        }
    }
    (total / n as f64, g)
}

/// Everything the generator objective needs besides the images.
pub struct LossContext<'a, T> {
    pub discriminator: &'a DiscriminatorWeights<T>,
    pub vgg: Option<&'a VggWeights<T>>,
    pub kernel: &'a Kernel2D,
    pub layer: VggLayer,
    pub weights: LossWeights,
    pub profile: LossProfile,
    pub color_norm: ColorNorm,
    pub content_norm: ContentNorm,
}

/// Number of times each term has been computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounters {
    pub content: u64,
    pub texture: u64,
    pub color: u64,
    pub tv: u64,
    pub mse: u64,
}

/// Weighted objective of the selected profile and its gradient with
/// respect to the enhanced batch. Disabled terms are never computed and
/// report zero.
pub fn generator_objective<T: Real>(
    ctx: &LossContext<'_, T>,
    enhanced: &Tensor<T>,
    target: &Tensor<T>,
    counters: &mut EvalCounters,
) -> Result<(LossBreakdown, Tensor<T>)> {
    same_shape(enhanced, target, "generator objective")?;
    let on = ctx.profile.components();
    let w = ctx.weights;
    let mut parts = LossParts::default();
    let mut grad = Tensor::zeros(enhanced.shape());
    let mut accumulate = |g: &Tensor<T>, weight: f64| {
        let k = T::of(weight);
        for (a, &b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += k * b;
        }
    };
    if on.content {
        let vgg = ctx
            .vgg
            .ok_or_else(|| Error::Config(format!("profile `{}` needs VGG-19 weights", ctx.profile)))?;
        counters.content += 1;
        let (v, g) = content_loss_grad(vgg, enhanced, target, ctx.layer, ctx.content_norm)?;
        parts.content = v;
        accumulate(&g, w.content);
    }
    if on.mse {
        counters.mse += 1;
        let (v, g) = mse_loss_grad(enhanced, target)?;
        parts.mse = v;
        accumulate(&g, w.mse);
    }
    if on.color {
        counters.color += 1;
        let (v, g) = color_loss_grad(enhanced, target, ctx.kernel, ctx.color_norm)?;
        parts.color = v;
        accumulate(&g, w.color);
    }
    if on.tv {
        counters.tv += 1;
        let (v, g) = tv_loss_grad(enhanced)?;
        parts.tv = v;
        accumulate(&g, w.tv);
    }
    if on.texture {
        counters.texture += 1;
        let (v, g) = texture_loss_grad(ctx.discriminator, &gray_tensor(enhanced)?)?;
        parts.texture = v;
        accumulate(&gray_tensor_adjoint(&g), w.texture);
    }
    let breakdown = total_loss(&parts, &masked(w, on))?;
    Ok((breakdown, grad))
}

fn masked(w: LossWeights, on: Components) -> LossWeights {
    let pick = |flag: bool, v: f64| if flag { v } else { 0.0 };
    LossWeights {
        content: pick(on.content, w.content),
        texture: pick(on.texture, w.texture),
        color: pick(on.color, w.color),
        tv: pick(on.tv, w.tv),
        mse: pick(on.mse, w.mse),
    }
}
