//! Residual image-transformation network: a 9x9 input convolution, four
//! residual blocks of two batch-normalized 3x3 convolutions, two more 3x3
//! convolutions and a 9x9 output convolution with a scaled tanh. Every
//! convolution has stride 1 and reflection same-padding, so the network is
//! fully convolutional.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{self, NamedTensor};
use super::layers::{self, BnCache, Conv, Padding};
use super::params::{Grads, Param, ParamKind, ParamSet, Stamp};
use super::{he_init, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const KIND: &str = "generator";
pub const MIN_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    /// `scale * tanh(x) + offset`, clamped to `[0, 1]`.
    ScaledTanh { scale: f64, offset: f64 },
    /// `x` clamped to `[0, 1]`.
    Clamp,
}

impl Default for OutputActivation {
    fn default() -> Self {
        OutputActivation::ScaledTanh {
            scale: 0.58,
            offset: 0.5,
        }
    }
}

impl OutputActivation {
    fn apply(&self, z: f64) -> f64 {
        match *self {
            OutputActivation::ScaledTanh { scale, offset } => scale * z.tanh() + offset,
            OutputActivation::Clamp => z,
        }
    }

    fn apply_t<T: Real>(&self, z: T) -> T {
        let v = match *self {
            OutputActivation::ScaledTanh { scale, offset } => T::of(scale) * z.tanh() + T::of(offset),
            OutputActivation::Clamp => z,
        };
        v.max(T::zero()).min(T::one())
    }

    /// Derivative, zero where the clamp is active.
    fn derivative<T: Real>(&self, z: T) -> T {
        let pre = T::of(self.apply(z.f64()));
        if pre < T::zero() || pre > T::one() {
            return T::zero();
        }
        match *self {
            OutputActivation::ScaledTanh { scale, .. } => {
                let t = z.tanh();
                T::of(scale) * (T::one() - t * t)
            }
            OutputActivation::Clamp => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub blocks: usize,
    pub activation: OutputActivation,
    pub bn_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: 64,
            blocks: 4,
            activation: OutputActivation::default(),
            bn_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    pub fn with_channels(channels: usize) -> Self {
        GeneratorConfig {
            channels,
            ..Default::default()
        }
    }

    fn conv_in(&self) -> Conv {
        Conv::same(3, self.channels, 9, 1, Padding::Reflect)
    }

    fn conv_mid(&self) -> Conv {
        Conv::same(self.channels, self.channels, 3, 1, Padding::Reflect)
    }

    fn conv_out(&self) -> Conv {
        Conv::same(self.channels, 3, 9, 1, Padding::Reflect)
    }

    /// Names, shapes and kinds of every stored tensor, in container order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let c = self.channels;
        let mut out = Vec::new();
        let conv = |name: &str, conv: Conv, out: &mut Vec<_>| {
            out.push((format!("{name}.weight"), conv.weight_shape(), ParamKind::Trainable));
            out.push((format!("{name}.bias"), vec![conv.out_c], ParamKind::Trainable));
        };
        conv("conv_in", self.conv_in(), &mut out);
        for b in 0..self.blocks {
            for half in ["a", "b"] {
                conv(&format!("block{b}.conv_{half}"), self.conv_mid(), &mut out);
                let bn = format!("block{b}.bn_{half}");
                out.push((format!("{bn}.gamma"), vec![c], ParamKind::Trainable));
                out.push((format!("{bn}.beta"), vec![c], ParamKind::Trainable));
                out.push((format!("{bn}.running_mean"), vec![c], ParamKind::RunningStat));
                out.push((format!("{bn}.running_var"), vec![c], ParamKind::RunningStat));
            }
        }
        conv("conv_p1", self.conv_mid(), &mut out);
        conv("conv_p2", self.conv_mid(), &mut out);
        conv("conv_out", self.conv_out(), &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
}

struct BlockTape<T> {
    h_in: Tensor<T>,
    bn_a: BnCache<T>,
    r_a: Tensor<T>,
    bn_b: BnCache<T>,
    r_b: Tensor<T>,
}

/// Intermediates of a training-mode forward pass.
pub struct GeneratorTape<T> {
    stamp: Stamp,
    input: Tensor<T>,
    a_in: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    h_out: Tensor<T>,
    p1: Tensor<T>,
    p2: Tensor<T>,
    z: Tensor<T>,
}

impl<T: Real> GeneratorWeights<T> {
    /// He-scaled truncated-normal convolutions, zero biases, identity
    /// batch-norm. Deterministic in `seed`.
    pub fn init(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, kind)| {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".weight") {
                    let fan_in = shape[1] * shape[2] * shape[3];
                    he_init(&mut rng, len, fan_in)
                } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                    vec![1.0; len]
                } else {
                    vec![0.0; len]
                };
                Param {
                    name,
                    shape,
                    data: data.into_iter().map(T::of).collect(),
                    kind,
                }
            })
            .collect();
        GeneratorWeights {
            config,
            params: ParamSet::new(params),
        }
    }

    /// All weights and biases zero, batch-norm at identity.
    pub fn zeros(config: GeneratorConfig) -> Self {
        let mut g = Self::init(config, 0);
        for p in g.params.as_mut_slice() {
            if p.name.ends_with(".weight") {
                p.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        g
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn cast<U: Real>(&self) -> GeneratorWeights<U> {
        GeneratorWeights {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "generator needs N x 3 x H x W with H, W >= {MIN_SIDE}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn conv(&self, name: &str, conv: &Conv, x: &Tensor<T>) -> Tensor<T> {
        layers::conv_forward(
            conv,
            self.params.get(&format!("{name}.weight")),
            self.params.get(&format!("{name}.bias")),
            x,
        )
    }

    fn bn_infer(&self, name: &str, x: &Tensor<T>) -> Tensor<T> {
        layers::bn_forward_infer(
            x,
            self.params.get(&format!("{name}.gamma")),
            self.params.get(&format!("{name}.beta")),
            self.params.get(&format!("{name}.running_mean")),
            self.params.get(&format!("{name}.running_var")),
            T::of(self.config.bn_eps),
        )
    }

    fn bn_train(&self, name: &str, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        layers::bn_forward_train(
            x,
            self.params.get(&format!("{name}.gamma")),
            self.params.get(&format!("{name}.beta")),
            T::of(self.config.bn_eps),
        )
    }

    fn activate(&self, z: &Tensor<T>) -> Tensor<T> {
        let act = self.config.activation;
        z.map(|v| act.apply_t(v))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.0),
            Mode::Infer => self.forward_infer(x),
        }
    }

    /// Inference with running batch-norm statistics. Items are processed
    /// independently, so results do not depend on batch composition.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (cin, cmid, cout) = (self.config.conv_in(), self.config.conv_mid(), self.config.conv_out());
        let mut out = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let xi = x.select(&[n]);
            let mut h = self.conv("conv_in", &cin, &xi);
            layers::relu_inplace(&mut h);
            for b in 0..self.config.blocks {
                let mut r = self.bn_infer(&format!("block{b}.bn_a"), &self.conv(&format!("block{b}.conv_a"), &cmid, &h));
                layers::relu_inplace(&mut r);
                let mut r2 = self.bn_infer(&format!("block{b}.bn_b"), &self.conv(&format!("block{b}.conv_b"), &cmid, &r));
                layers::relu_inplace(&mut r2);
                h.add_assign(&r2);
            }
            let mut p = self.conv("conv_p1", &cmid, &h);
            layers::relu_inplace(&mut p);
            let mut p2 = self.conv("conv_p2", &cmid, &p);
            layers::relu_inplace(&mut p2);
            let z = self.conv("conv_out", &cout, &p2);
            out.item_mut(n).copy_from_slice(self.activate(&z).data());
        }
        Ok(out)
    }

    /// Training-mode forward (batch statistics) recording a tape.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GeneratorTape<T>)> {
        self.check_input(x)?;
        let (cin, cmid, cout) = (self.config.conv_in(), self.config.conv_mid(), self.config.conv_out());
        let mut a_in = self.conv("conv_in", &cin, x);
        layers::relu_inplace(&mut a_in);
        let mut h = a_in.clone();
        let mut blocks = Vec::with_capacity(self.config.blocks);
        for b in 0..self.config.blocks {
            let (mut r_a, bn_a) = self.bn_train(&format!("block{b}.bn_a"), &self.conv(&format!("block{b}.conv_a"), &cmid, &h));
            layers::relu_inplace(&mut r_a);
            let (mut r_b, bn_b) = self.bn_train(&format!("block{b}.bn_b"), &self.conv(&format!("block{b}.conv_b"), &cmid, &r_a));
            layers::relu_inplace(&mut r_b);
            let mut next = h.clone();
            next.add_assign(&r_b);
            blocks.push(BlockTape {
                h_in: std::mem::replace(&mut h, next),
                bn_a,
                r_a,
                bn_b,
                r_b,
            });
        }
        let mut p1 = self.conv("conv_p1", &cmid, &h);
        layers::relu_inplace(&mut p1);
        let mut p2 = self.conv("conv_p2", &cmid, &p1);
        layers::relu_inplace(&mut p2);
        let z = self.conv("conv_out", &cout, &p2);
        let y = self.activate(&z);
        let tape = GeneratorTape {
            stamp: self.params.stamp(),
            input: x.clone(),
            a_in,
            blocks,
            h_out: h,
            p1,
            p2,
            z,
        };
        Ok((y, tape))
    }

    fn conv_back(
        &self,
        grads: &mut Grads<T>,
        name: &str,
        conv: &Conv,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let wname = format!("{name}.weight");
        let g = layers::conv_backward(conv, self.params.get(&wname), x, dy, true, want_input);
        grads.set(self.params.index_of(&wname), g.dw);
        grads.set(self.params.index_of(&format!("{name}.bias")), g.db);
        g.dx
    }

    fn bn_back(&self, grads: &mut Grads<T>, name: &str, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let gname = format!("{name}.gamma");
        let (dx, dg, db) = layers::bn_backward(cache, self.params.get(&gname), dy);
        grads.set(self.params.index_of(&gname), dg);
        grads.set(self.params.index_of(&format!("{name}.beta")), db);
        dx
    }

    /// Exact reverse-mode gradients of `sum(dy * output)` with respect to
    /// every trainable tensor and the input.
    pub fn backward(&self, tape: &GeneratorTape<T>, dy: &Tensor<T>) -> Result<(Grads<T>, Tensor<T>)> {
        let (grads, dx) = self.backward_inner(tape, dy, true)?;
        Ok((grads, dx.expect("input gradient requested")))
    }

    /// Parameter gradients only; skips the input gradient.
    pub fn backward_params(&self, tape: &GeneratorTape<T>, dy: &Tensor<T>) -> Result<Grads<T>> {
        Ok(self.backward_inner(tape, dy, false)?.0)
    }

    fn backward_inner(
        &self,
        tape: &GeneratorTape<T>,
        dy: &Tensor<T>,
        want_input: bool,
    ) -> Result<(Grads<T>, Option<Tensor<T>>)> {
        self.params.check_stamp(tape.stamp)?;
        if dy.shape() != tape.z.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                dy.shape(),
                tape.z.shape()
            )));
        }
        let (cin, cmid, cout) = (self.config.conv_in(), self.config.conv_mid(), self.config.conv_out());
        let act = self.config.activation;
        let mut grads = self.params.zero_grads();

        let mut dz = dy.clone();
        for (d, &z) in dz.data_mut().iter_mut().zip(tape.z.data()) {
            *d *= act.derivative(z);
        }
        let dp2 = self.conv_back(&mut grads, "conv_out", &cout, &tape.p2, &dz, true).unwrap();
        let dp2 = layers::relu_backward(&tape.p2, &dp2);
        let dp1 = self.conv_back(&mut grads, "conv_p2", &cmid, &tape.p1, &dp2, true).unwrap();
        let dp1 = layers::relu_backward(&tape.p1, &dp1);
        let mut dh = self.conv_back(&mut grads, "conv_p1", &cmid, &tape.h_out, &dp1, true).unwrap();

        for (b, bt) in tape.blocks.iter().enumerate().rev() {
            let d_rb = layers::relu_backward(&bt.r_b, &dh);
            let d_zb = self.bn_back(&mut grads, &format!("block{b}.bn_b"), &bt.bn_b, &d_rb);
            let d_ra = self
                .conv_back(&mut grads, &format!("block{b}.conv_b"), &cmid, &bt.r_a, &d_zb, true)
                .unwrap();
            let d_ra = layers::relu_backward(&bt.r_a, &d_ra);
            let d_za = self.bn_back(&mut grads, &format!("block{b}.bn_a"), &bt.bn_a, &d_ra);
            let d_h = self
                .conv_back(&mut grads, &format!("block{b}.conv_a"), &cmid, &bt.h_in, &d_za, true)
                .unwrap();
            dh.add_assign(&d_h);
        }
        let da = layers::relu_backward(&tape.a_in, &dh);
        let dx = self.conv_back(&mut grads, "conv_in", &cin, &tape.input, &da, want_input);
        Ok((grads, dx))
    }

    /// Folds the tape's batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, tape: &GeneratorTape<T>, momentum: f64) -> Result<()> {
        self.params.check_stamp(tape.stamp)?;
        let m = T::of(momentum);
        let updates: Vec<(String, &BnCache<T>)> = tape
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(b, bt)| [(format!("block{b}.bn_a"), &bt.bn_a), (format!("block{b}.bn_b"), &bt.bn_b)])
            .collect();
        for (name, cache) in updates {
            blend(self.params.get_mut(&format!("{name}.running_mean")), &cache.mean, m);
            blend(self.params.get_mut(&format!("{name}.running_var")), &cache.var, m);
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.f64() as f32).collect(),
            })
            .collect()
    }

    pub fn from_container(c: &container::Container) -> Result<Self> {
        if c.network_kind != KIND {
            return Err(Error::Schema(format!(
                "expected a {KIND} container, found {}",
                c.network_kind
            )));
        }
        let config: GeneratorConfig = serde_json::from_value(c.arch.clone())
            .map_err(|e| Error::Schema(format!("generator arch: {e}")))?;
        let layout = config.layout();
        let expected: Vec<(String, Vec<usize>)> =
            layout.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        let data = container::expect_tensors(c, KIND, &expected)?;
        let params = layout
            .into_iter()
            .zip(data)
            .map(|((name, shape, kind), d)| Param {
                name,
                shape,
                data: d.into_iter().map(|v| T::of(v as f64)).collect(),
                kind,
            })
            .collect();
        let g = GeneratorWeights {
            config,
            params: ParamSet::new(params),
        };
        if !g.params.all_finite() {
            return Err(Error::Schema("generator weights contain non-finite values".into()));
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let arch = serde_json::to_value(&self.config).expect("config serializes");
        container::write(path, KIND, arch, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&container::read(path)?)
    }
}

pub(crate) fn blend<T: Real>(running: &mut [T], batch: &[T], momentum: T) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - momentum) * *r + momentum * b;
    }
}

impl GeneratorWeights<f32> {
    /// A network whose output equals its input (up to rounding): the input
    /// is carried through dedicated channels by centre-tap identity kernels,
    /// the residual blocks are zeroed and the output activation is a clamp.
    pub fn identity(channels: usize) -> Self {
        assert!(channels >= 3, "identity needs at least 3 channels");
        let config = GeneratorConfig {
            channels,
            activation: OutputActivation::Clamp,
            ..Default::default()
        };
        let mut g = Self::zeros(config);
        let set_identity = |data: &mut [f32], shape: &[usize]| {
            let (inc, k) = (shape[1], shape[2]);
            for c in 0..3 {
                data[((c * inc + c) * k + k / 2) * k + k / 2] = 1.0;
            }
        };
        for p in g.params.as_mut_slice() {
            if ["conv_in.weight", "conv_p1.weight", "conv_p2.weight", "conv_out.weight"].contains(&p.name.as_str()) {
                set_identity(&mut p.data, &p.shape.clone());
            }
        }
        g
    }
}
