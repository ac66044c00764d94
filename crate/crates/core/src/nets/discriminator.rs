//! Grayscale adversarial discriminator: five strided convolutions, each
//! followed by LeakyReLU and (from the second on) batch-norm, then a
//! 1024-unit fully-connected layer and a sigmoid output unit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{self, NamedTensor};
use super::generator::blend;
use super::layers::{self, BnCache, Conv, Padding};
use super::params::{Grads, Param, ParamKind, ParamSet, Stamp};
use super::{he_init, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const KIND: &str = "discriminator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: [usize; 5],
    pub kernels: [usize; 5],
    pub strides: [usize; 5],
    pub fc_units: usize,
    pub input_side: usize,
    pub slope: f64,
    pub bn_eps: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: [48, 128, 192, 192, 128],
            kernels: [11, 5, 3, 3, 3],
            strides: [4, 2, 1, 1, 2],
            fc_units: 1024,
            input_side: 100,
            slope: 0.2,
            bn_eps: 1e-5,
        }
    }
}

impl DiscriminatorConfig {
    /// Same topology with every width divided by `divisor` (at least 1).
    pub fn reduced(divisor: usize) -> Self {
        let d = Self::default();
        DiscriminatorConfig {
            channels: d.channels.map(|c| (c / divisor).max(1)),
            fc_units: (d.fc_units / divisor).max(1),
            ..d
        }
    }

    pub fn convs(&self) -> [Conv; 5] {
        let mut in_c = 1;
        std::array::from_fn(|i| {
            let c = Conv::same(in_c, self.channels[i], self.kernels[i], self.strides[i], Padding::Zero);
            in_c = self.channels[i];
            c
        })
    }

    /// Spatial side after the last convolution.
    pub fn final_side(&self) -> usize {
        self.convs().iter().fold(self.input_side, |s, c| c.out_len(s))
    }

    pub fn flat_len(&self) -> usize {
        let s = self.final_side();
        self.channels[4] * s * s
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs().iter().enumerate() {
            let name = format!("conv{}", i + 1);
            out.push((format!("{name}.weight"), conv.weight_shape(), ParamKind::Trainable));
            out.push((format!("{name}.bias"), vec![conv.out_c], ParamKind::Trainable));
            if i > 0 {
                let bn = format!("bn{}", i + 1);
                let c = conv.out_c;
                out.push((format!("{bn}.gamma"), vec![c], ParamKind::Trainable));
                out.push((format!("{bn}.beta"), vec![c], ParamKind::Trainable));
                out.push((format!("{bn}.running_mean"), vec![c], ParamKind::RunningStat));
                out.push((format!("{bn}.running_var"), vec![c], ParamKind::RunningStat));
            }
        }
        out.push(("fc1.weight".into(), vec![self.fc_units, self.flat_len()], ParamKind::Trainable));
        out.push(("fc1.bias".into(), vec![self.fc_units], ParamKind::Trainable));
        out.push(("fc2.weight".into(), vec![1, self.fc_units], ParamKind::Trainable));
        out.push(("fc2.bias".into(), vec![1], ParamKind::Trainable));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorWeights<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
}

struct ConvTape<T> {
    x: Tensor<T>,
    z: Tensor<T>,
    bn: Option<BnCache<T>>,
}

pub struct DiscriminatorTape<T> {
    stamp: Stamp,
    convs: Vec<ConvTape<T>>,
    flat: Vec<T>,
    h1: Vec<T>,
    prob: Vec<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> DiscriminatorWeights<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, kind)| {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
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
        DiscriminatorWeights {
            config,
            params: ParamSet::new(params),
        }
    }

    pub fn zeros(config: DiscriminatorConfig) -> Self {
        let mut d = Self::init(config, 0);
        for p in d.params.as_mut_slice() {
            if p.name.ends_with(".weight") {
                p.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        d
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn cast<U: Real>(&self) -> DiscriminatorWeights<U> {
        DiscriminatorWeights {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_side;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "discriminator needs N x 1 x {s} x {s}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Probabilities that each item comes from the target camera.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.0),
            Mode::Infer => {
                self.check_input(x)?;
                Ok(self.run(x, Mode::Infer).prob)
            }
        }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Vec<T>, DiscriminatorTape<T>)> {
        self.check_input(x)?;
        let tape = self.run(x, Mode::Train);
        Ok((tape.prob.clone(), tape))
    }

    fn run(&self, x: &Tensor<T>, mode: Mode) -> DiscriminatorTape<T> {
        let slope = T::of(self.config.slope);
        let eps = T::of(self.config.bn_eps);
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(5);
        for (i, conv) in self.config.convs().iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let z = layers::conv_forward(
                conv,
                self.params.get(&format!("{name}.weight")),
                self.params.get(&format!("{name}.bias")),
                &h,
            );
            let a = layers::leaky_relu(&z, slope);
            let (out, bn) = if i == 0 {
                (a, None)
            } else {
                let bn = format!("bn{}", i + 1);
                let gamma = self.params.get(&format!("{bn}.gamma"));
                let beta = self.params.get(&format!("{bn}.beta"));
                match mode {
                    Mode::Train => {
                        let (y, cache) = layers::bn_forward_train(&a, gamma, beta, eps);
                        (y, Some(cache))
                    }
                    Mode::Infer => (
                        layers::bn_forward_infer(
                            &a,
                            gamma,
                            beta,
                            self.params.get(&format!("{bn}.running_mean")),
                            self.params.get(&format!("{bn}.running_var")),
                            eps,
                        ),
                        None,
                    ),
                }
            };
            convs.push(ConvTape {
                x: std::mem::replace(&mut h, out),
                z,
                bn,
            });
        }
        let n = x.batch();
        let flat = h.into_vec();
        let inp = self.config.flat_len();
        let fc = self.config.fc_units;
        let z1 = layers::linear_forward(&flat, n, inp, self.params.get("fc1.weight"), self.params.get("fc1.bias"));
        let h1: Vec<T> = z1.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let logits = layers::linear_forward(&h1, n, fc, self.params.get("fc2.weight"), self.params.get("fc2.bias"));
        DiscriminatorTape {
            stamp: self.params.stamp(),
            convs,
            flat,
            h1,
            prob: logits.into_iter().map(sigmoid).collect(),
        }
    }

    /// Gradients of `sum(dprob * prob)` with respect to every trainable
    /// tensor and the input.
    pub fn backward(&self, tape: &DiscriminatorTape<T>, dprob: &[T]) -> Result<(Grads<T>, Tensor<T>)> {
        self.params.check_stamp(tape.stamp)?;
        if tape.convs[0].bn.is_some() || tape.convs[1].bn.is_none() {
            return Err(Error::StaleTape("discriminator tape was not recorded in train mode".into()));
        }
        let n = tape.prob.len();
        if dprob.len() != n {
            return Err(Error::Shape(format!("{} upstream gradients for {n} outputs", dprob.len())));
        }
        let slope = T::of(self.config.slope);
        let fc = self.config.fc_units;
        let inp = self.config.flat_len();
        let mut grads = self.params.zero_grads();

        let dlogit: Vec<T> = dprob.iter().zip(&tape.prob).map(|(&d, &p)| d * p * (T::one() - p)).collect();
        let (dh1, dw2, db2) = layers::linear_backward(&tape.h1, n, fc, self.params.get("fc2.weight"), &dlogit, 1);
        grads.set(self.params.index_of("fc2.weight"), dw2);
        grads.set(self.params.index_of("fc2.bias"), db2);
        // h1 > 0 exactly where its pre-activation is positive.
        let dz1: Vec<T> = dh1
            .iter()
            .zip(&tape.h1)
            .map(|(&d, &h)| if h > T::zero() { d } else { d * slope })
            .collect();
        let (dflat, dw1, db1) = layers::linear_backward(&tape.flat, n, inp, self.params.get("fc1.weight"), &dz1, fc);
        grads.set(self.params.index_of("fc1.weight"), dw1);
        grads.set(self.params.index_of("fc1.bias"), db1);

        let last = &tape.convs[4];
        let s = self.config.final_side();
        let mut dh = Tensor::from_vec([n, self.config.channels[4], s, s], dflat)?;
        debug_assert_eq!(dh.shape(), last.z.shape());
        let convs = self.config.convs();
        for (i, ct) in tape.convs.iter().enumerate().rev() {
            let da = match &ct.bn {
                Some(cache) => {
                    let bn = format!("bn{}", i + 1);
                    let gname = format!("{bn}.gamma");
                    let (dx, dg, db) = layers::bn_backward(cache, self.params.get(&gname), &dh);
                    grads.set(self.params.index_of(&gname), dg);
                    grads.set(self.params.index_of(&format!("{bn}.beta")), db);
                    dx
                }
                None => dh,
            };
            let dz = layers::leaky_relu_backward(&ct.z, &da, slope);
            let name = format!("conv{}", i + 1);
            let wname = format!("{name}.weight");
            let g = layers::conv_backward(&convs[i], self.params.get(&wname), &ct.x, &dz, true, true);
            grads.set(self.params.index_of(&wname), g.dw);
            grads.set(self.params.index_of(&format!("{name}.bias")), g.db);
            dh = g.dx.expect("input gradient requested");
        }
        Ok((grads, dh))
    }

    pub fn update_running_stats(&mut self, tape: &DiscriminatorTape<T>, momentum: f64) -> Result<()> {
        self.params.check_stamp(tape.stamp)?;
        let m = T::of(momentum);
        for (i, ct) in tape.convs.iter().enumerate() {
            if let Some(cache) = &ct.bn {
                let bn = format!("bn{}", i + 1);
                blend(self.params.get_mut(&format!("{bn}.running_mean")), &cache.mean, m);
                blend(self.params.get_mut(&format!("{bn}.running_var")), &cache.var, m);
            }
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
        let config: DiscriminatorConfig = serde_json::from_value(c.arch.clone())
            .map_err(|e| Error::Schema(format!("discriminator arch: {e}")))?;
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
        Ok(DiscriminatorWeights {
            config,
            params: ParamSet::new(params),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let arch = serde_json::to_value(&self.config).expect("config serializes");
        container::write(path, KIND, arch, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&container::read(path)?)
    }
}
