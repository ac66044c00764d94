//! Frozen VGG-19 convolutional stack used as a feature extractor.
//!
//! Only input gradients are ever computed; the weights have no gradient
//! path and no mutable accessor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{self, Container, NamedTensor};
use super::he_init;
use super::layers::{self, Conv, Padding};
use super::params::{Param, ParamKind, ParamSet, Stamp};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const KIND: &str = "vgg19";
pub const MIN_SIDE: usize = 32;
pub const IMAGENET_MEAN: [f64; 3] = [123.68, 116.779, 103.939];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggConfig {
    pub widths: [usize; 5],
    pub depths: [usize; 5],
}

impl Default for VggConfig {
    fn default() -> Self {
        VggConfig {
            widths: [64, 128, 256, 512, 512],
            depths: [2, 2, 4, 4, 4],
        }
    }
}

impl VggConfig {
    /// Canonical depths with every width divided by `divisor`.
    pub fn reduced(divisor: usize) -> Self {
        let d = Self::default();
        VggConfig {
            widths: d.widths.map(|w| (w / divisor).max(1)),
            ..d
        }
    }

    fn convs(&self) -> Vec<(VggLayer, Conv)> {
        let mut out = Vec::new();
        let mut in_c = 3;
        for b in 0..5 {
            for i in 0..self.depths[b] {
                out.push((
                    VggLayer { block: b + 1, index: i + 1 },
                    Conv::same(in_c, self.widths[b], 3, 1, Padding::Zero),
                ));
                in_c = self.widths[b];
            }
        }
        out
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.convs()
            .into_iter()
            .flat_map(|(l, c)| {
                [
                    (format!("conv{}_{}.weight", l.block, l.index), c.weight_shape()),
                    (format!("conv{}_{}.bias", l.block, l.index), vec![c.out_c]),
                ]
            })
            .collect()
    }

    fn check_layer(&self, layer: VggLayer) -> Result<()> {
        if (1..=5).contains(&layer.block) && (1..=self.depths[layer.block - 1]).contains(&layer.index) {
            Ok(())
        } else {
            Err(Error::UnknownLayer(layer.to_string()))
        }
    }

    /// Channels and spatial size of the features at `layer` for an
    /// `h x w` input (floor pooling between blocks).
    pub fn feature_shape(&self, layer: VggLayer, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.check_layer(layer)?;
        let pools = layer.block - 1;
        Ok((self.widths[layer.block - 1], h >> pools, w >> pools))
    }
}

/// A ReLU stage, `relu{block}_{index}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VggLayer {
    pub block: usize,
    pub index: usize,
}

impl VggLayer {
    pub const RELU5_4: VggLayer = VggLayer { block: 5, index: 4 };
}

impl Default for VggLayer {
    fn default() -> Self {
        Self::RELU5_4
    }
}

impl fmt::Display for VggLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "relu{}_{}", self.block, self.index)
    }
}

impl FromStr for VggLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let rest = s.strip_prefix("relu").ok_or_else(unknown)?;
        let (b, i) = rest.split_once('_').ok_or_else(unknown)?;
        let block: usize = b.parse().map_err(|_| unknown())?;
        let index: usize = i.parse().map_err(|_| unknown())?;
        let layer = VggLayer { block, index };
        VggConfig::default().check_layer(layer).map_err(|_| unknown())?;
        Ok(layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VggWeights<T> {
    config: VggConfig,
    params: ParamSet<T>,
    checksum: String,
}

enum Step<T> {
    /// Input and post-ReLU output of a convolution.
    Conv { conv: Conv, idx: usize, x: Tensor<T>, y: Tensor<T> },
    Pool { in_shape: [usize; 4], arg: Vec<u32> },
}

pub struct VggTape<T> {
    stamp: Stamp,
    steps: Vec<Step<T>>,
    out_shape: [usize; 4],
}

impl<T: Real> VggWeights<T> {
    /// Loads the canonical VGG-19 stack.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = container::read(path)?;
        if !c.arch.is_null() {
            let cfg: VggConfig = serde_json::from_value(c.arch.clone())
                .map_err(|e| Error::Schema(format!("vgg arch: {e}")))?;
            if cfg != VggConfig::default() {
                return Err(Error::Schema("container does not hold the canonical VGG-19 stack".into()));
            }
        }
        Self::from_container(&c, VggConfig::default())
    }

    /// Loads a stack of the given configuration (reduced-width nets).
    pub fn load_with(path: impl AsRef<Path>, config: VggConfig) -> Result<Self> {
        Self::from_container(&container::read(path)?, config)
    }

    pub fn from_container(c: &Container, config: VggConfig) -> Result<Self> {
        let layout = config.layout();
        let data = container::expect_tensors(c, KIND, &layout)?;
        let params = layout
            .into_iter()
            .zip(data)
            .map(|((name, shape), d)| Param {
                name,
                shape,
                data: d.into_iter().map(|v| T::of(v as f64)).collect(),
                kind: ParamKind::Trainable,
            })
            .collect();
        let params = ParamSet::new(params);
        if !params.all_finite() {
            return Err(Error::Schema("vgg weights contain non-finite values".into()));
        }
        Ok(VggWeights {
            config,
            params,
            checksum: c.checksum.clone(),
        })
    }

    /// Randomly initialized stack, for tests and smoke runs without the
    /// pretrained file.
    pub fn random(config: VggConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    he_init(&mut rng, len, shape[1] * 9)
                } else {
                    vec![0.0; len]
                };
                Param {
                    name,
                    shape,
                    data: data.into_iter().map(T::of).collect(),
                    kind: ParamKind::Trainable,
                }
            })
            .collect();
        let w = VggWeights {
            config,
            params: ParamSet::new(params),
            checksum: String::new(),
        };
        let bytes = container::encode(KIND, w.arch(), &w.to_tensors());
        VggWeights {
            checksum: container::checksum(&bytes),
            ..w
        }
    }

    fn arch(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn config(&self) -> &VggConfig {
        &self.config
    }

    /// SHA-256 of the container the weights were read from.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn tensor(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn cast<U: Real>(&self) -> VggWeights<U> {
        VggWeights {
            config: self.config.clone(),
            params: self.params.cast(),
            checksum: self.checksum.clone(),
        }
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

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write(path, KIND, self.arch(), &self.to_tensors())
    }

    fn preprocess(x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        let plane = x.height() * x.width();
        for n in 0..x.batch() {
            for (c, ch) in out.item_mut(n).chunks_mut(plane).enumerate() {
                let m = T::of(IMAGENET_MEAN[c]);
                ch.iter_mut().for_each(|v| *v = *v * T::of(255.0) - m);
            }
        }
        out
    }

    fn check(&self, x: &Tensor<T>, layer: VggLayer) -> Result<()> {
        self.config.check_layer(layer)?;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "vgg needs N x 3 x H x W with H, W >= {MIN_SIDE}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, layer: VggLayer, record: bool) -> (Tensor<T>, Vec<Step<T>>) {
        let mut h = Self::preprocess(x);
        let mut steps = Vec::new();
        let mut idx = 0;
        for (l, conv) in self.config.convs() {
            if l.block > 1 && l.index == 1 {
                let (y, arg) = layers::maxpool2_forward(&h);
                if record {
                    steps.push(Step::Pool { in_shape: h.shape(), arg });
                }
                h = y;
            }
            let mut y = layers::conv_forward(
                &conv,
                &self.params.as_slice()[idx].data,
                &self.params.as_slice()[idx + 1].data,
                &h,
            );
            layers::relu_inplace(&mut y);
            let y_kept = if record { Some(y.clone()) } else { None };
            let x_prev = std::mem::replace(&mut h, y);
            if let Some(y) = y_kept {
                steps.push(Step::Conv { conv, idx, x: x_prev, y });
            }
            idx += 2;
            if l == layer {
                break;
            }
        }
        (h, steps)
    }

    /// Nonnegative features after the named ReLU stage.
    pub fn features(&self, x: &Tensor<T>, layer: VggLayer) -> Result<Tensor<T>> {
        self.check(x, layer)?;
        Ok(self.run(x, layer, false).0)
    }

    pub fn features_with_tape(&self, x: &Tensor<T>, layer: VggLayer) -> Result<(Tensor<T>, VggTape<T>)> {
        self.check(x, layer)?;
        let (f, steps) = self.run(x, layer, true);
        let tape = VggTape {
            stamp: self.params.stamp(),
            steps,
            out_shape: f.shape(),
        };
        Ok((f, tape))
    }

    /// Gradient of `sum(dfeat * features)` with respect to the `[0, 1]`
    /// input image. No weight gradients are formed.
    pub fn input_grad(&self, tape: &VggTape<T>, dfeat: &Tensor<T>) -> Result<Tensor<T>> {
        self.params.check_stamp(tape.stamp)?;
        if dfeat.shape() != tape.out_shape {
            return Err(Error::Shape(format!(
                "feature gradient {:?} vs features {:?}",
                dfeat.shape(),
                tape.out_shape
            )));
        }
        let mut d = dfeat.clone();
        for step in tape.steps.iter().rev() {
            d = match step {
                Step::Conv { conv, idx, x, y } => {
                    let dz = layers::relu_backward(y, &d);
                    let g = layers::conv_backward(conv, &self.params.as_slice()[*idx].data, x, &dz, false, true);
                    g.dx.expect("input gradient requested")
                }
                Step::Pool { in_shape, arg } => layers::maxpool2_backward(*in_shape, arg, &d),
            };
        }
        d.scale(T::of(255.0));
        Ok(d)
    }
}
