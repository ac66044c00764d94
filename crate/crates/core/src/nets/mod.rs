//! The image-transformation generator, the grayscale discriminator and the
//! frozen VGG-19 feature extractor, with hand-written backward passes.

pub mod container;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod params;
pub mod vgg;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use discriminator::{DiscriminatorConfig, DiscriminatorTape, DiscriminatorWeights};
pub use generator::{GeneratorConfig, GeneratorTape, GeneratorWeights, OutputActivation};
pub use params::{Grads, Param, ParamKind, ParamSet};
pub use vgg::{VggConfig, VggLayer, VggTape, VggWeights};

/// Batch-norm behavior: batch statistics while training, running statistics
/// at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Normal sample truncated at two standard deviations.
pub(crate) fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn he_init<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len).map(|_| truncated_normal(rng, std)).collect()
}
