use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Grads, ParamKind, ParamSet};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per tensor of the parameter set
/// (empty for running statistics), plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros(params: &ParamSet<T>) -> Self {
        let bufs = || {
            params
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Trainable => vec![T::zero(); p.data.len()],
                    ParamKind::RunningStat => Vec::new(),
                })
                .collect()
        };
        Moments { m: bufs(), v: bufs(), t: 0 }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().enumerate().all(|(i, p)| {
                let want = if p.kind == ParamKind::Trainable { p.data.len() } else { 0 };
                self.m[i].len() == want && self.v[i].len() == want
            })
    }
}

/// One bias-corrected Adam update of every trainable tensor. The step
/// counter in `moments` is advanced first, so the first call uses `t = 1`.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Grads<T>,
    moments: &mut Moments<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.tensors.len() != params.len() || !moments.matches(params) {
        return Err(Error::Shape("gradients or moments do not match the parameter set".into()));
    }
    for (p, g) in params.iter().zip(&grads.tensors) {
        if p.kind == ParamKind::Trainable && g.len() != p.data.len() {
            return Err(Error::Shape(format!("gradient of `{}` has {} values, expected {}", p.name, g.len(), p.data.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    moments.t += 1;
    let t = moments.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let one = T::one();
    for (i, p) in params.as_mut_slice().iter_mut().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let (m, v, g) = (&mut moments.m[i], &mut moments.v[i], &grads.tensors[i]);
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("update produced non-finite `{}`", p.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Param;

    fn scalar(v: f64) -> ParamSet<f64> {
        ParamSet::new(vec![Param {
            name: "p".into(),
            shape: vec![1],
            data: vec![v],
            kind: ParamKind::Trainable,
        }])
    }

    #[test]
    fn first_step_of_unit_gradient() {
        let mut p = scalar(0.0);
        let mut m = Moments::zeros(&p);
        let g = Grads { tensors: vec![vec![1.0]] };
        adam_step(&mut p, &g, &mut m, &AdamConfig::default()).unwrap();
        let expected = -5e-4 / (1.0 + 1e-8);
        assert!((p.get("p")[0] - expected).abs() < 1e-15);
        assert_eq!(m.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_and_steps_are_pure() {
        let mut p = scalar(0.25);
        let mut m = Moments::zeros(&p);
        adam_step(&mut p, &Grads { tensors: vec![vec![0.0]] }, &mut m, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("p")[0], 0.25);

        let g = Grads { tensors: vec![vec![0.3]] };
        let (mut p1, mut m1) = (scalar(1.0), Moments::zeros(&scalar(1.0)));
        let (mut p2, mut m2) = (scalar(1.0), Moments::zeros(&scalar(1.0)));
        adam_step(&mut p1, &g, &mut m1, &AdamConfig::default()).unwrap();
        adam_step(&mut p2, &g, &mut m2, &AdamConfig::default()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar(0.0);
        let mut m = Moments::zeros(&p);
        let nan = Grads { tensors: vec![vec![f64::NAN]] };
        assert!(matches!(adam_step(&mut p, &nan, &mut m, &AdamConfig::default()), Err(Error::NonFiniteGradient(_))));
        let wrong = Grads { tensors: vec![vec![1.0, 2.0]] };
        assert!(matches!(adam_step(&mut p, &wrong, &mut m, &AdamConfig::default()), Err(Error::Shape(_))));
        assert_eq!(m.t, 0);
    }
}
