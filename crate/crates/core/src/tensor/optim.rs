use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

/// Hyperparameters for AdamW and plain SGD (`lr` only).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub trait Optimizer<T: Scalar>: Send {
    /// Applies one update using the gradients stored in `params`.
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()>;

    /// Forgets all accumulated state (moments, step counter).
    fn reset(&mut self);
}

fn grad_of<'a, T: Scalar>(name: &str, grad: Option<&'a [T]>) -> Result<&'a [T]> {
    grad.ok_or_else(|| Error::State(format!("parameter {name} has no gradient")))
}

/// Plain gradient descent: `value -= lr * grad`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let lr = T::of(self.lr);
        for p in params.iter() {
            if p.kind == ParamKind::Trainable {
                grad_of(&p.name, p.value.grad())?;
            }
        }
        for p in params.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            let g = p.value.grad().expect("checked above").to_vec();
            for (v, gi) in p.value.data_mut().iter_mut().zip(g) {
                *v -= lr * gi;
            }
        }
        Ok(())
    }

    fn reset(&mut self) {}
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, idx: usize) -> Option<&[T]> {
        self.m.get(idx).map(Vec::as_slice)
    }

    pub fn second_moment(&self, idx: usize) -> Option<&[T]> {
        self.v.get(idx).map(Vec::as_slice)
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for p in params.iter().filter(|p| p.kind == ParamKind::Trainable) {
            grad_of(&p.name, p.value.grad())?;
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.value.numel())
        {
            return Err(Error::State(
                "optimizer moments do not match the parameter layout".into(),
            ));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bias2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::of(c.lr);
        let decay = T::of(c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let g = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, val) in p.value.data_mut().iter_mut().enumerate() {
                *val -= decay * *val;
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *val -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(value), ParamKind::Trainable)
            .unwrap();
        if let Some(g) = grad {
            s.get_mut(0).value.set_grad(Some(vec![g])).unwrap();
        }
        s
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = scalar_store(1.0, Some(1.0));
        Sgd { lr: 0.1 }.step(&mut s).unwrap();
        assert!((s.get(0).value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(0).value.item(), 0.7);
    }

    #[test]
    fn first_adamw_step_matches_hand_evaluation() {
        // g = 2: m = 0.2, v = 0.004, mhat = 2, vhat = 4, update = -lr * 2 / (2 + eps)
        let lr = 0.01;
        let mut s = scalar_store(1.0, Some(2.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        let expect = 1.0 - lr * 2.0 / (2.0 + 1e-8);
        assert!((s.get(0).value.item() - expect).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
        assert!((opt.first_moment(0).unwrap()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the decay term acts, value *= 1 - lr * wd
        let mut s = scalar_store(2.0, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut s = scalar_store(1.0, None);
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(Error::State(_))));
        assert!(matches!(
            Optimizer::<f64>::step(&mut Sgd { lr: 0.1 }, &mut s),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn reset_clears_moments() {
        let mut s = scalar_store(1.0, Some(1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s).unwrap();
        opt.reset();
        assert_eq!(opt.steps(), 0);
        assert!(opt.first_moment(0).is_none());
    }
}
