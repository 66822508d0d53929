//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use bafnet_tensor::{Real, Tensor};

use crate::config::TrainConfig;
use crate::error::{config_err, shape_err, Result};
use crate::params::ParamStore;

/// `0.5·lr0·(1 + cos(πt/T))`, floored at 0.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(config_err("cosine schedule needs at least one step"));
    }
    if t > total {
        return Err(config_err(format!("schedule step {t} past the end ({total})")));
    }
    Ok((0.5 * lr0 * (1.0 + (PI * t as f64 / total as f64).cos())).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zero moments shaped like `store`'s parameters.
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn from_config(store: &ParamStore<T>, t: &TrainConfig) -> Self {
        AdamW::new(store, t.beta1, t.beta2, t.adam_eps, t.weight_decay)
    }

    /// One bias-corrected update. Decay multiplies the parameter by
    /// `1 - lr·wd` before the Adam step, and only for parameters flagged for
    /// decay (not norm scales/shifts or biases).
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.params.len() || self.m.len() != store.params.len() || self.v.len() != store.params.len()
        {
            return Err(shape_err(format!(
                "{} parameters, {} gradients, {}/{} moments",
                store.params.len(),
                grads.len(),
                self.m.len(),
                self.v.len()
            )));
        }
        for (((p, g), m), v) in store.params.iter().zip(grads).zip(&self.m).zip(&self.v) {
            if g.shape() != p.value.shape() || m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(shape_err(format!(
                    "{}: parameter {:?}, gradient {:?}, moments {:?}/{:?}",
                    p.name,
                    p.value.shape(),
                    g.shape(),
                    m.shape(),
                    v.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let cv = |x: f64| T::from_f64c(x);
        let (b1t, b2t, ib1, ib2) = (cv(b1), cv(b2), cv(1.0 - b1), cv(1.0 - b2));
        let (step_size, inv_sqrt_c2, eps) = (cv(lr / c1), cv(1.0 / c2.sqrt()), cv(self.eps));
        for (((p, g), m), v) in store.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let shrink = if p.decay { cv(1.0 - lr * self.weight_decay) } else { T::one() };
            let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((x, &gi), mi), vi) in it {
                *mi = b1t * *mi + ib1 * gi;
                *vi = b2t * *vi + ib2 * gi * gi;
                *x = *x * shrink - step_size * *mi / ((*vi).sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64c();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};

    fn store(decay: bool) -> ParamStore<f64> {
        let mut b = ParamBuilder::new(0);
        b.param("w", &[1], Init::Const(1.0), decay).unwrap();
        b.finish()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100).unwrap(), 2e-4);
        assert!(cosine_lr(2e-4, 100, 100).unwrap().abs() < 1e-20);
        assert!((cosine_lr(2e-4, 50, 100).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(2e-4, 0, 0).is_err());
        assert!(cosine_lr(2e-4, 101, 100).is_err());
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(true);
        let mut o = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        o.update(&mut s, &[Tensor::full(&[1], 1.0)], 0.1).unwrap();
        assert!((s.params[0].value.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_only_flagged_params() {
        for decay in [true, false] {
            let mut s = store(decay);
            let mut o = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.5);
            for _ in 0..3 {
                o.update(&mut s, &[Tensor::zeros(&[1])], 0.1).unwrap();
            }
            let want = if decay { 0.95f64.powi(3) } else { 1.0 };
            assert!((s.params[0].value.item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut s = store(true);
        let mut o = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        assert!(o.update(&mut s, &[Tensor::zeros(&[2])], 0.1).is_err());
        assert!(o.update(&mut s, &[], 0.1).is_err());
        assert_eq!(o.step, 0);
    }
}
