//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{Grads, ParamKind, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            bail!(Config, "Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            bail!(Config, "Adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Optimizer state for one network. Moments are kept in f64 regardless of
/// the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &ParamSet<T>, cfg: AdamConfig, weight_decay: f64) -> Result<Self> {
        cfg.validate()?;
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            bail!(Config, "weight decay must be finite and nonnegative");
        }
        let zeros = |e: &crate::nn::ParamEntry<T>| match e.kind {
            ParamKind::Trainable => vec![0.0; e.data.len()],
            ParamKind::Buffer => Vec::new(),
        };
        Ok(Self {
            cfg,
            weight_decay,
            step: 0,
            m: params.entries().iter().map(zeros).collect(),
            v: params.entries().iter().map(zeros).collect(),
        })
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let wd = self.weight_decay;
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads.buffers()).enumerate() {
            if e.kind == ParamKind::Buffer {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &gj)) in e.data.iter_mut().zip(g).enumerate() {
                let g = gj.f64();
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let th = p.f64();
                *p = T::of(th - lr * (mh / (vh.sqrt() + self.cfg.eps) + wd * th));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", &[3], ParamKind::Trainable, vec![1.0, -2.0, 0.5]);
        let mut g = Grads::zeros_like(&ps);
        g.get_mut(id).copy_from_slice(&[0.3, -4.0, 0.0]);
        let mut opt = Adam::new(&ps, AdamConfig::default(), 0.0).unwrap();
        opt.step(&mut ps, &g, 0.1);
        let w = ps.get(id);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", &[1], ParamKind::Trainable, vec![2.0]);
        let g = Grads::zeros_like(&ps);
        let mut opt = Adam::new(&ps, AdamConfig::default(), 0.5).unwrap();
        opt.step(&mut ps, &g, 0.1);
        assert!((ps.get(id)[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn buffers_untouched() {
        let mut ps = ParamSet::<f32>::new();
        let b = ps.add("running_mean", &[2], ParamKind::Buffer, vec![1.0, 1.0]);
        let g = Grads::zeros_like(&ps);
        let mut opt = Adam::new(&ps, AdamConfig::default(), 0.1).unwrap();
        opt.step(&mut ps, &g, 1.0);
        assert_eq!(ps.get(b), &[1.0, 1.0]);
    }
}
