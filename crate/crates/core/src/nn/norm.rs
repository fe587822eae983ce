use crate::nn::params::{Grads, ParamId, ParamKind, ParamSet};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalization with affine parameters and running
/// statistics (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: ps.add(&format!("{name}.gamma"), &[channels], ParamKind::Trainable, vec![1.0; channels]),
            beta: ps.add(&format!("{name}.beta"), &[channels], ParamKind::Trainable, vec![0.0; channels]),
            running_mean: ps.add(&format!("{name}.running_mean"), &[channels], ParamKind::Buffer, vec![0.0; channels]),
            running_var: ps.add(&format!("{name}.running_var"), &[channels], ParamKind::Buffer, vec![1.0; channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn apply<T: Scalar>(x: &Tensor<T>, scale: &[f64], shift: &[f64]) -> Tensor<T> {
        let mut y = Tensor::zeros(x.shape());
        let c = x.c();
        let plane = x.plane_len();
        par::for_each_chunk_mut(y.data_mut(), plane, |i, out| {
            let ch = i % c;
            let (s, b) = (T::of(scale[ch]), T::of(shift[ch]));
            let src = &x.data()[i * plane..(i + 1) * plane];
            for (o, &v) in out.iter_mut().zip(src) {
                *o = v * s + b;
            }
        });
        y
    }

    /// Training-mode forward: normalizes with batch statistics and, when
    /// `update_stats`, folds them into the running averages.
    pub fn forward_train<T: Scalar>(
        &self,
        ps: &mut ParamSet<T>,
        x: &Tensor<T>,
        update_stats: bool,
    ) -> (Tensor<T>, BnCache<T>) {
        let (n, c, plane) = (x.n(), x.c(), x.plane_len());
        let count = (n * plane) as f64;
        let stats = par::map_range(c, |ch| {
            let mut sum = 0.0;
            for s in 0..n {
                sum += x.plane(s, ch).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for s in 0..n {
                sq += x.plane(s, ch).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            (mean, sq / count)
        });
        let inv_std: Vec<f64> = stats.iter().map(|&(_, var)| 1.0 / (var + self.eps).sqrt()).collect();
        let neg_mean_scaled: Vec<f64> = stats.iter().zip(&inv_std).map(|(&(m, _), &is)| -m * is).collect();
        let xhat = Self::apply(x, &inv_std, &neg_mean_scaled);
        let gamma: Vec<f64> = ps.get(self.gamma).iter().map(|v| v.f64()).collect();
        let beta: Vec<f64> = ps.get(self.beta).iter().map(|v| v.f64()).collect();
        let y = Self::apply(&xhat, &gamma, &beta);
        if update_stats {
            let m = self.momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let rm = &mut ps.get_mut(self.running_mean)[ch];
                *rm = T::of((1.0 - m) * rm.f64() + m * mean);
                let rv = &mut ps.get_mut(self.running_var)[ch];
                *rv = T::of((1.0 - m) * rv.f64() + m * var * unbias);
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval<T: Scalar>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let rm = ps.get(self.running_mean);
        let rv = ps.get(self.running_var);
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for ch in 0..self.channels {
            let s = gamma[ch].f64() / (rv[ch].f64() + self.eps).sqrt();
            scale.push(s);
            shift.push(beta[ch].f64() - rm[ch].f64() * s);
        }
        Self::apply(x, &scale, &shift)
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        let xhat = &cache.xhat;
        let (n, c, plane) = (dy.n(), dy.c(), dy.plane_len());
        let count = (n * plane) as f64;
        let sums = par::map_range(c, |ch| {
            let mut sdy = 0.0;
            let mut sdyx = 0.0;
            for s in 0..n {
                for (&g, &xh) in dy.plane(s, ch).iter().zip(xhat.plane(s, ch)) {
                    sdy += g.f64();
                    sdyx += g.f64() * xh.f64();
                }
            }
            (sdy, sdyx)
        });
        if let Some(gr) = grads {
            let dgamma: Vec<T> = sums.iter().map(|&(_, sdyx)| T::of(sdyx)).collect();
            let dbeta: Vec<T> = sums.iter().map(|&(sdy, _)| T::of(sdy)).collect();
            gr.accumulate(self.gamma, &dgamma);
            gr.accumulate(self.beta, &dbeta);
        }
        // dx = gamma*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
        let gamma = ps.get(self.gamma);
        let mut dx = Tensor::zeros(dy.shape());
        par::for_each_chunk_mut(dx.data_mut(), plane, |i, out| {
            let ch = i % c;
            let k = gamma[ch].f64() * cache.inv_std[ch] / count;
            let (sdy, sdyx) = sums[ch];
            let g = &dy.data()[i * plane..(i + 1) * plane];
            let xh = &xhat.data()[i * plane..(i + 1) * plane];
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = T::of(k * (count * gv.f64() - sdy - xv.f64() * sdyx));
            }
        });
        dx
    }
}
