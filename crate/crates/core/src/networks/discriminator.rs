//! Fully convolutional domain discriminator over class-probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::ops::{leaky_relu, leaky_relu_backward, resize_bilinear, resize_bilinear_backward};
use crate::nn::{Conv2d, ConvGeometry, Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub filter_sequence: Vec<usize>,
    pub leaky_slope: f64,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            filter_sequence: vec![64, 128, 256, 512, 1],
            leaky_slope: 0.2,
            kernel_size: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.filter_sequence.last() {
            Some(1) => {}
            _ => bail!(Config, "discriminator filter sequence must end with 1"),
        }
        if self.filter_sequence.contains(&0) {
            bail!(Config, "discriminator filter counts must be positive");
        }
        if self.kernel_size == 0 || self.stride == 0 {
            bail!(Config, "discriminator kernel and stride must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!(Config, "leaky slope must be in (0, 1)");
        }
        Ok(())
    }

    fn geometry(&self, in_ch: usize, out_ch: usize) -> ConvGeometry {
        ConvGeometry {
            in_ch,
            out_ch,
            kernel: self.kernel_size,
            stride: self.stride,
            padding: self.padding,
            dilation: 1,
        }
    }

    pub fn expected_param_count(&self, in_channels: usize) -> usize {
        let mut cin = in_channels;
        let mut total = 0;
        for &f in &self.filter_sequence {
            total += self.geometry(cin, f).param_count(true);
            cin = f;
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct DomainDiscriminator<T> {
    cfg: DiscriminatorConfig,
    in_channels: usize,
    pub params: ParamSet<T>,
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct DiscCache<T> {
    /// Input of each convolution.
    inputs: Vec<Tensor<T>>,
    /// Output of each LeakyReLU (one per hidden layer).
    acts: Vec<Tensor<T>>,
    logit_hw: (usize, usize),
}

pub fn build_discriminator<T: Scalar>(
    cfg: &DiscriminatorConfig,
    in_channels: usize,
    init_seed: u64,
) -> Result<DomainDiscriminator<T>> {
    cfg.validate()?;
    if in_channels == 0 {
        bail!(Config, "discriminator needs at least one input channel");
    }
    let mut rng = crate::seed::stream(init_seed, "discriminator-init");
    let mut ps = ParamSet::new();
    let hidden_gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
    let last = cfg.filter_sequence.len() - 1;
    let mut cin = in_channels;
    let convs = cfg
        .filter_sequence
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let gain = if i == last { 1.0 } else { hidden_gain };
            let c = Conv2d::new(&mut ps, &format!("conv{i}"), cfg.geometry(cin, f), true, &mut rng, gain);
            cin = f;
            c
        })
        .collect();
    Ok(DomainDiscriminator {
        cfg: cfg.clone(),
        in_channels,
        params: ps,
        convs,
    })
}

impl<T: Scalar> DomainDiscriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn cast<U: Scalar>(&self) -> DomainDiscriminator<U> {
        DomainDiscriminator {
            cfg: self.cfg.clone(),
            in_channels: self.in_channels,
            params: self.params.cast(),
            convs: self.convs.clone(),
        }
    }

    /// Logit map upsampled to the input's spatial size, shape (N, 1, H, W).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DiscCache<T>)> {
        if x.c() != self.in_channels {
            bail!(Shape, "discriminator expects {} channels, got {}", self.in_channels, x.c());
        }
        let last = self.convs.len() - 1;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&self.params, &cur)?;
            inputs.push(cur);
            cur = if i < last {
                let a = leaky_relu(&z, self.cfg.leaky_slope);
                acts.push(a.clone());
                a
            } else {
                z
            };
        }
        let logit_hw = (cur.h(), cur.w());
        let up = resize_bilinear(&cur, x.h(), x.w());
        Ok((up, DiscCache { inputs, acts, logit_hw }))
    }

    /// Gradient w.r.t. the discriminator input. Parameter gradients are
    /// accumulated only when `grads` is given.
    pub fn backward(&self, cache: &DiscCache<T>, dlogits: &Tensor<T>, grads: Option<&mut Grads<T>>) -> Tensor<T> {
        let (lh, lw) = cache.logit_hw;
        let mut d = resize_bilinear_backward(dlogits, lh, lw);
        let mut grads = grads;
        for i in (0..self.convs.len()).rev() {
            if i < self.convs.len() - 1 {
                d = leaky_relu_backward(&cache.acts[i], &d, self.cfg.leaky_slope);
            }
            d = self.convs[i]
                .backward(&self.params, &cache.inputs[i], &d, grads.as_deref_mut(), true)
                .expect("dx requested");
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_input_size() {
        let cfg = DiscriminatorConfig {
            filter_sequence: vec![4, 4, 4, 4, 1],
            ..Default::default()
        };
        let d = build_discriminator::<f32>(&cfg, 5, 0).unwrap();
        let x = Tensor::full([1, 5, 304, 304], 0.2f32);
        let (y, _) = d.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 304, 304]);
    }

    #[test]
    fn tiny_param_count_by_hand() {
        // filters 2,2,2,2,1, kernel 4, 5 input channels:
        // 5*2*16+2 = 162; 3 × (2*2*16+2) = 3 × 66 = 198; 2*1*16+1 = 33
        let cfg = DiscriminatorConfig {
            filter_sequence: vec![2, 2, 2, 2, 1],
            ..Default::default()
        };
        let d = build_discriminator::<f64>(&cfg, 5, 0).unwrap();
        assert_eq!(d.params.trainable_count(), 162 + 198 + 33);
        assert_eq!(cfg.expected_param_count(5), 393);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DiscriminatorConfig {
            filter_sequence: vec![2, 2],
            ..Default::default()
        };
        assert!(build_discriminator::<f32>(&cfg, 5, 0).is_err());
    }

    #[test]
    fn rejects_wrong_channels() {
        let d = build_discriminator::<f32>(&DiscriminatorConfig::default(), 5, 0).unwrap();
        assert!(d.forward(&Tensor::zeros([1, 3, 64, 64])).is_err());
    }
}
