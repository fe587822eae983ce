//! Segmentation, mixup and adversarial losses.
//!
//! Every loss comes with a gradient helper that returns the derivative with
//! respect to the *logits* feeding the corresponding softmax or sigmoid, so
//! the training loop never divides by a probability.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::networks::{DomainDiscriminator, ProbMaps};
use crate::tensor::{Scalar, Tensor};

/// Integer label maps for a batch, row-major per item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            bail!(Shape, "label batch has {} values, expected {}", data.len(), n * h * w);
        }
        Ok(Self { n, h, w, data })
    }

    pub fn from_planes(h: usize, w: usize, planes: &[&[u8]]) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.len() != h * w {
                bail!(Shape, "label plane has {} values, expected {}", p.len(), h * w);
            }
            data.extend_from_slice(p);
        }
        Self::new(planes.len(), h, w, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn item(&self, i: usize) -> &[u8] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    /// Items reordered so that item `i` is the old item `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            data.extend_from_slice(self.item(j));
        }
        Self { data, ..*self }
    }
}

/// Annotated mini-batch (source domain).
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub images: Tensor<T>,
    pub targets: LabelBatch,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(images: Tensor<T>, targets: LabelBatch) -> Result<Self> {
        let (n, h, w) = targets.shape();
        if images.n() != n || images.h() != h || images.w() != w {
            bail!(Shape, "images {:?} vs labels {:?}", images.shape(), targets.shape());
        }
        Ok(Self { images, targets })
    }
}

/// Unannotated mini-batch (target domain).
#[derive(Clone, Debug)]
pub struct UnlabeledBatch<T> {
    pub images: Tensor<T>,
}

/// One mixup draw: a single λ for the whole batch and a pairing permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub lam: f64,
    pub permutation: Vec<usize>,
    pub alpha: f64,
}

impl MixupDraw {
    pub fn identity(batch: usize, lam: f64) -> Self {
        Self {
            lam,
            permutation: (0..batch).collect(),
            alpha: f64::NAN,
        }
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lam) {
            bail!(Config, "mixup lambda {} outside [0, 1]", self.lam);
        }
        if self.permutation.len() != batch {
            bail!(Shape, "permutation has {} entries for batch of {}", self.permutation.len(), batch);
        }
        let mut seen = vec![false; batch];
        for &p in &self.permutation {
            if p >= batch || std::mem::replace(&mut seen[p], true) {
                bail!(Shape, "mixup permutation is not a bijection");
            }
        }
        Ok(())
    }
}

/// Loss weights of the segmenter criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdaLossWeights {
    pub gamma_segm: f64,
    pub gamma_adv: f64,
    pub aux_gamma_segm: f64,
    pub aux_gamma_adv: f64,
}

impl Default for UdaLossWeights {
    fn default() -> Self {
        Self {
            gamma_segm: 1.0,
            gamma_adv: 1e-3,
            aux_gamma_segm: 1e-1,
            aux_gamma_adv: 2e-4,
        }
    }
}

impl UdaLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_segm, self.gamma_adv, self.aux_gamma_segm, self.aux_gamma_adv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail!(Config, "loss weights must be finite and nonnegative");
        }
        Ok(())
    }
}

fn check_targets<T: Scalar>(pred: &ProbMaps<T>, targets: &LabelBatch) -> Result<()> {
    let [n, c, h, w] = pred.shape();
    if targets.shape() != (n, h, w) {
        bail!(Shape, "predictions {:?} vs targets {:?}", pred.shape(), targets.shape());
    }
    if let Some(&bad) = targets.data.iter().find(|&&l| l as usize >= c) {
        bail!(Shape, "label {bad} out of range for {c} classes");
    }
    Ok(())
}

/// Multi-class cross-entropy: mean over batch and pixels of −log p(true class).
pub fn mce_loss<T: Scalar>(pred: &ProbMaps<T>, targets: &LabelBatch) -> Result<T> {
    check_targets(pred, targets)?;
    let lp = &pred.log_probabilities;
    let plane = lp.plane_len();
    let mut sum = 0.0;
    for n in 0..lp.n() {
        let s = lp.sample(n);
        for (px, &l) in targets.item(n).iter().enumerate() {
            sum -= s[l as usize * plane + px].f64();
        }
    }
    Ok(T::of(sum / targets.data.len() as f64))
}

/// `scale · ∂MCE/∂logits = scale · (p − onehot) / N`.
pub fn mce_grad<T: Scalar>(pred: &ProbMaps<T>, targets: &LabelBatch, scale: f64) -> Result<Tensor<T>> {
    check_targets(pred, targets)?;
    let k = T::of(scale / targets.data.len() as f64);
    Ok(onehot_residual(&pred.probabilities, targets, k))
}

fn onehot_residual<T: Scalar>(p: &Tensor<T>, targets: &LabelBatch, k: T) -> Tensor<T> {
    let plane = p.plane_len();
    let mut g = p.clone();
    for n in 0..p.n() {
        let s = g.sample_mut(n);
        for (px, &l) in targets.item(n).iter().enumerate() {
            s[l as usize * plane + px] -= T::one();
        }
    }
    g.data_mut().iter_mut().for_each(|v| *v *= k);
    g
}

/// Draws λ ~ Beta(α, α) once per batch and a uniform pairing permutation.
pub fn sample_mixup<R: Rng + ?Sized>(batch: usize, alpha: f64, rng: &mut R) -> Result<MixupDraw> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        bail!(Config, "mixup alpha must be positive, got {alpha}");
    }
    if batch == 0 {
        bail!(Config, "mixup needs a non-empty batch");
    }
    let lam = Beta::new(alpha, alpha)
        .map_err(|e| crate::Error::Config(e.to_string()))?
        .sample(rng)
        .clamp(0.0, 1.0);
    let mut permutation: Vec<usize> = (0..batch).collect();
    permutation.shuffle(rng);
    Ok(MixupDraw {
        lam,
        permutation,
        alpha,
    })
}

/// `λ·X + (1−λ)·X[perm]`.
pub fn mix_images<T: Scalar>(images: &Tensor<T>, draw: &MixupDraw) -> Result<Tensor<T>> {
    draw.validate(images.n())?;
    let lam = T::of(draw.lam);
    let rest = T::of(1.0 - draw.lam);
    let mut out = Tensor::zeros(images.shape());
    for (i, &j) in draw.permutation.iter().enumerate() {
        let (a, b) = (images.sample(i), images.sample(j));
        for ((o, &x), &y) in out.sample_mut(i).iter_mut().zip(a).zip(b) {
            *o = lam * x + rest * y;
        }
    }
    Ok(out)
}

/// Samples a draw and mixes the batch images. Targets are not mixed.
pub fn make_mixup<T: Scalar, R: Rng + ?Sized>(
    batch: &LabeledBatch<T>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, MixupDraw)> {
    let draw = sample_mixup(batch.images.n(), alpha, rng)?;
    Ok((mix_images(&batch.images, &draw)?, draw))
}

/// `λ·MCE(Ŷ, Y) + (1−λ)·MCE(Ŷ, Y[perm])`.
pub fn mixup_loss<T: Scalar>(pred: &ProbMaps<T>, targets: &LabelBatch, draw: &MixupDraw) -> Result<T> {
    draw.validate(targets.n)?;
    let a = mce_loss(pred, targets)?;
    let b = mce_loss(pred, &targets.permuted(&draw.permutation))?;
    Ok(T::of(draw.lam) * a + T::of(1.0 - draw.lam) * b)
}

pub fn mixup_grad<T: Scalar>(pred: &ProbMaps<T>, targets: &LabelBatch, draw: &MixupDraw, scale: f64) -> Result<Tensor<T>> {
    draw.validate(targets.n)?;
    let a = mce_grad(pred, targets, scale)?;
    let b = mce_grad(pred, &targets.permuted(&draw.permutation), scale)?;
    let (lam, rest) = (T::of(draw.lam), T::of(1.0 - draw.lam));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| lam * x + rest * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Mean binary cross-entropy of sigmoid(logits) against a constant label,
/// in the overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, label: f64) -> T {
    let sum: f64 = logits
        .data()
        .iter()
        .map(|z| {
            let z = z.f64();
            z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
        })
        .sum();
    T::of(sum / logits.data().len() as f64)
}

/// `scale · ∂BCE/∂logits = scale · (σ(z) − y) / M`.
pub fn bce_grad<T: Scalar>(logits: &Tensor<T>, label: f64, scale: f64) -> Tensor<T> {
    let k = scale / logits.data().len() as f64;
    logits.map(|z| T::of(k * (sigmoid(z.f64()) - label)))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Domain label of source-domain outputs.
pub const SOURCE_LABEL: f64 = 0.0;
/// Domain label of target-domain outputs.
pub const TARGET_LABEL: f64 = 1.0;

/// Adversarial loss `BCE(0, D(S(X_b)))`: rewards target-domain predictions
/// the discriminator mistakes for source.
pub fn adv_loss<T: Scalar>(disc: &DomainDiscriminator<T>, predictions_target: &ProbMaps<T>) -> Result<T> {
    let (logits, _) = disc.forward(&predictions_target.probabilities)?;
    Ok(bce_with_logits(&logits, SOURCE_LABEL))
}

/// Discriminator loss with its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscrLoss<T> {
    pub total: T,
    pub source_term: T,
    pub target_term: T,
}

/// `BCE(0, D(S(X_a))) + BCE(1, D(S(X_b)))`.
pub fn discr_loss<T: Scalar>(
    disc: &DomainDiscriminator<T>,
    predictions_source: &ProbMaps<T>,
    predictions_target: &ProbMaps<T>,
) -> Result<DiscrLoss<T>> {
    let (ls, _) = disc.forward(&predictions_source.probabilities)?;
    let (lt, _) = disc.forward(&predictions_target.probabilities)?;
    Ok(discr_loss_from_logits(&ls, &lt))
}

pub fn discr_loss_from_logits<T: Scalar>(source_logits: &Tensor<T>, target_logits: &Tensor<T>) -> DiscrLoss<T> {
    let source_term = bce_with_logits(source_logits, SOURCE_LABEL);
    let target_term = bce_with_logits(target_logits, TARGET_LABEL);
    DiscrLoss {
        total: source_term + target_term,
        source_term,
        target_term,
    }
}

/// `γ_segm·L_segm + γ_adv·L_adv`, plus the auxiliary pair when both
/// auxiliary terms are supplied.
pub fn segmenter_criterion<T: Scalar>(
    l_segm: T,
    l_adv: T,
    weights: &UdaLossWeights,
    aux_l_segm: Option<T>,
    aux_l_adv: Option<T>,
) -> Result<T> {
    let main = T::of(weights.gamma_segm) * l_segm + T::of(weights.gamma_adv) * l_adv;
    match (aux_l_segm, aux_l_adv) {
        (None, None) => Ok(main),
        (Some(s), Some(a)) => Ok(main + T::of(weights.aux_gamma_segm) * s + T::of(weights.aux_gamma_adv) * a),
        _ => bail!(Config, "auxiliary segmentation and adversarial terms must be given together"),
    }
}
