//! U-Net segmenter with bilinear upsampling and an optional ASPP auxiliary
//! head on the penultimate decoder representation.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::networks::prediction::{PredictionBatch, ProbMaps};
use crate::nn::ops::{
    concat_channels, crop, crop_backward, max_pool2, max_pool2_backward, reflect_pad, relu, relu_backward,
    resize_bilinear, resize_bilinear_backward, split_channels,
};
use crate::nn::{BatchNorm2d, BnCache, Conv2d, ConvGeometry, Grads, Mode, ParamSet};
use crate::seed::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub base_filters: usize,
    /// Number of resolution levels (downsamplings = depth − 1).
    pub depth: usize,
    pub class_count: usize,
    pub input_channels: usize,
    pub upsample_mode: UpsampleMode,
    pub batch_norm: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            base_filters: 24,
            depth: 6,
            class_count: 5,
            input_channels: 1,
            upsample_mode: UpsampleMode::Bilinear,
            batch_norm: true,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            bail!(Config, "depth must be >= 2, got {}", self.depth);
        }
        if self.base_filters < 1 {
            bail!(Config, "base_filters must be >= 1");
        }
        if self.class_count < 2 {
            bail!(Config, "class_count must be >= 2, got {}", self.class_count);
        }
        if self.input_channels < 1 {
            bail!(Config, "input_channels must be >= 1");
        }
        Ok(())
    }

    /// Channel count of encoder level `d`.
    pub fn level_channels(&self, d: usize) -> usize {
        self.base_filters << d
    }

    /// Spatial sizes must be multiples of this after internal padding.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsppConfig {
    pub dilation_rates: Vec<usize>,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self {
            dilation_rates: vec![6, 12, 18, 24],
        }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            bail!(Config, "ASPP dilation rates must be positive and non-empty");
        }
        let mut r = self.dilation_rates.clone();
        r.sort_unstable();
        r.dedup();
        if r.len() != self.dilation_rates.len() {
            bail!(Config, "ASPP dilation rates must be distinct");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: Option<BatchNorm2d>,
    conv2: Conv2d,
    bn2: Option<BatchNorm2d>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    x: Tensor<T>,
    bn1: Option<BnCache<T>>,
    a1: Tensor<T>,
    bn2: Option<BnCache<T>>,
    a2: Tensor<T>,
}

impl ConvBlock {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, bn: bool, rng: &mut Rng) -> Self {
        let gain = 2f64.sqrt();
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), ConvGeometry::same3x3(cin, cout), !bn, rng, gain);
        let bn1 = bn.then(|| BatchNorm2d::new(ps, &format!("{name}.bn1"), cout));
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), ConvGeometry::same3x3(cout, cout), !bn, rng, gain);
        let bn2 = bn.then(|| BatchNorm2d::new(ps, &format!("{name}.bn2"), cout));
        Self { conv1, bn1, conv2, bn2 }
    }

    fn norm<T: Scalar>(
        bn: &Option<BatchNorm2d>,
        ps: &mut ParamSet<T>,
        z: Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, Option<BnCache<T>>) {
        match (bn, mode) {
            (None, _) => (z, None),
            (Some(b), Mode::Eval) => (b.forward_eval(ps, &z), None),
            (Some(b), m) => {
                let (y, c) = b.forward_train(ps, &z, m == Mode::Train);
                (y, Some(c))
            }
        }
    }

    fn forward<T: Scalar>(
        &self,
        ps: &mut ParamSet<T>,
        x: Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
        let z1 = self.conv1.forward(ps, &x)?;
        let (n1, bn1) = Self::norm(&self.bn1, ps, z1, mode);
        let a1 = relu(&n1);
        drop(n1);
        let z2 = self.conv2.forward(ps, &a1)?;
        let (n2, bn2) = Self::norm(&self.bn2, ps, z2, mode);
        let a2 = relu(&n2);
        if mode.is_train() {
            let cache = BlockCache {
                x,
                bn1,
                a1,
                bn2,
                a2: a2.clone(),
            };
            Ok((a2, Some(cache)))
        } else {
            Ok((a2, None))
        }
    }

    fn backward<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        c: &BlockCache<T>,
        da2: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut d = relu_backward(&c.a2, da2);
        if let (Some(bn), Some(bc)) = (&self.bn2, &c.bn2) {
            d = bn.backward(ps, bc, &d, Some(grads));
        }
        let da1 = self.conv2.backward(ps, &c.a1, &d, Some(grads), true).expect("dx requested");
        let mut d = relu_backward(&c.a1, &da1);
        if let (Some(bn), Some(bc)) = (&self.bn1, &c.bn1) {
            d = bn.backward(ps, bc, &d, Some(grads));
        }
        self.conv1.backward(ps, &c.x, &d, Some(grads), need_dx)
    }
}

#[derive(Clone, Debug)]
struct Aspp {
    branches: Vec<Conv2d>,
}

/// Activation record of one segmenter forward pass.
#[derive(Clone, Debug)]
pub struct SegCache<T> {
    pad: Padding,
    enc: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u32>, (usize, usize))>,
    dec: Vec<BlockCache<T>>,
    /// (h, w) of the tensor entering each decoder upsample, by level.
    level_hw: Vec<(usize, usize)>,
    head_in: Tensor<T>,
    aux_in: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
struct Padding {
    top: usize,
    left: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
}

/// Raw segmenter outputs before softmax.
#[derive(Clone, Debug)]
pub struct SegLogits<T> {
    pub logits: Tensor<T>,
    pub aux_logits: Option<Tensor<T>>,
}

impl<T: Scalar> SegLogits<T> {
    pub fn to_predictions(&self) -> PredictionBatch<T> {
        PredictionBatch {
            main: ProbMaps::from_logits(&self.logits),
            aux: self.aux_logits.as_ref().map(ProbMaps::from_logits),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationNetwork<T> {
    cfg: SegNetConfig,
    aspp_cfg: Option<AsppConfig>,
    pub params: ParamSet<T>,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    aspp: Option<Aspp>,
}

/// Builds a segmenter; `aspp` adds the auxiliary head used for two-level
/// adaptation. Initial weights are a pure function of `init_seed`.
pub fn build_segmenter<T: Scalar>(
    cfg: &SegNetConfig,
    aspp: Option<&AsppConfig>,
    init_seed: u64,
) -> Result<SegmentationNetwork<T>> {
    cfg.validate()?;
    if let Some(a) = aspp {
        a.validate()?;
    }
    let aspp_cfg = aspp.cloned();
    let mut rng = crate::seed::stream(init_seed, "segmenter-init");
    let mut ps = ParamSet::new();
    let bn = cfg.batch_norm;
    let mut enc = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let cin = if d == 0 { cfg.input_channels } else { cfg.level_channels(d - 1) };
        enc.push(ConvBlock::new(&mut ps, &format!("enc{d}"), cin, cfg.level_channels(d), bn, &mut rng));
    }
    let mut dec = Vec::with_capacity(cfg.depth - 1);
    for d in 0..cfg.depth - 1 {
        let cin = cfg.level_channels(d + 1) + cfg.level_channels(d);
        dec.push(ConvBlock::new(&mut ps, &format!("dec{d}"), cin, cfg.level_channels(d), bn, &mut rng));
    }
    let head = Conv2d::new(
        &mut ps,
        "head",
        ConvGeometry {
            in_ch: cfg.base_filters,
            out_ch: cfg.class_count,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
        },
        true,
        &mut rng,
        1.0,
    );
    let aspp = aspp.map(|a| Aspp {
        branches: a
            .dilation_rates
            .iter()
            .map(|&r| {
                Conv2d::new(
                    &mut ps,
                    &format!("aspp.rate{r}"),
                    ConvGeometry {
                        in_ch: cfg.level_channels(1),
                        out_ch: cfg.class_count,
                        kernel: 3,
                        stride: 1,
                        padding: r,
                        dilation: r,
                    },
                    true,
                    &mut rng,
                    1.0,
                )
            })
            .collect(),
    });
    Ok(SegmentationNetwork {
        cfg: cfg.clone(),
        aspp_cfg,
        params: ps,
        enc,
        dec,
        head,
        aspp,
    })
}

impl<T: Scalar> SegmentationNetwork<T> {
    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn aspp_config(&self) -> Option<&AsppConfig> {
        self.aspp_cfg.as_ref()
    }

    pub fn has_aux(&self) -> bool {
        self.aspp.is_some()
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> SegmentationNetwork<U> {
        SegmentationNetwork {
            cfg: self.cfg.clone(),
            aspp_cfg: self.aspp_cfg.clone(),
            params: self.params.cast(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            head: self.head.clone(),
            aspp: self.aspp.clone(),
        }
    }

    fn padding_for(&self, h: usize, w: usize) -> Padding {
        let m = self.cfg.size_multiple();
        let ph = h.div_ceil(m) * m;
        let pw = w.div_ceil(m) * m;
        Padding {
            top: (ph - h) / 2,
            left: (pw - w) / 2,
            ph,
            pw,
            h,
            w,
        }
    }

    /// Forward pass. Inputs whose size is not a multiple of
    /// `2^(depth-1)` are reflection-padded and outputs cropped back.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        with_aux: bool,
    ) -> Result<(SegLogits<T>, Option<SegCache<T>>)> {
        if x.c() != self.cfg.input_channels {
            bail!(Shape, "segmenter expects {} input channels, got {}", self.cfg.input_channels, x.c());
        }
        if with_aux && self.aspp.is_none() {
            bail!(Config, "auxiliary output requested from a segmenter without an ASPP head");
        }
        let pad = self.padding_for(x.h(), x.w());
        if pad.ph - pad.h > pad.h || pad.pw - pad.w > pad.w {
            bail!(
                Config,
                "input {}x{} too small to pad to a multiple of {}",
                x.h(),
                x.w(),
                self.cfg.size_multiple()
            );
        }
        let xp = if (pad.ph, pad.pw) == (pad.h, pad.w) {
            x.clone()
        } else {
            reflect_pad(x, pad.top, pad.ph - pad.h - pad.top, pad.left, pad.pw - pad.w - pad.left)
        };
        let train = mode.is_train();
        let ps = &mut self.params;
        let depth = self.cfg.depth;

        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = xp;
        for d in 0..depth {
            if d > 0 {
                let hw = (cur.h(), cur.w());
                let (p, idx) = max_pool2(&cur);
                if train {
                    pools.push((idx, hw));
                }
                cur = p;
            }
            let (out, cache) = self.enc[d].forward(ps, cur, mode)?;
            enc_caches.extend(cache);
            skips.push(out.clone());
            cur = out;
        }
        skips.pop();

        let mut dec_caches: Vec<Option<BlockCache<T>>> = vec![None; depth - 1];
        let mut level_hw = vec![(0, 0); depth - 1];
        let mut aux_in = None;
        for d in (0..depth - 1).rev() {
            if d == 0 && with_aux {
                aux_in = Some(cur.clone());
            }
            level_hw[d] = (cur.h(), cur.w());
            let skip = skips.pop().expect("one skip per decoder level");
            let up = resize_bilinear(&cur, skip.h(), skip.w());
            let cat = concat_channels(&up, &skip)?;
            let (out, cache) = self.dec[d].forward(ps, cat, mode)?;
            dec_caches[d] = cache;
            cur = out;
        }
        let logits_p = self.head.forward(ps, &cur)?;
        let logits = crop(&logits_p, pad.top, pad.left, pad.h, pad.w);

        let aux_logits = match (&self.aspp, &aux_in) {
            (Some(aspp), Some(a)) if with_aux => {
                let mut sum: Option<Tensor<T>> = None;
                for b in &aspp.branches {
                    let y = b.forward(ps, a)?;
                    match &mut sum {
                        None => sum = Some(y),
                        Some(s) => s.add_scaled(&y, T::one()),
                    }
                }
                let up = resize_bilinear(&sum.expect("at least one branch"), pad.ph, pad.pw);
                Some(crop(&up, pad.top, pad.left, pad.h, pad.w))
            }
            _ => None,
        };

        let cache = train.then(|| SegCache {
            pad,
            enc: enc_caches,
            pools,
            dec: dec_caches.into_iter().map(|c| c.expect("train mode caches")).collect(),
            level_hw,
            head_in: cur,
            aux_in,
        });
        Ok((SegLogits { logits, aux_logits }, cache))
    }

    /// Eval-mode prediction.
    pub fn predict(&mut self, x: &Tensor<T>, with_aux: bool) -> Result<PredictionBatch<T>> {
        let (out, _) = self.forward(x, Mode::Eval, with_aux)?;
        Ok(out.to_predictions())
    }

    /// Accumulates parameter gradients for upstream gradients on the
    /// (cropped) logits and, optionally, the auxiliary logits.
    pub fn backward(
        &self,
        cache: &SegCache<T>,
        dlogits: &Tensor<T>,
        daux_logits: Option<&Tensor<T>>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let ps = &self.params;
        let pad = cache.pad;
        let depth = self.cfg.depth;
        if dlogits.h() != pad.h || dlogits.w() != pad.w {
            bail!(Shape, "logit gradient {:?} does not match forward output", dlogits.shape());
        }
        let dhead = crop_backward(dlogits, pad.top, pad.left, pad.ph, pad.pw);
        let mut dcur = self
            .head
            .backward(ps, &cache.head_in, &dhead, Some(grads), true)
            .expect("dx requested");

        let daux_in = match (daux_logits, &self.aspp, &cache.aux_in) {
            (Some(da), Some(aspp), Some(a)) => {
                let dup = crop_backward(da, pad.top, pad.left, pad.ph, pad.pw);
                let dsum = resize_bilinear_backward(&dup, a.h(), a.w());
                let mut acc: Option<Tensor<T>> = None;
                for b in &aspp.branches {
                    let dx = b.backward(ps, a, &dsum, Some(grads), true).expect("dx requested");
                    match &mut acc {
                        None => acc = Some(dx),
                        Some(s) => s.add_scaled(&dx, T::one()),
                    }
                }
                acc
            }
            (Some(_), _, _) => bail!(Shape, "aux gradient given but the forward pass had no aux output"),
            _ => None,
        };

        let mut dskips: Vec<Tensor<T>> = Vec::with_capacity(depth - 1);
        for d in 0..depth - 1 {
            let dcat = self.dec[d]
                .backward(ps, &cache.dec[d], &dcur, grads, true)
                .expect("dx requested");
            let up_ch = self.cfg.level_channels(d + 1);
            let (dup, dskip) = split_channels(&dcat, up_ch);
            dskips.push(dskip);
            let (h, w) = cache.level_hw[d];
            dcur = resize_bilinear_backward(&dup, h, w);
            if d == 0 {
                if let Some(da) = &daux_in {
                    dcur.add_scaled(da, T::one());
                }
            }
        }
        for d in (0..depth).rev() {
            if d < depth - 1 {
                dcur.add_scaled(&dskips[d], T::one());
            }
            let dx = self.enc[d].backward(ps, &cache.enc[d], &dcur, grads, d > 0);
            if d > 0 {
                let (idx, hw) = &cache.pools[d - 1];
                dcur = max_pool2_backward(idx, &dx.expect("dx requested"), *hw);
            }
        }
        Ok(())
    }

    /// Closed-form trainable parameter count for this architecture.
    pub fn expected_param_count(cfg: &SegNetConfig, aspp: Option<&AsppConfig>) -> usize {
        let bn = cfg.batch_norm;
        let block = |cin: usize, cout: usize| {
            let c1 = ConvGeometry::same3x3(cin, cout).param_count(!bn);
            let c2 = ConvGeometry::same3x3(cout, cout).param_count(!bn);
            c1 + c2 + if bn { 4 * cout } else { 0 }
        };
        let mut total = 0;
        for d in 0..cfg.depth {
            let cin = if d == 0 { cfg.input_channels } else { cfg.level_channels(d - 1) };
            total += block(cin, cfg.level_channels(d));
        }
        for d in 0..cfg.depth - 1 {
            total += block(cfg.level_channels(d + 1) + cfg.level_channels(d), cfg.level_channels(d));
        }
        total += cfg.base_filters * cfg.class_count + cfg.class_count;
        if let Some(a) = aspp {
            total += a.dilation_rates.len() * (cfg.level_channels(1) * cfg.class_count * 9 + cfg.class_count);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegNetConfig {
        SegNetConfig {
            base_filters: 4,
            depth: 2,
            ..SegNetConfig::default()
        }
    }

    #[test]
    fn tiny_param_count_by_hand() {
        // depth 2, base 4, BN on, 1 input channel, 5 classes:
        // each BN holds gamma and beta
        // enc0: 1*4*9 + 4*4*9 + 2*2*4   = 36 + 144 + 16     = 196
        // enc1: 4*8*9 + 8*8*9 + 2*2*8   = 288 + 576 + 32    = 896
        // dec0: 12*4*9 + 4*4*9 + 2*2*4  = 432 + 144 + 16    = 592
        // head: 4*5 + 5                                     = 25
        let net = build_segmenter::<f64>(&tiny(), None, 0).unwrap();
        assert_eq!(net.params.trainable_count(), 196 + 896 + 592 + 25);
        assert_eq!(SegmentationNetwork::<f64>::expected_param_count(&tiny(), None), 1709);
    }

    #[test]
    fn doubling_rule() {
        let cfg = SegNetConfig::default();
        for d in 0..cfg.depth {
            assert_eq!(cfg.level_channels(d), 24 * (1 << d));
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_segmenter::<f32>(&tiny(), None, 9).unwrap();
        let b = build_segmenter::<f32>(&tiny(), None, 9).unwrap();
        let c = build_segmenter::<f32>(&tiny(), None, 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_shapes_and_padding() {
        let cfg = SegNetConfig {
            base_filters: 2,
            depth: 3,
            ..SegNetConfig::default()
        };
        let mut net = build_segmenter::<f32>(&cfg, Some(&AsppConfig { dilation_rates: vec![1, 2] }), 1).unwrap();
        let x = Tensor::full([2, 1, 18, 22], 0.5f32);
        let (out, cache) = net.forward(&x, Mode::Train, true).unwrap();
        assert_eq!(out.logits.shape(), [2, 5, 18, 22]);
        assert_eq!(out.aux_logits.as_ref().unwrap().shape(), [2, 5, 18, 22]);
        assert!(cache.is_some());
        let pred = out.to_predictions();
        pred.check().unwrap();
    }

    #[test]
    fn aux_requires_aspp() {
        let mut net = build_segmenter::<f32>(&tiny(), None, 1).unwrap();
        let x = Tensor::zeros([1, 1, 16, 16]);
        assert!(net.forward(&x, Mode::Eval, true).is_err());
    }
}
