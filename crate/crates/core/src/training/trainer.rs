use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{lr_at_epoch, ExperimentConfig, Which};
use crate::data_model::{Grid, Image, LabelMap, MaskVolume};
use crate::error::{bail, Error, Result};
use crate::evaluation::{volumetric_dsc, DscConvention};
use crate::losses::{
    bce_grad, bce_with_logits, discr_loss_from_logits, mce_grad, mce_loss, mix_images, mixup_grad, mixup_loss,
    sample_mixup, LabelBatch, MixupDraw, SOURCE_LABEL, TARGET_LABEL,
};
use crate::networks::segmenter::SegCache;
use crate::networks::{build_discriminator, build_segmenter, DomainDiscriminator, ProbMaps, SegmentationNetwork};
use crate::nn::ops::softmax_backward;
use crate::nn::{Grads, Mode};
use crate::optim::Adam;
use crate::preprocess::AugmentDraw;
use crate::seed;
use crate::tensor::Tensor;

/// Cartilage and meniscus classes tracked on the validation fold.
pub const VALIDATION_CLASSES: [u8; 4] = [1, 2, 3, 4];

/// One labeled training slice in network space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSlice {
    pub image: Image,
    pub labels: LabelMap,
}

/// A held-out scan in network space.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationScan {
    pub scan_id: String,
    pub images: Vec<Image>,
    pub labels: MaskVolume,
}

/// Losses of one optimizer step; inactive terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub segm: f64,
    pub adv: Option<f64>,
    pub discr: Option<f64>,
    pub aux_segm: Option<f64>,
    pub aux_adv: Option<f64>,
    pub aux_discr: Option<f64>,
}

impl StepLosses {
    fn terms(&self) -> [Option<f64>; 6] {
        [Some(self.segm), self.adv, self.discr, self.aux_segm, self.aux_adv, self.aux_discr]
    }
}

pub const CURVE_TERMS: [&str; 6] = ["segm", "adv", "discr", "aux_segm", "aux_adv", "aux_discr"];

/// Per-epoch record: mean step losses and, when computed, validation DSC
/// per [`VALIDATION_CLASSES`] entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochCurve {
    pub epoch: usize,
    pub lr_segmenter: f64,
    pub lr_discriminator: Option<f64>,
    pub losses: [Option<f64>; 6],
    pub validation_dsc: Option<Vec<f64>>,
}

impl EpochCurve {
    pub fn segm_loss(&self) -> f64 {
        self.losses[0].unwrap_or(f64::NAN)
    }

    /// Mean validation DSC over FC and TC.
    pub fn validation_fc_tc(&self) -> Option<f64> {
        self.validation_dsc.as_ref().map(|v| (v[0] + v[1]) / 2.0)
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

pub fn curves_csv(curves: &[EpochCurve]) -> String {
    let mut out = String::from("epoch,lr_segmenter,lr_discriminator");
    for t in CURVE_TERMS {
        let _ = write!(out, ",{t}_loss");
    }
    for c in VALIDATION_CLASSES {
        let _ = write!(out, ",val_dsc_{}", crate::data_model::CLASS_NAMES[c as usize]);
    }
    out.push('\n');
    for c in curves {
        let _ = write!(out, "{},{:.8e},{}", c.epoch, c.lr_segmenter, opt_cell(c.lr_discriminator));
        for l in c.losses {
            let _ = write!(out, ",{}", opt_cell(l));
        }
        for k in 0..VALIDATION_CLASSES.len() {
            let _ = write!(out, ",{}", opt_cell(c.validation_dsc.as_ref().map(|v| v[k])));
        }
        out.push('\n');
    }
    out
}

fn images_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        bail!(Data, "empty batch");
    };
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.dims() != (h, w) {
            bail!(Shape, "batch mixes {:?} and {:?} slices", (h, w), im.dims());
        }
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// Cycles through the unlabeled target slices in seeded reshuffled passes.
#[derive(Clone, Debug)]
struct TargetStream {
    root: u64,
    fold: usize,
    order: Vec<usize>,
    pos: usize,
    pass: usize,
    len: usize,
}

impl TargetStream {
    fn new(root: u64, fold: usize, len: usize) -> Self {
        let mut s = Self {
            root,
            fold,
            order: Vec::new(),
            pos: 0,
            pass: 0,
            len,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = seed::stream(self.root, &format!("target-order-f{}-p{}", self.fold, self.pass));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Networks, optimizers and data of one cross-validation fold.
pub struct FoldTrainer {
    cfg: ExperimentConfig,
    fold_index: usize,
    pub segmenter: SegmentationNetwork<f32>,
    pub discriminator: Option<DomainDiscriminator<f32>>,
    pub aux_discriminator: Option<DomainDiscriminator<f32>>,
    opt_s: Adam,
    opt_d: Option<Adam>,
    opt_d_aux: Option<Adam>,
    source: Vec<TrainSlice>,
    target: Vec<Image>,
    target_stream: Option<TargetStream>,
}

impl FoldTrainer {
    /// `target` must be non-empty exactly for adaptation settings.
    pub fn new(cfg: &ExperimentConfig, fold_index: usize, source: Vec<TrainSlice>, target: Vec<Image>) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            bail!(Data, "fold {fold_index}: no labeled source slices");
        }
        let s = cfg.setting;
        if s.uses_uda() && target.is_empty() {
            bail!(Data, "fold {fold_index}: {s} needs unlabeled target slices");
        }
        if !s.uses_uda() && !target.is_empty() {
            bail!(Config, "{s} does not use target data");
        }
        let aspp = s.uses_aux().then_some(&cfg.aspp);
        let segmenter = build_segmenter::<f32>(&cfg.segmenter, aspp, seed::derive_seed(cfg.seed, &format!("segmenter-init-f{fold_index}")))?;
        let classes = cfg.segmenter.class_count;
        let discriminator = if s.uses_uda() {
            Some(build_discriminator::<f32>(
                &cfg.discriminator,
                classes,
                seed::derive_seed(cfg.seed, &format!("discriminator-init-f{fold_index}")),
            )?)
        } else {
            None
        };
        let aux_discriminator = if s.uses_aux() {
            Some(build_discriminator::<f32>(
                &cfg.discriminator,
                classes,
                seed::derive_seed(cfg.seed, &format!("aux-discriminator-init-f{fold_index}")),
            )?)
        } else {
            None
        };
        let opt_s = Adam::new(&segmenter.params, cfg.adam, cfg.weight_decay)?;
        let opt_d = match &discriminator {
            Some(d) => Some(Adam::new(&d.params, cfg.adam, cfg.discriminator_weight_decay)?),
            None => None,
        };
        let opt_d_aux = match &aux_discriminator {
            Some(d) => Some(Adam::new(&d.params, cfg.adam, cfg.discriminator_weight_decay)?),
            None => None,
        };
        let target_stream = s.uses_uda().then(|| TargetStream::new(cfg.seed, fold_index, target.len()));
        Ok(Self {
            cfg: cfg.clone(),
            fold_index,
            segmenter,
            discriminator,
            aux_discriminator,
            opt_s,
            opt_d,
            opt_d_aux,
            source,
            target,
            target_stream,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn fold_index(&self) -> usize {
        self.fold_index
    }

    pub fn segmenter_optimizer(&self) -> &Adam {
        &self.opt_s
    }

    pub fn discriminator_optimizer(&self) -> Option<&Adam> {
        self.opt_d.as_ref()
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    /// Source indices of each batch of `epoch`, from a per-epoch shuffle.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        let mut rng = seed::stream(self.cfg.seed, &format!("source-order-f{}-e{epoch}", self.fold_index));
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn source_batch(&self, epoch: usize, batch: usize, items: &[usize]) -> Result<(Tensor<f32>, LabelBatch)> {
        let mut rng = seed::stream(self.cfg.seed, &format!("augment-f{}-e{epoch}-b{batch}", self.fold_index));
        let mut imgs = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for &i in items {
            let Some(s) = self.source.get(i) else {
                bail!(Data, "source index {i} out of range");
            };
            let (im, lb) = AugmentDraw::sample(&self.cfg.augment, &mut rng).apply(&s.image, &s.labels, &self.cfg.augment);
            imgs.push(im);
            labels.push(lb);
        }
        let (h, w) = labels[0].dims();
        let planes: Vec<&[u8]> = labels.iter().map(|l| l.data()).collect();
        Ok((images_tensor(&imgs.iter().collect::<Vec<_>>())?, LabelBatch::from_planes(h, w, &planes)?))
    }

    fn target_batch(&mut self, epoch: usize, batch: usize, n: usize) -> Result<Tensor<f32>> {
        let stream = self.target_stream.as_mut().expect("adaptation setting");
        let idx = stream.take(n);
        let mut rng = seed::stream(self.cfg.seed, &format!("target-augment-f{}-e{epoch}-b{batch}", self.fold_index));
        let imgs: Vec<Image> = idx
            .iter()
            .map(|&i| {
                let im = &self.target[i];
                let blank = Grid::filled(im.rows(), im.cols(), 0u8);
                AugmentDraw::sample(&self.cfg.augment, &mut rng).apply(im, &blank, &self.cfg.augment).0
            })
            .collect();
        images_tensor(&imgs.iter().collect::<Vec<_>>())
    }

    fn mixup_draw(&self, epoch: usize, batch: usize, n: usize) -> Result<MixupDraw> {
        let mut rng = seed::stream(self.cfg.seed, &format!("mixup-f{}-e{epoch}-b{batch}", self.fold_index));
        let mut draw = sample_mixup(n, self.cfg.mixup_alpha, &mut rng)?;
        if let Some(l) = self.cfg.mixup_force_lambda {
            draw.lam = l;
        }
        Ok(draw)
    }

    /// One batch: segmenter update and, for adaptation settings, the
    /// discriminator update that follows it on the same source/target pair.
    pub fn step(&mut self, epoch: usize, batch: usize, items: &[usize]) -> Result<StepLosses> {
        let cfg = self.cfg.clone();
        let setting = cfg.setting;
        let lr_s = lr_at_epoch(&cfg, epoch, Which::Seg)?;
        let (images, targets) = self.source_batch(epoch, batch, items)?;
        let n = items.len();
        let uda = setting.uses_uda();
        let aux = setting.uses_aux();
        let w = &cfg.uda_weights;
        let segm_scale = if uda { w.gamma_segm } else { 1.0 };

        let draw = if setting.uses_mixup() { Some(self.mixup_draw(epoch, batch, n)?) } else { None };
        let input = match &draw {
            Some(d) => mix_images(&images, d)?,
            None => images.clone(),
        };
        let (out, cache) = self.segmenter.forward(&input, Mode::Train, aux)?;
        let cache = cache.expect("train mode keeps caches");
        let pred = ProbMaps::from_logits(&out.logits);
        let (segm, dlogits) = match &draw {
            Some(d) => (mixup_loss(&pred, &targets, d)?.into(), mixup_grad(&pred, &targets, d, segm_scale)?),
            None => (f64::from(mce_loss(&pred, &targets)?), mce_grad(&pred, &targets, segm_scale)?),
        };
        let mut losses = StepLosses {
            segm,
            ..Default::default()
        };
        let aux_pred = out.aux_logits.as_ref().map(ProbMaps::from_logits);
        let daux = match &aux_pred {
            Some(p) => {
                losses.aux_segm = Some(mce_loss(p, &targets)?.into());
                Some(mce_grad(p, &targets, w.aux_gamma_segm)?)
            }
            None => None,
        };
        let mut grads = Grads::zeros_like(&self.segmenter.params);
        self.segmenter.backward(&cache, &dlogits, daux.as_ref(), &mut grads)?;
        drop(cache);

        let mut adaptation = None;
        if uda {
            let xt = self.target_batch(epoch, batch, n)?;
            let (out_t, cache_t) = self.segmenter.forward(&xt, Mode::Train, aux)?;
            let cache_t: SegCache<f32> = cache_t.expect("train mode keeps caches");
            let pt = ProbMaps::from_logits(&out_t.logits);
            let disc = self.discriminator.as_ref().expect("adaptation setting");
            let (lt, dcache_t) = disc.forward(&pt.probabilities)?;
            losses.adv = Some(bce_with_logits(&lt, SOURCE_LABEL).into());
            let dp = disc.backward(&dcache_t, &bce_grad(&lt, SOURCE_LABEL, w.gamma_adv), None);
            let dlt = softmax_backward(&pt.probabilities, &dp);

            let pt_aux = out_t.aux_logits.as_ref().map(ProbMaps::from_logits);
            let mut aux_adapt = None;
            let dlt_aux = match (&pt_aux, &self.aux_discriminator) {
                (Some(p), Some(d)) => {
                    let (l, c) = d.forward(&p.probabilities)?;
                    losses.aux_adv = Some(bce_with_logits(&l, SOURCE_LABEL).into());
                    let dp = d.backward(&c, &bce_grad(&l, SOURCE_LABEL, w.aux_gamma_adv), None);
                    let dz = softmax_backward(&p.probabilities, &dp);
                    aux_adapt = Some((l, c));
                    Some(dz)
                }
                _ => None,
            };
            self.segmenter.backward(&cache_t, &dlt, dlt_aux.as_ref(), &mut grads)?;

            // The discriminator sees unmixed source predictions. With mixup
            // they come from an extra pass that accumulates no gradient.
            let source_probs = if draw.is_some() {
                let (o, _) = self.segmenter.forward(&images, Mode::TrainFrozenStats, false)?;
                ProbMaps::from_logits(&o.logits).probabilities
            } else {
                pred.probabilities.clone()
            };
            let source_aux = aux_pred.map(|p| p.probabilities);
            adaptation = Some((source_probs, lt, dcache_t, source_aux, aux_adapt));
        }

        for v in losses.terms().into_iter().flatten() {
            if !v.is_finite() {
                bail!(Divergence, "fold {}: non-finite loss at epoch {epoch}, batch {batch}", self.fold_index);
            }
        }
        if !grads.all_finite() {
            bail!(Divergence, "fold {}: non-finite gradient at epoch {epoch}, batch {batch}", self.fold_index);
        }
        self.opt_s.step(&mut self.segmenter.params, &grads, lr_s);

        if let Some((source_probs, lt, dcache_t, source_aux, aux_adapt)) = adaptation {
            let lr_d = lr_at_epoch(&cfg, epoch, Which::Disc)?;
            let disc = self.discriminator.as_mut().expect("adaptation setting");
            losses.discr = Some(discriminator_update(disc, self.opt_d.as_mut().expect("paired optimizer"), &source_probs, &lt, &dcache_t, lr_d)?);
            if let (Some(src), Some((l, c)), Some(d)) = (source_aux, aux_adapt, self.aux_discriminator.as_mut()) {
                let opt = self.opt_d_aux.as_mut().expect("paired optimizer");
                losses.aux_discr = Some(discriminator_update(d, opt, &src, &l, &c, lr_d)?);
            }
        }
        Ok(losses)
    }

    /// Runs every batch of `epoch` and returns the mean losses.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochCurve> {
        let batches = self.epoch_batches(epoch);
        let mut sums = [0.0f64; 6];
        let mut seen = [false; 6];
        for (b, items) in batches.iter().enumerate() {
            let l = self.step(epoch, b, items)?;
            for (k, t) in l.terms().into_iter().enumerate() {
                if let Some(v) = t {
                    sums[k] += v;
                    seen[k] = true;
                }
            }
        }
        let nb = batches.len() as f64;
        let mut losses = [None; 6];
        for k in 0..6 {
            if seen[k] {
                losses[k] = Some(sums[k] / nb);
            }
        }
        Ok(EpochCurve {
            epoch,
            lr_segmenter: lr_at_epoch(&self.cfg, epoch, Which::Seg)?,
            lr_discriminator: if self.cfg.setting.uses_uda() { Some(lr_at_epoch(&self.cfg, epoch, Which::Disc)?) } else { None },
            losses,
            validation_dsc: None,
        })
    }
}

/// Discriminator step on detached predictions. The target logits and cache
/// come from the segmenter step, which left the discriminator unchanged.
fn discriminator_update(
    disc: &mut DomainDiscriminator<f32>,
    opt: &mut Adam,
    source_probs: &Tensor<f32>,
    target_logits: &Tensor<f32>,
    target_cache: &crate::networks::discriminator::DiscCache<f32>,
    lr: f64,
) -> Result<f64> {
    let (ls, cs) = disc.forward(source_probs)?;
    let loss = discr_loss_from_logits(&ls, target_logits);
    let total = f64::from(loss.total);
    if !total.is_finite() {
        bail!(Divergence, "non-finite discriminator loss");
    }
    let mut g = Grads::zeros_like(&disc.params);
    disc.backward(&cs, &bce_grad(&ls, SOURCE_LABEL, 1.0), Some(&mut g));
    disc.backward(target_cache, &bce_grad(target_logits, TARGET_LABEL, 1.0), Some(&mut g));
    opt.step(&mut disc.params, &g, lr);
    Ok(total)
}

/// Eval-mode argmax labels for a stack of slices, predicted in chunks.
pub fn predict_labels(net: &mut SegmentationNetwork<f32>, images: &[Image], batch: usize) -> Result<MaskVolume> {
    let mut planes = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = images_tensor(&chunk.iter().collect::<Vec<_>>())?;
        let p = net.predict(&x, false)?;
        planes.extend(p.argmax());
    }
    let (h, w) = images.first().map(|i| i.dims()).unwrap_or((0, 0));
    MaskVolume::new(images.len(), h, w, planes.concat())
}

/// Volumetric DSC per [`VALIDATION_CLASSES`] entry, averaged over scans.
pub fn validation_dsc(net: &mut SegmentationNetwork<f32>, scans: &[ValidationScan], batch: usize) -> Result<Vec<f64>> {
    if scans.is_empty() {
        bail!(Data, "no validation scans");
    }
    let mut sums = vec![0.0; VALIDATION_CLASSES.len()];
    for s in scans {
        let pred = predict_labels(net, &s.images, batch)?;
        for (k, &c) in VALIDATION_CLASSES.iter().enumerate() {
            sums[k] += volumetric_dsc(&pred, &s.labels, c, DscConvention::default())?;
        }
    }
    Ok(sums.into_iter().map(|v| v / scans.len() as f64).collect())
}

/// Outcome of training one fold.
#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub fold_index: usize,
    pub segmenter: SegmentationNetwork<f32>,
    pub discriminator: Option<DomainDiscriminator<f32>>,
    pub aux_discriminator: Option<DomainDiscriminator<f32>>,
    pub curves: Vec<EpochCurve>,
    pub segmenter_weight_decay: f64,
    pub discriminator_weight_decay: Option<f64>,
    pub segmenter_checkpoint: Option<PathBuf>,
    pub discriminator_checkpoint: Option<PathBuf>,
    pub aux_discriminator_checkpoint: Option<PathBuf>,
}

impl TrainedFold {
    /// Digest of the final segmenter weights and batch-norm statistics.
    pub fn segmenter_digest(&self) -> String {
        self.segmenter.params.digest(true)
    }

    pub fn final_validation_fc_tc(&self) -> Option<f64> {
        self.curves.last().and_then(EpochCurve::validation_fc_tc)
    }
}

/// Trains one fold for the configured number of epochs. With `out_dir`,
/// checkpoints go to `segmenter/`, `discriminator/`, `aux_discriminator/`
/// and the curves to `curves.csv`.
pub fn train_fold(
    cfg: &ExperimentConfig,
    fold_index: usize,
    source: Vec<TrainSlice>,
    target: Vec<Image>,
    validation: &[ValidationScan],
    out_dir: Option<&Path>,
) -> Result<TrainedFold> {
    let mut t = FoldTrainer::new(cfg, fold_index, source, target)?;
    let mut curves = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let mut c = t.run_epoch(e)?;
        if !validation.is_empty() && (cfg.validate_each_epoch || e + 1 == cfg.epochs) {
            c.validation_dsc = Some(validation_dsc(&mut t.segmenter, validation, cfg.batch_size)?);
        }
        curves.push(c);
    }
    let mut fold = TrainedFold {
        fold_index,
        segmenter_weight_decay: t.opt_s.weight_decay(),
        discriminator_weight_decay: t.opt_d.as_ref().map(Adam::weight_decay),
        segmenter: t.segmenter,
        discriminator: t.discriminator,
        aux_discriminator: t.aux_discriminator,
        curves,
        segmenter_checkpoint: None,
        discriminator_checkpoint: None,
        aux_discriminator_checkpoint: None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let last = cfg.epochs - 1;
        let p = dir.join("segmenter");
        fold.segmenter.save(&p, last, cfg.seed)?;
        fold.segmenter_checkpoint = Some(p);
        if let Some(d) = &fold.discriminator {
            let p = dir.join("discriminator");
            d.save(&p, last, cfg.seed)?;
            fold.discriminator_checkpoint = Some(p);
        }
        if let Some(d) = &fold.aux_discriminator {
            let p = dir.join("aux_discriminator");
            d.save(&p, last, cfg.seed)?;
            fold.aux_discriminator_checkpoint = Some(p);
        }
        let p = dir.join("curves.csv");
        fs::write(&p, curves_csv(&fold.curves)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(fold)
}
