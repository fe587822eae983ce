//! Deterministic slice preprocessing and training-time augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Grid, Image, LabelMap, MaskVolume, Volume};
use crate::error::{bail, Result};
use crate::nn::ops::resize_plane;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PercentileScope {
    Slice,
    Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing_mm: (f64, f64),
    pub pct_low: f64,
    pub pct_high: f64,
    pub crop_size: (usize, usize),
    pub percentile_scope: PercentileScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing_mm: (0.37, 0.37),
            pct_low: 10.0,
            pct_high: 99.0,
            crop_size: (300, 300),
            percentile_scope: PercentileScope::Slice,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.pct_low && self.pct_low < self.pct_high && self.pct_high <= 100.0) {
            bail!(Config, "percentiles must satisfy 0 <= low < high <= 100");
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            bail!(Config, "crop size must be positive");
        }
        if !(self.target_spacing_mm.0 > 0.0 && self.target_spacing_mm.1 > 0.0) {
            bail!(Config, "target spacing must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub downup_prob: f64,
    pub downup_scale_range: (f64, f64),
    pub bilateral_prob: f64,
    /// (spatial sigma in px, range sigma in intensity units)
    pub bilateral_params: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            gamma_prob: 0.5,
            gamma_range: (0.8, 1.25),
            downup_prob: 0.5,
            downup_scale_range: (0.5, 0.9),
            bilateral_prob: 0.5,
            bilateral_params: (1.5, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            gamma_prob: 0.0,
            downup_prob: 0.0,
            bilateral_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.gamma_prob, self.downup_prob, self.bilateral_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!(Config, "augmentation probabilities must lie in [0, 1]");
        }
        let (g0, g1) = self.gamma_range;
        if !(g0 > 0.0 && g0 <= g1) {
            bail!(Config, "gamma range must be positive and ordered");
        }
        let (s0, s1) = self.downup_scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s0 < 1.0 && s1 <= 1.0) {
            bail!(Config, "down-up scale range must be ordered within (0, 1]");
        }
        if !(self.bilateral_params.0 > 0.0 && self.bilateral_params.1 > 0.0) {
            bail!(Config, "bilateral sigmas must be positive");
        }
        Ok(())
    }
}

fn resampled_dims(dims: (usize, usize), from: (f64, f64), to: (f64, f64)) -> Result<(usize, usize)> {
    if !(from.0 > 0.0 && from.1 > 0.0 && to.0 > 0.0 && to.1 > 0.0) {
        bail!(Config, "spacings must be positive");
    }
    let r = (dims.0 as f64 * from.0 / to.0).round() as usize;
    let c = (dims.1 as f64 * from.1 / to.1).round() as usize;
    Ok((r.max(1), c.max(1)))
}

/// Bilinear resampling to a new pixel spacing; output dims are
/// `round(dim · from / to)`.
pub fn resample_slice(image: &Image, from: (f64, f64), to: (f64, f64)) -> Result<Image> {
    let (r, c) = resampled_dims(image.dims(), from, to)?;
    if (r, c) == image.dims() {
        return Ok(image.clone());
    }
    Grid::new(r, c, resize_plane(image.data(), image.rows(), image.cols(), r, c))
}

/// Nearest-neighbour resampling for label maps.
pub fn resample_labels(labels: &LabelMap, from: (f64, f64), to: (f64, f64)) -> Result<LabelMap> {
    let (r, c) = resampled_dims(labels.dims(), from, to)?;
    let (ir, ic) = labels.dims();
    let near = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Ok(Grid::from_fn(r, c, |y, x| labels.get(near(y, r, ir), near(x, c, ic))))
}

/// Linear-interpolated empirical percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f32], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let f = h - lo as f64;
    sorted[lo] as f64 + f * (sorted[hi] as f64 - sorted[lo] as f64)
}

pub fn percentiles(values: &[f32], low: f64, high: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    (percentile_sorted(&v, low), percentile_sorted(&v, high))
}

/// Result of intensity truncation; `degenerate` is set when the two
/// percentiles coincide, in which case the image is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncated {
    pub image: Image,
    pub degenerate: bool,
}

/// Clips to the slice's `[pct_low, pct_high]` percentiles and rescales to [0, 1].
pub fn truncate_intensities(image: &Image, pct_low: f64, pct_high: f64) -> Result<Truncated> {
    if !(0.0 <= pct_low && pct_low < pct_high && pct_high <= 100.0) {
        bail!(Config, "percentiles must satisfy 0 <= low < high <= 100");
    }
    let (lo, hi) = percentiles(image.data(), pct_low, pct_high);
    Ok(truncate_between(image, lo, hi))
}

pub fn truncate_between(image: &Image, lo: f64, hi: f64) -> Truncated {
    if hi <= lo {
        return Truncated {
            image: image.map(|_| 0.0),
            degenerate: true,
        };
    }
    let span = hi - lo;
    Truncated {
        image: image.map(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32),
        degenerate: false,
    }
}

/// Centre crop with symmetric zero padding where the input is smaller.
pub fn center_crop<T: Copy + Default>(image: &Grid<T>, size: (usize, usize)) -> Grid<T> {
    let (ir, ic) = image.dims();
    let (or, oc) = size;
    let src_r0 = ir.saturating_sub(or) / 2;
    let src_c0 = ic.saturating_sub(oc) / 2;
    let dst_r0 = or.saturating_sub(ir) / 2;
    let dst_c0 = oc.saturating_sub(ic) / 2;
    let rows = ir.min(or);
    let cols = ic.min(oc);
    let mut out = Grid::filled(or, oc, T::default());
    for r in 0..rows {
        for c in 0..cols {
            out.set(dst_r0 + r, dst_c0 + c, image.get(src_r0 + r, src_c0 + c));
        }
    }
    out
}

/// One preprocessed slice ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlice {
    pub image: Image,
    pub labels: Option<LabelMap>,
    pub degenerate: bool,
}

/// resample → truncate → crop for every slice of a scan.
pub fn preprocess_volume(vol: &Volume, mask: Option<&MaskVolume>, cfg: &PreprocessConfig) -> Result<Vec<PreparedSlice>> {
    cfg.validate()?;
    if let Some(m) = mask {
        m.check_pairs_with(vol)?;
    }
    let from = vol.pixel_spacing();
    let resampled = par::map_range(vol.slice_count(), |i| resample_slice(&vol.slice_image(i), from, cfg.target_spacing_mm))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let volume_bounds = match cfg.percentile_scope {
        PercentileScope::Slice => None,
        PercentileScope::Volume => {
            let all: Vec<f32> = resampled.iter().flat_map(|s| s.data().iter().copied()).collect();
            Some(percentiles(&all, cfg.pct_low, cfg.pct_high))
        }
    };
    par::map_range(vol.slice_count(), |i| {
        let t = match volume_bounds {
            Some((lo, hi)) => truncate_between(&resampled[i], lo, hi),
            None => truncate_intensities(&resampled[i], cfg.pct_low, cfg.pct_high)?,
        };
        let labels = match mask {
            Some(m) => Some(center_crop(&resample_labels(&m.slice_map(i), from, cfg.target_spacing_mm)?, cfg.crop_size)),
            None => None,
        };
        Ok(PreparedSlice {
            image: center_crop(&t.image, cfg.crop_size),
            labels,
            degenerate: t.degenerate,
        })
    })
    .into_iter()
    .collect()
}

/// Mirrors columns.
pub fn flip_lr<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let c = g.cols();
    Grid::from_fn(g.rows(), c, |y, x| g.get(y, c - 1 - x))
}

pub fn gamma_correct(image: &Image, gamma: f64) -> Image {
    if gamma == 1.0 {
        return image.clone();
    }
    let g = gamma as f32;
    image.map(|v| v.max(0.0).powf(g))
}

/// Bilinear downscale by `scale` then back to the original size.
pub fn down_up(image: &Image, scale: f64) -> Image {
    let (r, c) = image.dims();
    let (sr, sc) = (((r as f64 * scale).round() as usize).max(1), ((c as f64 * scale).round() as usize).max(1));
    let small = resize_plane(image.data(), r, c, sr, sc);
    Grid::new(r, c, resize_plane(&small, sr, sc, r, c)).expect("same dims")
}

/// Edge-preserving smoothing with Gaussian spatial and range kernels.
pub fn bilateral(image: &Image, spatial_sigma: f64, range_sigma: f64) -> Image {
    let (rows, cols) = image.dims();
    let rad = (2.0 * spatial_sigma).ceil() as isize;
    let mut spatial = Vec::new();
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            let d2 = (dy * dy + dx * dx) as f64;
            spatial.push((dy, dx, (-d2 / (2.0 * spatial_sigma * spatial_sigma)).exp()));
        }
    }
    let inv_r = 1.0 / (2.0 * range_sigma * range_sigma);
    Grid::from_fn(rows, cols, |y, x| {
        let centre = image.get(y, x) as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for &(dy, dx, ws) in &spatial {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= rows as isize || xx >= cols as isize {
                continue;
            }
            let v = image.get(yy as usize, xx as usize) as f64;
            let w = ws * (-(v - centre) * (v - centre) * inv_r).exp();
            num += w * v;
            den += w;
        }
        (num / den) as f32
    })
}

/// The random choices of one augmentation call, drawn in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub gamma: Option<f64>,
    pub downup: Option<f64>,
    pub bilateral: bool,
}

impl AugmentDraw {
    /// Always consumes the same number of random values so later draws do
    /// not depend on which augmentations fired.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let u_flip: f64 = rng.random();
        let u_gamma: f64 = rng.random();
        let v_gamma: f64 = rng.random();
        let u_du: f64 = rng.random();
        let v_du: f64 = rng.random();
        let u_bil: f64 = rng.random();
        // log-uniform gamma so the range is symmetric around 1 in ratio
        let (g0, g1) = cfg.gamma_range;
        let gamma = (g0.ln() + v_gamma * (g1.ln() - g0.ln())).exp();
        let (s0, s1) = cfg.downup_scale_range;
        Self {
            flip: u_flip < cfg.flip_prob,
            gamma: (u_gamma < cfg.gamma_prob).then_some(gamma),
            downup: (u_du < cfg.downup_prob).then_some(s0 + v_du * (s1 - s0)),
            bilateral: u_bil < cfg.bilateral_prob,
        }
    }

    pub fn apply(&self, image: &Image, mask: &LabelMap, cfg: &AugmentConfig) -> (Image, LabelMap) {
        let (mut img, m) = if self.flip {
            (flip_lr(image), flip_lr(mask))
        } else {
            (image.clone(), mask.clone())
        };
        if let Some(g) = self.gamma {
            img = gamma_correct(&img, g);
        }
        if let Some(s) = self.downup {
            img = down_up(&img, s);
        }
        if self.bilateral {
            img = bilateral(&img, cfg.bilateral_params.0, cfg.bilateral_params.1);
        }
        (img, m)
    }
}

/// Flip applies to image and mask jointly; intensity transforms to the image only.
pub fn augment<R: Rng + ?Sized>(image: &Image, mask: &LabelMap, cfg: &AugmentConfig, rng: &mut R) -> Result<(Image, LabelMap)> {
    if image.dims() != mask.dims() {
        bail!(Shape, "image {:?} and mask {:?} differ", image.dims(), mask.dims());
    }
    Ok(AugmentDraw::sample(cfg, rng).apply(image, mask, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn ramp(r: usize, c: usize) -> Image {
        Grid::from_fn(r, c, |y, x| (y * c + x) as f32)
    }

    #[test]
    fn resample_identity_and_rounding() {
        let img = ramp(7, 9);
        assert_eq!(resample_slice(&img, (0.37, 0.37), (0.37, 0.37)).unwrap(), img);
        let big = Grid::filled(256, 256, 0.0f32);
        assert_eq!(resample_slice(&big, (0.59, 0.59), (0.37, 0.37)).unwrap().dims(), (408, 408));
    }

    #[test]
    fn resample_preserves_constants() {
        let img = Grid::filled(40, 30, 0.6f32);
        let out = resample_slice(&img, (0.59, 0.59), (0.37, 0.37)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        let lab = Grid::filled(40, 30, 3u8);
        assert!(resample_labels(&lab, (1.5, 1.5), (1.0, 1.0)).unwrap().data().iter().all(|&v| v == 3));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let t = truncate_intensities(&Grid::filled(5, 5, 2.0), 10.0, 99.0).unwrap();
        assert!(t.degenerate);
        assert!(t.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_offsets_and_padding() {
        let img = ramp(408, 408);
        let out = center_crop(&img, (300, 300));
        assert_eq!(out.get(0, 0), img.get(54, 54));
        let small = Grid::filled(200, 200, 1.0f32);
        let padded = center_crop(&small, (300, 300));
        assert_eq!(padded.get(49, 150), 0.0);
        assert_eq!(padded.get(50, 150), 1.0);
        assert_eq!(padded.get(249, 249), 1.0);
        assert_eq!(padded.get(250, 249), 0.0);
        assert_eq!(center_crop(&ramp(300, 300), (300, 300)), ramp(300, 300));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = ramp(6, 5).map(|v| v / 30.0);
        let mask = Grid::from_fn(6, 5, |y, _| (y % 5) as u8);
        let mut rng = rng_from(1);
        let (a, m) = augment(&img, &mask, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn flip_is_involution_and_gamma_one_is_identity() {
        let img = ramp(4, 7);
        assert_eq!(flip_lr(&flip_lr(&img)), img);
        let unit = img.map(|v| v / 28.0);
        let g = gamma_correct(&unit, 1.0);
        for (a, b) in g.data().iter().zip(unit.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn bilateral_preserves_constants() {
        let img = Grid::filled(9, 9, 0.3f32);
        assert!(bilateral(&img, 1.5, 0.1).data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}
