//! Synthetic knee-like phantoms in two appearance domains.
//!
//! Anatomy is defined in millimetres in a sagittal frame: `x` anterior,
//! `y` superior, `z` medial → lateral. Each slice is a sagittal plane; slice 0
//! is the most medial one for a LEFT scan. RIGHT scans are stored with the
//! slice order reversed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    write_mask, write_volume, DomainRole, Image, Laterality, Manifest, MaskVolume, ScanRecord, Volume,
};
use crate::error::{bail, Error, Result};
use crate::{par, seed};

/// Medial-lateral extent covered by the slices, in mm.
const ML_HALF_EXTENT: f64 = 44.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tissue {
    Air,
    Soft,
    Bone,
    FemoralCartilage,
    TibialCartilage,
    PatellarCartilage,
    Meniscus,
    Fluid,
}

impl Tissue {
    pub const ALL: [Tissue; 8] = [
        Tissue::Air,
        Tissue::Soft,
        Tissue::Bone,
        Tissue::FemoralCartilage,
        Tissue::TibialCartilage,
        Tissue::PatellarCartilage,
        Tissue::Meniscus,
        Tissue::Fluid,
    ];

    pub fn label(self) -> u8 {
        match self {
            Tissue::FemoralCartilage => 1,
            Tissue::TibialCartilage => 2,
            Tissue::PatellarCartilage => 3,
            Tissue::Meniscus => 4,
            _ => 0,
        }
    }

    /// Noise-free intensity before any appearance transform.
    pub fn base_intensity(self) -> f32 {
        match self {
            Tissue::Air => 0.0,
            Tissue::Soft => 0.35,
            Tissue::Bone => 0.22,
            Tissue::FemoralCartilage | Tissue::TibialCartilage | Tissue::PatellarCartilage => 0.78,
            Tissue::Meniscus => 0.06,
            Tissue::Fluid => 0.95,
        }
    }
}

/// Scanner/protocol appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainAppearance {
    pub pixel_spacing: (f64, f64),
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    /// Fraction of the (gain-scaled) unit dynamic range.
    pub noise_sigma: f64,
    pub blur_sigma_px: f64,
    pub matrix_size: (usize, usize),
    /// Exponent applied to base intensities; alters relative tissue contrast.
    #[serde(default = "one")]
    pub contrast_gamma: f64,
    /// Amplitude of a smooth multiplicative intensity ramp.
    #[serde(default)]
    pub bias_field: f64,
}

fn one() -> f64 {
    1.0
}

impl DomainAppearance {
    /// Identity appearance: no blur, noise, gain or bias.
    pub fn clean(pixel_spacing: (f64, f64), matrix_size: (usize, usize)) -> Self {
        Self {
            pixel_spacing,
            intensity_gain: 1.0,
            intensity_bias: 0.0,
            noise_sigma: 0.0,
            blur_sigma_px: 0.0,
            matrix_size,
            contrast_gamma: 1.0,
            bias_field: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix_size.0 < 64 || self.matrix_size.1 < 64 {
            bail!(Config, "matrix size must be at least 64x64, got {:?}", self.matrix_size);
        }
        if !(self.pixel_spacing.0 > 0.0 && self.pixel_spacing.1 > 0.0) {
            bail!(Config, "pixel spacing must be positive");
        }
        if !(self.intensity_gain > 0.0 && self.intensity_gain.is_finite()) {
            bail!(Config, "intensity gain must be positive");
        }
        if !self.intensity_bias.is_finite() {
            bail!(Config, "intensity bias must be finite");
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma_px >= 0.0) {
            bail!(Config, "noise and blur must be nonnegative");
        }
        if !(self.contrast_gamma > 0.0 && self.contrast_gamma.is_finite()) {
            bail!(Config, "contrast gamma must be positive");
        }
        if !(0.0..1.0).contains(&self.bias_field) {
            bail!(Config, "bias field amplitude must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub slice_count: usize,
    pub tissue_geometry_seed: u64,
    /// 0..=4, emulates the KL grade.
    pub severity: u8,
    pub appearance: DomainAppearance,
    pub laterality: Laterality,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slice_count == 0 {
            bail!(Config, "slice count must be positive");
        }
        if self.severity > 4 {
            bail!(Config, "severity {} outside 0..4", self.severity);
        }
        self.appearance.validate()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    c: [f64; 3],
    a: [f64; 3],
}

impl Ellipsoid {
    /// First-order signed distance to the surface in mm (negative inside).
    fn dist(&self, p: [f64; 3]) -> f64 {
        let mut q2 = 0.0;
        let mut g2 = 0.0;
        for i in 0..3 {
            let u = (p[i] - self.c[i]) / self.a[i];
            q2 += u * u;
            g2 += (u / self.a[i]) * (u / self.a[i]);
        }
        let q = q2.sqrt();
        if q < 1e-12 {
            return -self.a.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        // |∇q| = sqrt(g2) / q
        (q - 1.0) * q / g2.sqrt()
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.c[i]) / self.a[i]).powi(2)).sum::<f64>() < 1.0
    }
}

/// Subject anatomy after geometry jitter and severity.
#[derive(Clone, Debug)]
struct Anatomy {
    condyles: [Ellipsoid; 2],
    shaft: Ellipsoid,
    tibia: Ellipsoid,
    patella: Ellipsoid,
    fc_mm: f64,
    tc_mm: f64,
    pc_mm: f64,
    defects: Vec<Ellipsoid>,
    leg: (f64, f64, f64),
}

fn jitter<R: Rng>(rng: &mut R, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.random_range(-rel..rel))
}

impl Anatomy {
    fn new(geometry_seed: u64, severity: u8) -> Self {
        let mut rng = seed::stream(geometry_seed, "phantom-geometry");
        let r = &mut rng;
        let sy = rng_shift(r, 1.5);
        let condyles = [
            Ellipsoid {
                c: [-6.0 + rng_shift(r, 1.5), 27.5 + sy, -17.0 + rng_shift(r, 1.0)],
                a: [jitter(r, 25.0, 0.06), 24.0, jitter(r, 15.0, 0.06)],
            },
            Ellipsoid {
                c: [-4.0 + rng_shift(r, 1.5), 27.0 + sy, 17.0 + rng_shift(r, 1.0)],
                a: [jitter(r, 22.0, 0.06), 23.0, jitter(r, 12.5, 0.06)],
            },
        ];
        let shaft = Ellipsoid {
            c: [-6.0, 58.0 + sy, 0.0],
            a: [19.0, 30.0, 27.0],
        };
        let ty = rng_shift(r, 1.0);
        let tibia = Ellipsoid {
            c: [-6.0 + rng_shift(r, 1.5), -30.5 + ty, 0.0],
            a: [jitter(r, 30.0, 0.05), 27.0, jitter(r, 40.0, 0.05)],
        };
        let patella = Ellipsoid {
            c: [33.0 + rng_shift(r, 1.0), 30.0 + sy + rng_shift(r, 2.0), rng_shift(r, 2.0)],
            a: [7.0, jitter(r, 15.0, 0.08), jitter(r, 16.0, 0.08)],
        };
        let thin = 1.0 - 0.1 * severity as f64;
        let fc_mm = jitter(r, 3.0, 0.05) * thin;
        let tc_mm = jitter(r, 2.6, 0.05) * thin;
        let pc_mm = jitter(r, 3.2, 0.05) * thin;
        let defect_count = (1.5 * severity as f64).floor() as usize;
        let joint_y = (condyles[0].c[1] - condyles[0].a[1] + tibia.c[1] + tibia.a[1]) / 2.0;
        let defects = (0..defect_count)
            .map(|_| {
                let side = if r.random_bool(0.5) { -17.0 } else { 17.0 };
                let up = if r.random_bool(0.5) { 3.5 } else { -3.5 };
                Ellipsoid {
                    c: [-6.0 + r.random_range(-14.0..14.0), joint_y + up, side + r.random_range(-6.0..6.0)],
                    a: [r.random_range(3.0..6.0), 3.0, r.random_range(3.0..6.0)],
                }
            })
            .collect();
        let leg = (-2.0, 50.0 + rng_shift(r, 2.0), 54.0);
        Self {
            condyles,
            shaft,
            tibia,
            patella,
            fc_mm,
            tc_mm,
            pc_mm,
            defects,
            leg,
        }
    }

    fn tissue(&self, p: [f64; 3]) -> Tissue {
        let [x, y, z] = p;
        let (lc, lx, lz) = self.leg;
        if ((x - lc) / lx).powi(2) + (z / lz).powi(2) >= 1.0 {
            return Tissue::Air;
        }
        let d_fem = self.condyles[0].dist(p).min(self.condyles[1].dist(p));
        let in_femur = d_fem < 0.0 || self.shaft.inside(p);
        let d_tib = self.tibia.dist(p);
        let d_pat = self.patella.dist(p);
        if in_femur || d_tib < 0.0 || d_pat < 0.0 {
            return Tissue::Bone;
        }
        let in_defect = || self.defects.iter().any(|d| d.inside(p));
        if d_pat < self.pc_mm && x < self.patella.c[0] - 0.2 * self.patella.a[0] {
            return Tissue::PatellarCartilage;
        }
        let distal = self
            .condyles
            .iter()
            .any(|c| y < c.c[1] + 0.25 * c.a[1] && c.dist(p) < self.fc_mm + 0.5);
        if d_fem < self.fc_mm && distal && !self.shaft.inside(p) {
            return if in_defect() { Tissue::Fluid } else { Tissue::FemoralCartilage };
        }
        let plateau = y > self.tibia.c[1] + 0.75 * self.tibia.a[1] && z.abs() > 4.0;
        if d_tib < self.tc_mm && plateau {
            return if in_defect() { Tissue::Fluid } else { Tissue::TibialCartilage };
        }
        for c in &self.condyles {
            let rho = ((x - c.c[0]) / 20.0).powi(2) + ((z - c.c[2]) / 13.0).powi(2);
            let rho = rho.sqrt();
            if (0.62..1.0).contains(&rho) && y > self.tibia.c[1] {
                let h = 1.0 + 6.0 * (rho - 0.62) / 0.38;
                if d_tib < h && d_fem > 0.3 {
                    return Tissue::Meniscus;
                }
            }
        }
        Tissue::Soft
    }
}

fn rng_shift<R: Rng>(rng: &mut R, mm: f64) -> f64 {
    rng.random_range(-mm..mm)
}

fn slice_z(i: usize, slice_count: usize) -> f64 {
    -ML_HALF_EXTENT + (i as f64 + 0.5) * 2.0 * ML_HALF_EXTENT / slice_count as f64
}

/// Tissue map of one canonical (medial-first) slice.
fn tissue_slice(anat: &Anatomy, z: f64, app: &DomainAppearance) -> Vec<Tissue> {
    let (rows, cols) = app.matrix_size;
    let (sy, sx) = app.pixel_spacing;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = (rows as f64 / 2.0 - r as f64 - 0.5) * sy;
        for c in 0..cols {
            let x = (c as f64 + 0.5 - cols as f64 / 2.0) * sx;
            out.push(anat.tissue([x, y, z]));
        }
    }
    out
}

/// Canonical-orientation tissue volume, one plane per slice.
pub fn tissue_volume(spec: &PhantomSpec) -> Result<Vec<Vec<Tissue>>> {
    spec.validate()?;
    let anat = Anatomy::new(spec.tissue_geometry_seed, spec.severity);
    Ok(par::map_range(spec.slice_count, |i| {
        tissue_slice(&anat, slice_z(i, spec.slice_count), &spec.appearance)
    }))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric border extension.
pub fn gaussian_blur(img: &[f32], rows: usize, cols: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0f32;
            for (j, &kw) in k.iter().enumerate() {
                acc += kw * img[r * cols + reflect(c as isize + j as isize - rad, cols)];
            }
            tmp[r * cols + c] = acc;
        }
    }
    let mut out = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0f32;
            for (j, &kw) in k.iter().enumerate() {
                acc += kw * tmp[reflect(r as isize + j as isize - rad, rows) * cols + c];
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// Applies the appearance chain to a tissue plane:
/// base → gamma → bias field → blur → gain/bias → noise.
fn render_slice(tissues: &[Tissue], app: &DomainAppearance, noise_seed: u64) -> Vec<f32> {
    let (rows, cols) = app.matrix_size;
    let (sy, sx) = app.pixel_spacing;
    let mut v: Vec<f32> = tissues.iter().map(|t| t.base_intensity()).collect();
    if app.contrast_gamma != 1.0 {
        let g = app.contrast_gamma as f32;
        v.iter_mut().for_each(|x| *x = x.powf(g));
    }
    if app.bias_field > 0.0 {
        let half = (rows as f64 * sy).max(cols as f64 * sx) / 2.0;
        for r in 0..rows {
            let y = (rows as f64 / 2.0 - r as f64 - 0.5) * sy / half;
            for c in 0..cols {
                let x = (c as f64 + 0.5 - cols as f64 / 2.0) * sx / half;
                let f = 1.0 + app.bias_field * (0.8 * x + 0.6 * y);
                v[r * cols + c] *= f as f32;
            }
        }
    }
    let mut v = gaussian_blur(&v, rows, cols, app.blur_sigma_px);
    let (g, b) = (app.intensity_gain as f32, app.intensity_bias as f32);
    if (g, b) != (1.0, 0.0) {
        v.iter_mut().for_each(|x| *x = g * *x + b);
    }
    if app.noise_sigma > 0.0 {
        let mut rng = seed::rng_from(noise_seed);
        let n = Normal::new(0.0, app.noise_sigma * app.intensity_gain).expect("valid sigma");
        v.iter_mut().for_each(|x| *x += n.sample(&mut rng) as f32);
    }
    v
}

/// Generates one scan. Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume, ScanRecord)> {
    let tissues = tissue_volume(spec)?;
    let app = &spec.appearance;
    let (rows, cols) = app.matrix_size;
    let images: Vec<Image> = par::map_range(spec.slice_count, |i| {
        let noise_seed = seed::derive_seed(spec.tissue_geometry_seed, &format!("noise-{i}"));
        Image::new(rows, cols, render_slice(&tissues[i], app, noise_seed)).expect("matrix size")
    });
    let labels: Vec<u8> = tissues.iter().flatten().map(|t| t.label()).collect();
    let mut volume = Volume::from_slices(app.pixel_spacing, &images)?;
    let mut mask = MaskVolume::new(spec.slice_count, rows, cols, labels)?;
    if spec.laterality != Laterality::CANONICAL {
        volume = volume.mirrored();
        mask = mask.mirrored();
    }
    let id = format!("ph-{:016x}", spec.tissue_geometry_seed);
    let record = ScanRecord {
        scan_id: id.clone(),
        subject_id: id,
        kl_grade: spec.severity,
        domain_id: "phantom".into(),
        laterality: spec.laterality,
        volume_uri: String::new(),
        mask_uri: None,
    };
    Ok((volume, mask, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gap {
    None,
    Mild,
    Strong,
}

impl FromStr for Gap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Gap::None),
            "mild" => Ok(Gap::Mild),
            "strong" => Ok(Gap::Strong),
            _ => bail!(Config, "unknown gap {s:?} (expected none, mild or strong)"),
        }
    }
}

impl fmt::Display for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gap::None => "none",
            Gap::Mild => "mild",
            Gap::Strong => "strong",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 96 mm field of view at 1.0 / 1.5 mm, 16 slices.
    Tiny,
    /// 384 px at 0.37 mm and 256 px at 0.59 mm, 160 slices.
    Full,
}

impl Scale {
    pub fn slice_count(self) -> usize {
        match self {
            Scale::Tiny => 16,
            Scale::Full => 160,
        }
    }

    fn geometry(self) -> (((f64, f64), (usize, usize)), ((f64, f64), (usize, usize))) {
        match self {
            Scale::Tiny => (((1.0, 1.0), (96, 96)), ((1.5, 1.5), (64, 64))),
            Scale::Full => (((0.37, 0.37), (384, 384)), ((0.59, 0.59), (256, 256))),
        }
    }
}

/// Source and target appearances for a gap preset.
pub fn gap_appearances(gap: Gap, scale: Scale) -> (DomainAppearance, DomainAppearance) {
    let ((ss, sm), (ts, tm)) = scale.geometry();
    let source = DomainAppearance {
        noise_sigma: 0.02,
        blur_sigma_px: 0.3,
        ..DomainAppearance::clean(ss, sm)
    };
    let target = match gap {
        Gap::None => source.clone(),
        Gap::Mild => DomainAppearance {
            intensity_gain: 1.2,
            intensity_bias: 0.05,
            noise_sigma: 0.04,
            blur_sigma_px: 0.5,
            contrast_gamma: 0.8,
            bias_field: 0.15,
            ..DomainAppearance::clean(ts, tm)
        },
        Gap::Strong => DomainAppearance {
            intensity_gain: 1.4,
            intensity_bias: 0.1,
            noise_sigma: 0.06,
            blur_sigma_px: 0.8,
            contrast_gamma: 0.6,
            bias_field: 0.3,
            ..DomainAppearance::clean(ts, tm)
        },
    };
    (source, target)
}

/// Allocates `n` items over weights by largest remainder; ties go to the
/// earlier entry.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// KL-grade spread of the annotated source domain (grades 0..4).
const SOURCE_GRADE_WEIGHTS: [f64; 5] = [0.0, 4.0, 59.0, 101.0, 12.0];
/// Test-domain severities {1, 2, 3} in proportion 16/13/15.
const TEST_GRADE_WEIGHTS: [f64; 3] = [16.0, 13.0, 15.0];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub source_count: usize,
    pub target_count: usize,
    /// Defaults to `target_count`.
    pub test_count: Option<usize>,
    pub seed: u64,
    pub source_app: DomainAppearance,
    pub target_app: DomainAppearance,
    pub slice_count: usize,
}

impl BenchmarkSpec {
    /// Preset appearances for `gap` at `scale`; the test domain mirrors the
    /// target domain and has as many scans.
    pub fn with_gap(source_count: usize, target_count: usize, seed: u64, gap: Gap, scale: Scale) -> Self {
        let (source_app, target_app) = gap_appearances(gap, scale);
        Self {
            source_count,
            target_count,
            test_count: None,
            seed,
            source_app,
            target_app,
            slice_count: scale.slice_count(),
        }
    }
}

struct Job {
    domain: &'static str,
    prefix: &'static str,
    index: usize,
    severity: u8,
    annotated: bool,
}

fn shuffled_severities(seed: u64, name: &str, counts: &[(u8, usize)]) -> Vec<u8> {
    use rand::seq::SliceRandom;
    let mut v: Vec<u8> = counts.iter().flat_map(|&(g, n)| std::iter::repeat_n(g, n)).collect();
    v.shuffle(&mut seed::stream(seed, name));
    v
}

/// Writes a three-domain benchmark (`source`, `target`, `test`) under
/// `out_dir` plus `manifest.csv`, and returns the manifest.
pub fn generate_benchmark(out_dir: &Path, spec: &BenchmarkSpec) -> Result<Manifest> {
    let test_count = spec.test_count.unwrap_or(spec.target_count);
    if spec.source_count == 0 || spec.target_count == 0 || test_count == 0 {
        bail!(Config, "benchmark domain counts must be at least 1");
    }
    spec.source_app.validate()?;
    spec.target_app.validate()?;
    if spec.slice_count == 0 {
        bail!(Config, "slice count must be positive");
    }
    let grade_counts = |n: usize| -> Vec<(u8, usize)> {
        largest_remainder(n, &SOURCE_GRADE_WEIGHTS).into_iter().enumerate().map(|(g, c)| (g as u8, c)).collect()
    };
    let src_sev = shuffled_severities(spec.seed, "source-severity", &grade_counts(spec.source_count));
    let tgt_sev = shuffled_severities(spec.seed, "target-severity", &grade_counts(spec.target_count));
    let test_alloc: Vec<(u8, usize)> = largest_remainder(test_count, &TEST_GRADE_WEIGHTS)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as u8 + 1, c))
        .collect();
    let test_sev = shuffled_severities(spec.seed, "test-severity", &test_alloc);

    let mut jobs = Vec::new();
    for (i, &s) in src_sev.iter().enumerate() {
        jobs.push(Job { domain: "source", prefix: "src", index: i, severity: s, annotated: true });
    }
    for (i, &s) in tgt_sev.iter().enumerate() {
        jobs.push(Job { domain: "target", prefix: "tgt", index: i, severity: s, annotated: false });
    }
    for (i, &s) in test_sev.iter().enumerate() {
        jobs.push(Job { domain: "test", prefix: "tst", index: i, severity: s, annotated: true });
    }

    let results: Vec<Result<ScanRecord>> = par::map_slice(&jobs, |job| {
        let geom = seed::derive_seed(spec.seed, &format!("{}-geometry-{}", job.domain, job.index));
        let right = seed::stream(spec.seed, &format!("{}-laterality-{}", job.domain, job.index)).random_bool(0.5);
        let app = if job.domain == "source" { &spec.source_app } else { &spec.target_app };
        let pspec = PhantomSpec {
            slice_count: spec.slice_count,
            tissue_geometry_seed: geom,
            severity: job.severity,
            appearance: app.clone(),
            laterality: if right { Laterality::Right } else { Laterality::Left },
        };
        let (vol, mask, _) = generate_phantom(&pspec)?;
        let id = format!("{}-{:03}", job.prefix, job.index);
        let rel = format!("{}/{}", job.domain, id);
        write_volume(&out_dir.join(&rel).join("image"), &vol)?;
        let mask_uri = if job.annotated {
            write_mask(&out_dir.join(&rel).join("mask"), &mask)?;
            Some(format!("{rel}/mask"))
        } else {
            None
        };
        Ok(ScanRecord {
            scan_id: id.clone(),
            subject_id: format!("subj-{id}"),
            kl_grade: job.severity,
            domain_id: job.domain.into(),
            laterality: pspec.laterality,
            volume_uri: format!("{rel}/image"),
            mask_uri,
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let roles = [
        ("source", DomainRole::LabeledSource),
        ("target", DomainRole::UnlabeledTarget),
        ("test", DomainRole::Test),
    ]
    .into_iter()
    .map(|(d, r)| (d.to_string(), r))
    .collect();
    let manifest = Manifest::new(records, roles, out_dir.to_path_buf())?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(severity: u8) -> PhantomSpec {
        PhantomSpec {
            slice_count: 16,
            tissue_geometry_seed: 11,
            severity,
            appearance: gap_appearances(Gap::None, Scale::Tiny).0,
            laterality: Laterality::Left,
        }
    }

    #[test]
    fn deterministic() {
        let (a, am, _) = generate_phantom(&spec(2)).unwrap();
        let (b, bm, _) = generate_phantom(&spec(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(am, bm);
    }

    #[test]
    fn all_labels_present_at_low_severity() {
        for s in 0..=4 {
            let (_, m, rec) = generate_phantom(&spec(s)).unwrap();
            assert_eq!(rec.kl_grade, s);
            for class in 0..5u8 {
                assert!(m.count(class) > 0, "class {class} missing at severity {s}");
            }
        }
    }

    #[test]
    fn severity_thins_femoral_cartilage() {
        let fc = |s| generate_phantom(&spec(s)).unwrap().1.count(1);
        assert!(fc(4) < fc(0));
    }

    #[test]
    fn clean_appearance_reproduces_base_intensities() {
        let mut s = spec(3);
        s.appearance = DomainAppearance::clean((1.0, 1.0), (64, 64));
        let tissues = tissue_volume(&s).unwrap();
        let (v, _, _) = generate_phantom(&s).unwrap();
        for (t, &x) in tissues.iter().flatten().zip(v.voxels()) {
            assert_eq!(x, t.base_intensity());
        }
    }

    #[test]
    fn right_scans_are_stored_mirrored() {
        let mut s = spec(1);
        let (_, left, _) = generate_phantom(&s).unwrap();
        s.laterality = Laterality::Right;
        let (_, right, _) = generate_phantom(&s).unwrap();
        assert_eq!(right.mirrored(), left);
        assert_ne!(right, left);
    }

    #[test]
    fn test_severity_allocation() {
        assert_eq!(largest_remainder(9, &TEST_GRADE_WEIGHTS), vec![3, 3, 3]);
        assert_eq!(largest_remainder(44, &TEST_GRADE_WEIGHTS), vec![16, 13, 15]);
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = spec(5);
        assert_eq!(generate_phantom(&s).unwrap_err().code(), "ConfigError");
        s.severity = 0;
        s.appearance.matrix_size = (32, 64);
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = vec![0.4f32; 20 * 30];
        let out = gaussian_blur(&img, 20, 30, 1.3);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }
}
