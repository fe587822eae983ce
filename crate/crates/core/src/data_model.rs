//! Volumes, masks, manifests, on-disk storage and subject-wise CV splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::seed;

pub const CLASS_COUNT: usize = 5;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["bg", "fc", "tc", "pc", "m"];

/// Dense row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "grid {rows}x{cols} given {} values", data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub type Image = Grid<f32>;
pub type LabelMap = Grid<u8>;

/// Grayscale scan, indexed (slice, row, col), slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    slices: usize,
    rows: usize,
    cols: usize,
    pixel_spacing: (f64, f64),
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(slices: usize, rows: usize, cols: usize, pixel_spacing: (f64, f64), voxels: Vec<f32>) -> Result<Self> {
        if slices == 0 || rows == 0 || cols == 0 {
            bail!(Validation, "volume dimensions must be positive");
        }
        if voxels.len() != slices * rows * cols {
            bail!(Shape, "volume {slices}x{rows}x{cols} given {} voxels", voxels.len());
        }
        if !(pixel_spacing.0 > 0.0 && pixel_spacing.1 > 0.0) {
            bail!(Validation, "pixel spacing must be positive, got {:?}", pixel_spacing);
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "volume contains non-finite intensities");
        }
        Ok(Self {
            slices,
            rows,
            cols,
            pixel_spacing,
            voxels,
        })
    }

    pub fn from_slices(pixel_spacing: (f64, f64), slices: &[Image]) -> Result<Self> {
        let Some(first) = slices.first() else {
            bail!(Validation, "volume needs at least one slice");
        };
        let (rows, cols) = first.dims();
        let mut voxels = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if s.dims() != (rows, cols) {
                bail!(Shape, "slice shapes differ");
            }
            voxels.extend_from_slice(s.data());
        }
        Self::new(slices.len(), rows, cols, pixel_spacing, voxels)
    }

    pub fn slice_count(&self) -> usize {
        self.slices
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.slices, self.rows, self.cols)
    }

    pub fn pixel_spacing(&self) -> (f64, f64) {
        self.pixel_spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.voxels[i * n..(i + 1) * n]
    }

    pub fn slice_image(&self, i: usize) -> Image {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.slice(i).to_vec(),
        }
    }

    /// Slice order reversed.
    pub fn mirrored(&self) -> Self {
        Self {
            voxels: reverse_slices(&self.voxels, self.rows * self.cols),
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }
}

/// Label volume aligned with a [`Volume`]; labels in `0..CLASS_COUNT`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    slices: usize,
    rows: usize,
    cols: usize,
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(slices: usize, rows: usize, cols: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != slices * rows * cols {
            bail!(Shape, "mask {slices}x{rows}x{cols} given {} labels", labels.len());
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            bail!(Validation, "mask label {l} outside 0..{}", CLASS_COUNT - 1);
        }
        Ok(Self {
            slices,
            rows,
            cols,
            labels,
        })
    }

    pub fn from_slices(slices: &[LabelMap]) -> Result<Self> {
        let Some(first) = slices.first() else {
            bail!(Validation, "mask needs at least one slice");
        };
        let (rows, cols) = first.dims();
        let mut labels = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if s.dims() != (rows, cols) {
                bail!(Shape, "slice shapes differ");
            }
            labels.extend_from_slice(s.data());
        }
        Self::new(slices.len(), rows, cols, labels)
    }

    pub fn slice_count(&self) -> usize {
        self.slices
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.slices, self.rows, self.cols)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn slice_map(&self, i: usize) -> LabelMap {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.slice(i).to_vec(),
        }
    }

    pub fn mirrored(&self) -> Self {
        Self {
            labels: reverse_slices(&self.labels, self.rows * self.cols),
            ..self.clone()
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn check_pairs_with(&self, v: &Volume) -> Result<()> {
        if self.dims() != v.dims() {
            bail!(Validation, "mask shape {:?} does not match volume shape {:?}", self.dims(), v.dims());
        }
        Ok(())
    }
}

fn reverse_slices<T: Copy>(data: &[T], plane: usize) -> Vec<T> {
    data.chunks_exact(plane).rev().flatten().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    /// Scans of this laterality already have slice 0 medial.
    pub const CANONICAL: Laterality = Laterality::Left;
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "LEFT",
            Laterality::Right => "RIGHT",
        })
    }
}

impl FromStr for Laterality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LEFT" => Ok(Self::Left),
            "RIGHT" => Ok(Self::Right),
            _ => bail!(Parse, "unknown laterality {s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainRole {
    LabeledSource,
    UnlabeledTarget,
    Test,
}

impl DomainRole {
    pub fn is_annotated(self) -> bool {
        !matches!(self, DomainRole::UnlabeledTarget)
    }
}

impl fmt::Display for DomainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainRole::LabeledSource => "LABELED_SOURCE",
            DomainRole::UnlabeledTarget => "UNLABELED_TARGET",
            DomainRole::Test => "TEST",
        })
    }
}

impl FromStr for DomainRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LABELED_SOURCE" => Ok(Self::LabeledSource),
            "UNLABELED_TARGET" => Ok(Self::UnlabeledTarget),
            "TEST" => Ok(Self::Test),
            _ => bail!(Parse, "unknown domain role {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanRecord {
    pub scan_id: String,
    pub subject_id: String,
    pub kl_grade: u8,
    pub domain_id: String,
    pub laterality: Laterality,
    pub volume_uri: String,
    pub mask_uri: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    scan_id: String,
    subject_id: String,
    kl_grade: i64,
    domain_id: String,
    laterality: String,
    volume_uri: String,
    mask_uri: String,
}

const ROLES_PREFIX: &str = "# roles:";

/// Validated dataset index. URIs are resolved relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ScanRecord>,
    pub domain_roles: BTreeMap<String, DomainRole>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ScanRecord>, domain_roles: BTreeMap<String, DomainRole>, root: PathBuf) -> Result<Self> {
        let m = Self {
            records,
            domain_roles,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            bail!(Validation, "manifest has no records");
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.scan_id.as_str()) {
                bail!(Validation, "duplicate scan_id {:?}", r.scan_id);
            }
            if r.kl_grade > 4 {
                bail!(Validation, "scan {}: KL grade {} outside 0..4", r.scan_id, r.kl_grade);
            }
            let Some(role) = self.domain_roles.get(&r.domain_id) else {
                bail!(Validation, "scan {}: domain {:?} has no role", r.scan_id, r.domain_id);
            };
            match (role.is_annotated(), r.mask_uri.is_some()) {
                (true, false) => bail!(Validation, "scan {}: {role} domain requires a mask", r.scan_id),
                (false, true) => bail!(Validation, "scan {}: {role} domain must not carry a mask", r.scan_id),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn role_of(&self, rec: &ScanRecord) -> Option<DomainRole> {
        self.domain_roles.get(&rec.domain_id).copied()
    }

    pub fn with_role(&self, role: DomainRole) -> Vec<ScanRecord> {
        self.records
            .iter()
            .filter(|r| self.role_of(r) == Some(role))
            .cloned()
            .collect()
    }

    pub fn resolve(&self, uri: &str) -> PathBuf {
        self.root.join(uri)
    }

    pub fn load_volume(&self, rec: &ScanRecord) -> Result<Volume> {
        read_volume(&self.resolve(&rec.volume_uri))
    }

    /// Volume and mask, checked to share shape.
    pub fn load_labeled(&self, rec: &ScanRecord) -> Result<(Volume, MaskVolume)> {
        let v = self.load_volume(rec)?;
        let Some(uri) = &rec.mask_uri else {
            bail!(Data, "scan {} has no mask", rec.scan_id);
        };
        let m = read_mask(&self.resolve(uri))?;
        m.check_pairs_with(&v)?;
        Ok((v, m))
    }

    pub fn find(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.records.iter().find(|r| r.scan_id == scan_id)
    }

    /// Manifest text: an optional roles comment line, then a CSV table.
    pub fn to_text(&self) -> Result<String> {
        let roles: Vec<String> = self.domain_roles.iter().map(|(d, r)| format!("{d}={r}")).collect();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for r in &self.records {
            w.serialize(RawRecord {
                scan_id: r.scan_id.clone(),
                subject_id: r.subject_id.clone(),
                kl_grade: r.kl_grade as i64,
                domain_id: r.domain_id.clone(),
                laterality: r.laterality.to_string(),
                volume_uri: r.volume_uri.clone(),
                mask_uri: r.mask_uri.clone().unwrap_or_default(),
            })
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(format!("{ROLES_PREFIX} {}\n{}", roles.join(";"), String::from_utf8(body).expect("utf-8")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut domain_roles = BTreeMap::new();
        let mut body = text;
        if let Some(rest) = text.strip_prefix(ROLES_PREFIX) {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            for item in line.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let Some((d, r)) = item.split_once('=') else {
                    bail!(Parse, "bad role entry {item:?}");
                };
                domain_roles.insert(d.trim().to_string(), r.trim().parse()?);
            }
            body = tail;
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected = ["scan_id", "subject_id", "kl_grade", "domain_id", "laterality", "volume_uri", "mask_uri"];
        if header.iter().ne(expected) {
            bail!(Parse, "manifest header must be {}", expected.join(","));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.deserialize::<RawRecord>().enumerate() {
            let raw = row.map_err(|e| Error::Parse(format!("manifest row {}: {e}", line + 1)))?;
            if !(0..=4).contains(&raw.kl_grade) {
                bail!(Validation, "scan {}: KL grade {} outside 0..4", raw.scan_id, raw.kl_grade);
            }
            records.push(ScanRecord {
                scan_id: raw.scan_id,
                subject_id: raw.subject_id,
                kl_grade: raw.kl_grade as u8,
                domain_id: raw.domain_id,
                laterality: raw.laterality.parse()?,
                volume_uri: raw.volume_uri,
                mask_uri: Some(raw.mask_uri).filter(|s| !s.is_empty()),
            });
        }
        Self::new(records, domain_roles, root)
    }
}

/// Reads and validates a manifest file. Without a roles line, domains
/// default to the phantom benchmark names (`source`, `target`, `test`).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = if text.starts_with(ROLES_PREFIX) {
        text
    } else {
        format!("{ROLES_PREFIX} source=LABELED_SOURCE;target=UNLABELED_TARGET;test=TEST\n{text}")
    };
    Manifest::parse(&text, root)
}

// ---------------------------------------------------------------- storage

const META_FILE: &str = "meta.txt";

fn slice_file(i: usize) -> String {
    format!("slice_{i:04}.raw")
}

fn write_meta(dir: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let p = dir.join(META_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn read_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Some((k, v)) = line.split_once('=') else {
            bail!(Parse, "{}: bad line {line:?}", p.display());
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("metadata field {key:?} missing or malformed")))
}

fn read_slice_bytes(dir: &Path, i: usize, expected: usize) -> Result<Vec<u8>> {
    let p = dir.join(slice_file(i));
    let b = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if b.len() != expected {
        bail!(Parse, "{}: {} bytes, expected {expected}", p.display(), b.len());
    }
    Ok(b)
}

/// Writes a volume directory: `meta.txt` plus one little-endian f32 raw
/// file per slice. Spacing is stored with round-trip float formatting.
pub fn write_volume(dir: &Path, v: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_meta(
        dir,
        &[
            ("kind", "volume".into()),
            ("dtype", "f32le".into()),
            ("slices", v.slices.to_string()),
            ("rows", v.rows.to_string()),
            ("cols", v.cols.to_string()),
            ("row_mm", v.pixel_spacing.0.to_string()),
            ("col_mm", v.pixel_spacing.1.to_string()),
        ],
    )?;
    for i in 0..v.slices {
        let bytes: Vec<u8> = v.slice(i).iter().flat_map(|x| x.to_le_bytes()).collect();
        let p = dir.join(slice_file(i));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_volume(dir: &Path) -> Result<Volume> {
    let meta = read_meta(dir)?;
    if meta.get("dtype").map(String::as_str) != Some("f32le") {
        bail!(Parse, "{}: volume dtype must be f32le", dir.display());
    }
    let (s, r, c): (usize, usize, usize) = (meta_field(&meta, "slices")?, meta_field(&meta, "rows")?, meta_field(&meta, "cols")?);
    let spacing = (meta_field(&meta, "row_mm")?, meta_field(&meta, "col_mm")?);
    let mut voxels = Vec::with_capacity(s * r * c);
    for i in 0..s {
        let b = read_slice_bytes(dir, i, r * c * 4)?;
        voxels.extend(b.chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().expect("4 bytes"))));
    }
    Volume::new(s, r, c, spacing, voxels)
}

/// Writes a mask directory: `meta.txt` plus one u8 raw file per slice.
pub fn write_mask(dir: &Path, m: &MaskVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_meta(
        dir,
        &[
            ("kind", "mask".into()),
            ("dtype", "u8".into()),
            ("slices", m.slices.to_string()),
            ("rows", m.rows.to_string()),
            ("cols", m.cols.to_string()),
        ],
    )?;
    for i in 0..m.slices {
        let p = dir.join(slice_file(i));
        fs::write(&p, m.slice(i)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_mask(dir: &Path) -> Result<MaskVolume> {
    let meta = read_meta(dir)?;
    if meta.get("dtype").map(String::as_str) != Some("u8") {
        bail!(Parse, "{}: mask dtype must be u8", dir.display());
    }
    let (s, r, c): (usize, usize, usize) = (meta_field(&meta, "slices")?, meta_field(&meta, "rows")?, meta_field(&meta, "cols")?);
    let mut labels = Vec::with_capacity(s * r * c);
    for i in 0..s {
        labels.extend(read_slice_bytes(dir, i, r * c)?);
    }
    MaskVolume::new(s, r, c, labels)
}

// ----------------------------------------------------------------- splits

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Subject → grade, where a subject's grade is the maximum over its scans.
pub fn subject_grades(records: &[ScanRecord]) -> BTreeMap<String, u8> {
    let mut out: BTreeMap<String, u8> = BTreeMap::new();
    for r in records {
        let g = out.entry(r.subject_id.clone()).or_insert(r.kl_grade);
        *g = (*g).max(r.kl_grade);
    }
    out
}

/// Subject-level stratified split over all records of `manifest`.
pub fn make_cv_splits(manifest: &Manifest, fold_count: usize, seed: u64) -> Result<FoldSplit> {
    split_records(&manifest.records, fold_count, seed)
}

/// Groups subjects by grade, shuffles each group with the seed and deals
/// them round-robin. The dealing pointer starts at a seeded offset and
/// carries over between grades, so sparse grades spread over folds too.
pub fn split_records(records: &[ScanRecord], fold_count: usize, seed: u64) -> Result<FoldSplit> {
    if fold_count < 2 {
        bail!(Config, "fold count must be at least 2, got {fold_count}");
    }
    let grades = subject_grades(records);
    if grades.len() < fold_count {
        bail!(Config, "{} subjects cannot fill {fold_count} folds", grades.len());
    }
    let mut rng = seed::stream(seed, "cv-split");
    let mut by_grade: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for (s, &g) in &grades {
        by_grade.entry(g).or_default().push(s);
    }
    let mut next = rng.random_range(0..fold_count);
    let mut assignments = BTreeMap::new();
    for subjects in by_grade.values_mut() {
        subjects.shuffle(&mut rng);
        for s in subjects.iter() {
            assignments.insert(s.to_string(), next);
            next = (next + 1) % fold_count;
        }
    }
    Ok(FoldSplit {
        fold_count,
        assignments,
    })
}

/// `(train, validation)` records for one held-out fold.
pub fn subject_wise_partition(
    records: &[ScanRecord],
    split: &FoldSplit,
    held_out_fold: usize,
) -> Result<(Vec<ScanRecord>, Vec<ScanRecord>)> {
    if held_out_fold >= split.fold_count {
        bail!(Config, "fold {held_out_fold} out of range for {} folds", split.fold_count);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        match split.fold_of(&r.subject_id) {
            Some(f) if f == held_out_fold => val.push(r.clone()),
            Some(_) => train.push(r.clone()),
            None => bail!(Data, "subject {} is not in the split", r.subject_id),
        }
    }
    Ok((train, val))
}
