//! Report files: stratified tables, per-scan scores, slice profiles (text
//! and raster), key-value summaries and paired comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::dsc::DscConvention;
use super::profile::SliceProfile;
use super::report::{DscReport, GroupStat, ScanScores};
use super::wilcoxon::paired_compare;
use crate::data_model::CLASS_NAMES;
use crate::error::{bail, Error, Result};

/// Paired differences with `p` below this are flagged.
pub const SIGNIFICANCE_LEVEL: f64 = 0.005;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmittedFiles {
    pub table: PathBuf,
    pub report: PathBuf,
    pub summary: PathBuf,
    pub profile_tables: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

fn class_name(c: u8) -> &'static str {
    CLASS_NAMES.get(c as usize).copied().unwrap_or("?")
}

fn class_from_name(name: &str) -> Result<u8> {
    match CLASS_NAMES.iter().position(|n| *n == name) {
        Some(i) => Ok(i as u8),
        None => bail!(Parse, "unknown class name {name:?}"),
    }
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{:.6}", v + 0.0)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_method(method: &str) -> Result<()> {
    if method.is_empty() || !method.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        bail!(Config, "method name {method:?} must be non-empty [A-Za-z0-9._-]");
    }
    Ok(())
}

fn stat_cells(row: &mut String, stats: &[GroupStat]) {
    for s in stats {
        let _ = write!(row, ",{},{},{}", fmt6(s.mean), fmt6(s.std), s.count);
    }
}

/// One row per (method, KL group) plus the `all` row.
pub fn table_text(report: &DscReport, method: &str) -> String {
    let mut out = format!("# dsc_both_empty={}\nmethod,group", report.convention.both_empty);
    for &c in &report.classes {
        let n = class_name(c);
        let _ = write!(out, ",{n}_mean,{n}_std,{n}_count");
    }
    out.push('\n');
    for (grade, stats) in &report.stratified {
        let mut row = format!("{method},kl{grade}");
        stat_cells(&mut row, stats);
        out.push_str(&row);
        out.push('\n');
    }
    let mut row = format!("{method},all");
    stat_cells(&mut row, &report.per_class_mean);
    out.push_str(&row);
    out.push('\n');
    out
}

/// Per-scan scores at full precision, reloadable with [`read_report_csv`].
pub fn report_text(report: &DscReport) -> String {
    let mut out = format!("# dsc_both_empty={}\nscan_id,kl_grade", report.convention.both_empty);
    for &c in &report.classes {
        let _ = write!(out, ",{}", class_name(c));
    }
    out.push('\n');
    for (id, s) in &report.per_scan {
        let _ = write!(out, "{id},{}", s.kl_grade);
        for v in &s.dsc {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn split_comment(text: &str) -> (BTreeMap<String, String>, String) {
    let mut meta = BTreeMap::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    (meta, body)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: bad number {s:?}")))
}

fn records(body: &str, path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        rows.push(r.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

pub fn read_report_csv(path: &Path) -> Result<DscReport> {
    let (meta, body) = split_comment(&read_file(path)?);
    let both_empty = match meta.get("dsc_both_empty") {
        Some(v) => parse_f64(v, "dsc_both_empty")?,
        None => DscConvention::default().both_empty,
    };
    let (header, rows) = records(&body, path)?;
    if header.len() < 3 || header[0] != "scan_id" || header[1] != "kl_grade" {
        bail!(Parse, "{}: expected header scan_id,kl_grade,<classes>", path.display());
    }
    let classes = header[2..].iter().map(|n| class_from_name(n)).collect::<Result<Vec<_>>>()?;
    let mut per_scan = BTreeMap::new();
    for row in rows {
        let kl_grade = row[1]
            .parse::<u8>()
            .map_err(|_| Error::Parse(format!("{}: bad kl_grade {:?}", path.display(), row[1])))?;
        let dsc = row[2..].iter().map(|v| parse_f64(v, "dsc")).collect::<Result<Vec<_>>>()?;
        if per_scan.insert(row[0].clone(), ScanScores { kl_grade, dsc }).is_some() {
            bail!(Parse, "{}: duplicate scan {}", path.display(), row[0]);
        }
    }
    if per_scan.is_empty() {
        bail!(Data, "{}: report has no scans", path.display());
    }
    Ok(DscReport::from_scores(classes, per_scan, DscConvention { both_empty }))
}

pub fn profile_text(profile: &SliceProfile) -> String {
    let mut out = format!("# class={}\nslice,mean,ci_low,ci_high,contributing\n", class_name(profile.class_id));
    for s in 0..profile.per_slice_mean.len() {
        let _ = writeln!(
            out,
            "{s},{},{},{},{}",
            fmt6(profile.per_slice_mean[s]),
            fmt6(profile.ci_low[s]),
            fmt6(profile.ci_high[s]),
            profile.contributing[s]
        );
    }
    out
}

pub fn read_profile_csv(path: &Path) -> Result<SliceProfile> {
    let (meta, body) = split_comment(&read_file(path)?);
    let Some(name) = meta.get("class") else {
        bail!(Parse, "{}: missing '# class=' line", path.display());
    };
    let class_id = class_from_name(name)?;
    let (header, rows) = records(&body, path)?;
    if header != ["slice", "mean", "ci_low", "ci_high", "contributing"] {
        bail!(Parse, "{}: unexpected profile header", path.display());
    }
    let mut p = SliceProfile {
        class_id,
        per_slice_mean: Vec::new(),
        ci_low: Vec::new(),
        ci_high: Vec::new(),
        contributing: Vec::new(),
    };
    for row in rows {
        p.per_slice_mean.push(parse_f64(&row[1], "mean")?);
        p.ci_low.push(parse_f64(&row[2], "ci_low")?);
        p.ci_high.push(parse_f64(&row[3], "ci_high")?);
        p.contributing.push(
            row[4]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad count {:?}", path.display(), row[4])))?,
        );
    }
    Ok(p)
}

pub fn summary_text(report: &DscReport, profiles: &[SliceProfile], method: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method={method}");
    let _ = writeln!(out, "dsc_both_empty={}", report.convention.both_empty);
    let _ = writeln!(out, "scans={}", report.per_scan.len());
    let names: Vec<&str> = report.classes.iter().map(|&c| class_name(c)).collect();
    let _ = writeln!(out, "classes={}", names.join(","));
    let mut group = |prefix: &str, stats: &[GroupStat]| {
        for (n, s) in names.iter().zip(stats) {
            let _ = writeln!(out, "{prefix}{n}.mean={}", fmt6(s.mean));
            let _ = writeln!(out, "{prefix}{n}.std={}", fmt6(s.std));
            let _ = writeln!(out, "{prefix}{n}.count={}", s.count);
        }
    };
    group("all.", &report.per_class_mean);
    for (g, stats) in &report.stratified {
        group(&format!("kl{g}."), stats);
    }
    for p in profiles {
        let vals: Vec<f64> = p.per_slice_mean.iter().copied().filter(|v| !v.is_nan()).collect();
        let avg = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        let n = class_name(p.class_id);
        let _ = writeln!(out, "profile.{n}.slices={}", p.per_slice_mean.len());
        let _ = writeln!(out, "profile.{n}.covered_slices={}", vals.len());
        let _ = writeln!(out, "profile.{n}.mean_over_slices={}", fmt6(avg));
    }
    out
}

/// Writes `table_<m>.csv`, `report_<m>.csv`, `summary_<m>.txt` and, per
/// profile, `profile_<class>_<m>.csv` plus `.png`.
pub fn emit_outputs(report: &DscReport, profiles: &[SliceProfile], method: &str, out_dir: &Path) -> Result<EmittedFiles> {
    check_method(method)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = EmittedFiles {
        table: out_dir.join(format!("table_{method}.csv")),
        report: out_dir.join(format!("report_{method}.csv")),
        summary: out_dir.join(format!("summary_{method}.txt")),
        ..Default::default()
    };
    write_file(&files.table, &table_text(report, method))?;
    write_file(&files.report, &report_text(report))?;
    write_file(&files.summary, &summary_text(report, profiles, method))?;
    for p in profiles {
        let stem = format!("profile_{}_{method}", class_name(p.class_id));
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_file(&csv_path, &profile_text(p))?;
        let png_path = out_dir.join(format!("{stem}.png"));
        render_profiles_png(&[(method, p)], &png_path)?;
        files.profile_tables.push(csv_path);
        files.plots.push(png_path);
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub class_id: u8,
    pub mean_a: f64,
    pub mean_b: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Paired test per class shared by both reports; `b − a` differences.
    pub fn compute(a: &DscReport, b: &DscReport, method_a: &str, method_b: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for &c in &a.classes {
            let Some(kb) = b.class_index(c) else { continue };
            let ka = a.class_index(c).expect("class listed");
            let w = paired_compare(a, b, c)?;
            rows.push(ComparisonRow {
                class_id: c,
                mean_a: a.per_class_mean[ka].mean,
                mean_b: b.per_class_mean[kb].mean,
                statistic: w.statistic,
                p_value: w.p_value,
                n_pairs: w.n_pairs,
                significant: w.p_value < SIGNIFICANCE_LEVEL,
            });
        }
        if rows.is_empty() {
            bail!(Data, "reports share no classes");
        }
        Ok(Self {
            method_a: method_a.into(),
            method_b: method_b.into(),
            rows,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# significance_level={SIGNIFICANCE_LEVEL}\nclass,method_a,method_b,mean_a,mean_b,statistic,p_value,n,significant\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6e},{},{}",
                class_name(r.class_id),
                self.method_a,
                self.method_b,
                fmt6(r.mean_a),
                fmt6(r.mean_b),
                fmt6(r.statistic),
                r.p_value,
                r.n_pairs,
                if r.significant { "*" } else { "" }
            );
        }
        out
    }
}

pub fn write_comparison(cmp: &Comparison, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(path, &cmp.to_text())
}

// ---------------------------------------------------------------- plotting

const WIDTH: u32 = 720;
const HEIGHT: u32 = 400;
const LEFT: i64 = 56;
const RIGHT: i64 = 16;
const TOP: i64 = 24;
const BOTTOM: i64 = 44;

const PALETTE: [[u8; 3]; 5] = [[31, 90, 180], [200, 70, 30], [40, 140, 60], [140, 60, 160], [120, 120, 120]];

/// 3×5 glyphs, rows top to bottom, 3 bits per row (MSB left).
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [7, 4, 4, 4, 7],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [7, 4, 5, 5, 7],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [7, 5, 5, 5, 7],
        'P' => [7, 5, 7, 4, 4],
        'R' => [6, 5, 6, 5, 5],
        'S' => [7, 4, 7, 1, 7],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        _ => [0; 5],
    }
}

struct Canvas(RgbImage);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.0.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn blend(&mut self, x: i64, y: i64, c: [u8; 3], alpha: f64) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            let p = self.0.get_pixel_mut(x as u32, y as u32);
            for k in 0..3 {
                p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: i64) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let x = x0 + (x1 - x0) * i / steps;
            let y = y0 + (y1 - y0) * i / steps;
            for d in 0..thick {
                self.put(x, y + d - thick / 2, c);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [u8; 3]) {
        for (i, ch) in s.to_ascii_uppercase().chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                self.put(x + (i as i64 * 4 + col) * scale + dx, y + row as i64 * scale + dy, c);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn text_width(s: &str, scale: i64) -> i64 {
    s.len() as i64 * 4 * scale
}

/// Mean line and confidence band per profile over the slice index (medial at
/// the left, lateral at the right), DSC axis fixed to [0, 1].
pub fn render_profiles_png(profiles: &[(&str, &SliceProfile)], path: &Path) -> Result<()> {
    if profiles.is_empty() {
        bail!(Data, "nothing to plot");
    }
    let slices = profiles[0].1.per_slice_mean.len();
    if slices == 0 || profiles.iter().any(|(_, p)| p.per_slice_mean.len() != slices) {
        bail!(Data, "profiles must share a non-zero slice count");
    }
    let mut cv = Canvas(RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])));
    let (x0, x1) = (LEFT, WIDTH as i64 - RIGHT);
    let (y0, y1) = (TOP, HEIGHT as i64 - BOTTOM);
    let px = |s: f64| x0 + ((s + 0.5) / slices as f64 * (x1 - x0) as f64).round() as i64;
    let py = |v: f64| y1 - (v.clamp(0.0, 1.0) * (y1 - y0) as f64).round() as i64;

    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = py(v);
        cv.line((x0, y), (x1, y), [225, 225, 225], 1);
        let label = format!("{v:.1}");
        cv.text(x0 - 6 - text_width(&label, 2), y - 5, &label, 2, [0, 0, 0]);
    }
    for (i, (_, p)) in profiles.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for s in 0..slices {
            let (lo, hi) = (p.ci_low[s], p.ci_high[s]);
            if lo.is_nan() || hi.is_nan() {
                continue;
            }
            let (xa, xb) = (px(s as f64 - 0.5), px(s as f64 + 0.5));
            for x in xa..xb.max(xa + 1) {
                for y in py(hi)..=py(lo) {
                    cv.blend(x, y, color, 0.25);
                }
            }
        }
        let mut prev: Option<(i64, i64)> = None;
        for s in 0..slices {
            let m = p.per_slice_mean[s];
            if m.is_nan() {
                prev = None;
                continue;
            }
            let pt = (px(s as f64), py(m));
            match prev {
                Some(q) => cv.line(q, pt, color, 2),
                None => cv.line(pt, pt, color, 2),
            }
            prev = Some(pt);
        }
    }
    cv.line((x0, y0), (x0, y1), [0, 0, 0], 1);
    cv.line((x0, y1), (x1, y1), [0, 0, 0], 1);
    cv.text(x0, y1 + 8, "MEDIAL", 2, [0, 0, 0]);
    cv.text(x1 - text_width("LATERAL", 2), y1 + 8, "LATERAL", 2, [0, 0, 0]);
    let axis = format!("SLICE 0-{}", slices - 1);
    cv.text((x0 + x1 - text_width(&axis, 2)) / 2, y1 + 24, &axis, 2, [80, 80, 80]);
    cv.text(4, 4, "DSC", 2, [0, 0, 0]);
    let mut lx = x0 + 8;
    for (i, (label, p)) in profiles.iter().enumerate() {
        let tag = format!("{} {}", class_name(p.class_id), label);
        let color = PALETTE[i % PALETTE.len()];
        cv.line((lx, 10), (lx + 16, 10), color, 3);
        cv.text(lx + 20, 5, &tag, 2, [0, 0, 0]);
        lx += 32 + text_width(&tag, 2);
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    cv.0.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(classes: Vec<u8>) -> DscReport {
        let k = classes.len();
        let per_scan = [("a", 1u8, 0.5), ("b", 2, 0.75), ("c", 2, 0.25)]
            .iter()
            .map(|&(id, g, d)| (id.to_string(), ScanScores { kl_grade: g, dsc: vec![d; k] }))
            .collect();
        DscReport::from_scores(classes, per_scan, DscConvention::default())
    }

    fn profile(class_id: u8) -> SliceProfile {
        SliceProfile {
            class_id,
            per_slice_mean: vec![f64::NAN, 0.5, 0.8, 0.6],
            ci_low: vec![f64::NAN, 0.4, 0.7, 0.6],
            ci_high: vec![f64::NAN, 0.6, 0.9, 0.6],
            contributing: vec![0, 3, 3, 1],
        }
    }

    #[test]
    fn table_shape() {
        let t = table_text(&report(vec![1, 2]), "base");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[1], "method,group,fc_mean,fc_std,fc_count,tc_mean,tc_std,tc_count");
        assert_eq!(lines[2], "base,kl1,0.500000,0.000000,1,0.500000,0.000000,1");
        assert_eq!(lines[3], "base,kl2,0.500000,0.250000,2,0.500000,0.250000,2");
        assert_eq!(lines[4], "base,all,0.500000,0.204124,3,0.500000,0.204124,3");
    }

    #[test]
    fn tables_only_without_profiles_and_rerun_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(vec![1]);
        let f = emit_outputs(&r, &[], "m", dir.path()).unwrap();
        assert!(f.plots.is_empty());
        let first = fs::read(&f.table).unwrap();
        emit_outputs(&r, &[], "m", dir.path()).unwrap();
        assert_eq!(first, fs::read(&f.table).unwrap());
        assert!(!dir.path().join("profile_fc_m.png").exists());
    }

    #[test]
    fn report_and_profile_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(vec![1, 3]);
        let f = emit_outputs(&r, &[profile(1)], "x", dir.path()).unwrap();
        assert_eq!(read_report_csv(&f.report).unwrap(), r);
        let p = read_profile_csv(&f.profile_tables[0]).unwrap();
        assert_eq!(p.contributing, vec![0, 3, 3, 1]);
        assert!(p.per_slice_mean[0].is_nan());
        let img = image::open(&f.plots[0]).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }

    #[test]
    fn self_comparison_flags_nothing() {
        let r = report(vec![1, 2]);
        let c = Comparison::compute(&r, &r, "a", "a").unwrap();
        assert!(c.rows.iter().all(|row| !row.significant && row.p_value == 1.0));
        assert!(c.to_text().lines().skip(2).all(|l| !l.ends_with('*')));
    }

    #[test]
    fn bad_method_name() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_outputs(&report(vec![1]), &[], "a/b", dir.path()).unwrap_err();
        assert_eq!(err.code(), "ConfigError");
    }
}
