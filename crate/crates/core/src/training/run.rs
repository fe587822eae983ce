//! Run directories: effective config, config hash, per-fold artifacts.
//!
//! Layout of `<root>/<run_id>/`:
//! - `config.toml`: effective configuration; its SHA-256 is the config hash
//! - `run.txt`: key=value record (run id, hash, setting, seed, folds, digests)
//! - `timing.txt`: wall-clock start/end, kept apart so `run.txt` is reproducible
//! - `fold_<k>/{segmenter,discriminator,aux_discriminator}/`, `fold_<k>/curves.csv`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Setting};
use crate::error::{bail, Error, Result};
use crate::networks::{load_segmenter, SegmentationNetwork};

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "run.txt";
pub const TIMING_FILE: &str = "timing.txt";

pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub setting: Setting,
    pub seed: u64,
    pub fold_count: usize,
    /// Segmenter digest (weights and statistics) per completed fold.
    pub fold_digests: BTreeMap<usize, String>,
}

impl RunRecord {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "run_id={}\nconfig_hash={}\nsetting={}\nseed={}\nfold_count={}\n",
            self.run_id, self.config_hash, self.setting, self.seed, self.fold_count
        );
        for (k, d) in &self.fold_digests {
            out.push_str(&format!("fold.{k}.segmenter=fold_{k}/segmenter\nfold.{k}.digest={d}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                bail!(Parse, "run record line without '=': {line:?}");
            };
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Parse(format!("run record lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Parse(format!("run record: bad {k}"))) };
        let mut fold_digests = BTreeMap::new();
        for (k, v) in &kv {
            if let Some(idx) = k.strip_prefix("fold.").and_then(|r| r.strip_suffix(".digest")) {
                let i = idx.parse().map_err(|_| Error::Parse(format!("run record: bad fold key {k}")))?;
                fold_digests.insert(i, v.clone());
            }
        }
        Ok(Self {
            run_id: get("run_id")?,
            config_hash: get("config_hash")?,
            setting: get("setting")?.parse()?,
            seed: num("seed")?,
            fold_count: num("fold_count")? as usize,
            fold_digests,
        })
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates a fresh run directory under `root` named `<setting>-<hash12>`,
/// suffixed `-2`, `-3`, ... when taken, and stores the effective config.
pub fn create_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<(PathBuf, RunRecord)> {
    let text = cfg.to_toml()?;
    let hash = config_hash(&text);
    let stem = format!("{}-{}", cfg.setting.as_str().to_ascii_lowercase(), &hash[..12]);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut run_id = stem.clone();
    let mut n = 1;
    loop {
        let dir = root.join(&run_id);
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                run_id = format!("{stem}-{n}");
            }
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    let dir = root.join(&run_id);
    write(&dir.join(CONFIG_FILE), &text)?;
    write(&dir.join(TIMING_FILE), &format!("started_unix={}\n", unix_now()))?;
    let record = RunRecord {
        run_id,
        config_hash: hash,
        setting: cfg.setting,
        seed: cfg.seed,
        fold_count: cfg.fold_count,
        fold_digests: BTreeMap::new(),
    };
    Ok((dir, record))
}

/// Reads the stored config and checks it against the recorded hash.
pub fn load_run_config(run_dir: &Path) -> Result<(ExperimentConfig, String)> {
    let p = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let hash = config_hash(&text);
    let rec = run_dir.join(RECORD_FILE);
    if rec.exists() {
        let r = RunRecord::parse(&fs::read_to_string(&rec).map_err(|e| Error::io(&rec, e))?)?;
        if r.config_hash != hash {
            bail!(Data, "{}: config hash does not match the run record", run_dir.display());
        }
    }
    Ok((ExperimentConfig::from_toml(&text, false, &toml::Table::new())?, hash))
}

/// Records digests of every `fold_<k>/segmenter` present and the end time.
pub fn finalize_run(run_dir: &Path, record: &mut RunRecord) -> Result<()> {
    record.fold_digests.clear();
    for k in 0..record.fold_count {
        let dir = run_dir.join(format!("fold_{k}")).join("segmenter");
        if dir.exists() {
            let (net, _) = load_segmenter(&dir)?;
            record.fold_digests.insert(k, net.params.digest(true));
        }
    }
    write(&run_dir.join(RECORD_FILE), &record.to_text())?;
    let t = run_dir.join(TIMING_FILE);
    let mut timing = fs::read_to_string(&t).unwrap_or_default();
    timing.push_str(&format!("finished_unix={}\n", unix_now()));
    write(&t, &timing)
}

/// Fold segmenters of a run directory, in fold order.
pub fn load_run_models(run_dir: &Path) -> Result<(ExperimentConfig, Vec<SegmentationNetwork<f32>>)> {
    let (cfg, _) = load_run_config(run_dir)?;
    let mut models = Vec::new();
    for k in 0..cfg.fold_count {
        let dir = run_dir.join(format!("fold_{k}")).join("segmenter");
        if dir.exists() {
            let (net, _) = load_segmenter(&dir)?;
            if net.config() != &cfg.segmenter {
                bail!(Shape, "{}: checkpoint does not match the run config", dir.display());
            }
            models.push(net);
        }
    }
    if models.is_empty() {
        bail!(Data, "{}: no fold checkpoints found", run_dir.display());
    }
    Ok((cfg, models))
}
