//! Checkpoint directories.
//!
//! A checkpoint directory holds `meta.toml` (network kind, configuration,
//! epoch, seed) and `params.bin`:
//!
//! ```text
//! magic      8 bytes  "KSPARAM1"
//! count      u32 LE   number of tensors
//! per tensor, in network order:
//!   name_len u32 LE, name UTF-8 bytes
//!   kind     u8       0 = trainable, 1 = buffer
//!   ndim     u32 LE, dims ndim × u32 LE
//!   values   prod(dims) × f32 LE
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::networks::discriminator::{build_discriminator, DiscriminatorConfig, DomainDiscriminator};
use crate::networks::segmenter::{build_segmenter, AsppConfig, SegNetConfig, SegmentationNetwork};
use crate::nn::{ParamEntry, ParamKind, ParamSet};
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"KSPARAM1";
pub const META_FILE: &str = "meta.toml";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub epoch: usize,
    /// Decimal string; TOML integers cannot hold every u64.
    pub seed: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<SegNetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspp: Option<AsppConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
}

pub fn encode_params<T: Scalar>(ps: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ps.entries().len() as u32).to_le_bytes());
    for e in ps.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!(Parse, "parameter blob truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(buf: &[u8]) -> Result<Vec<ParamEntry<f32>>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        bail!(Parse, "not a parameter blob (bad magic)");
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?
            .to_string();
        let kind = match c.take(1)?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => bail!(Parse, "unknown parameter kind {k}"),
        };
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push(ParamEntry { name, shape, kind, data });
    }
    if c.pos != buf.len() {
        bail!(Parse, "{} trailing bytes after parameter blob", buf.len() - c.pos);
    }
    Ok(entries)
}

/// Overwrites `ps` from decoded entries; names, kinds and shapes must match.
pub fn load_into<T: Scalar>(ps: &mut ParamSet<T>, entries: &[ParamEntry<f32>]) -> Result<()> {
    if ps.entries().len() != entries.len() {
        bail!(Shape, "checkpoint has {} tensors, network has {}", entries.len(), ps.entries().len());
    }
    for (dst, src) in ps.entries_mut().iter_mut().zip(entries) {
        if dst.name != src.name || dst.shape != src.shape || dst.kind != src.kind {
            bail!(Shape, "checkpoint tensor {} {:?} does not match network tensor {} {:?}", src.name, src.shape, dst.name, dst.shape);
        }
        dst.data = src.data.iter().map(|&v| T::of(v as f64)).collect();
    }
    Ok(())
}

fn write_dir<T: Scalar>(dir: &Path, meta: &CheckpointMeta, ps: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(meta).map_err(|e| Error::Parse(e.to_string()))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let p = dir.join(PARAMS_FILE);
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    f.write_all(&encode_params(ps)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

fn read_entries(dir: &Path) -> Result<Vec<ParamEntry<f32>>> {
    let p = dir.join(PARAMS_FILE);
    let mut buf = Vec::new();
    fs::File::open(&p)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&p, e))?;
    decode_params(&buf)
}

impl<T: Scalar> SegmentationNetwork<T> {
    pub fn save(&self, dir: &Path, epoch: usize, seed: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "segmenter".into(),
            epoch,
            seed: seed.to_string(),
            segmenter: Some(self.config().clone()),
            aspp: self.aspp_config().cloned(),
            discriminator: None,
            in_channels: None,
        };
        write_dir(dir, &meta, &self.params)
    }
}

pub fn load_segmenter(dir: &Path) -> Result<(SegmentationNetwork<f32>, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let Some(cfg) = meta.segmenter.clone().filter(|_| meta.kind == "segmenter") else {
        bail!(Parse, "{} is not a segmenter checkpoint", dir.display());
    };
    let mut net = build_segmenter::<f32>(&cfg, meta.aspp.as_ref(), 0)?;
    load_into(&mut net.params, &read_entries(dir)?)?;
    Ok((net, meta))
}

impl<T: Scalar> DomainDiscriminator<T> {
    pub fn save(&self, dir: &Path, epoch: usize, seed: u64) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "discriminator".into(),
            epoch,
            seed: seed.to_string(),
            segmenter: None,
            aspp: None,
            discriminator: Some(self.config().clone()),
            in_channels: Some(self.in_channels()),
        };
        write_dir(dir, &meta, &self.params)
    }
}

pub fn load_discriminator(dir: &Path) -> Result<(DomainDiscriminator<f32>, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let (Some(cfg), Some(inc)) = (meta.discriminator.clone(), meta.in_channels) else {
        bail!(Parse, "{} is not a discriminator checkpoint", dir.display());
    };
    let mut d = build_discriminator::<f32>(&cfg, inc, 0)?;
    load_into(&mut d.params, &read_entries(dir)?)?;
    Ok((d, meta))
}
