//! Single-file checkpoints.
//!
//! Layout: the magic bytes `OAUGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` values in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use onlineaug_tape::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::BnTable;
use crate::params::ParamSet;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"OAUGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    consecutive_divergent: usize,
    config: RunConfig,
    config_fingerprint: String,
    target_fingerprint: String,
    augmenter_fingerprints: Vec<String>,
    sgd_started: bool,
    adam_steps: Vec<u64>,
    rng_data: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
}

fn push_set(out: &mut Vec<(String, Tensor)>, prefix: &str, ps: &ParamSet) {
    for (name, t) in ps.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn push_bn(out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &BnTable) {
    for (l, banks) in bn.layers().iter().enumerate() {
        for (b, rs) in banks.iter().enumerate() {
            let c = rs.mean.len();
            out.push((format!("{prefix}/bn{l}.bank{b}.mean"), Tensor::from_vec(&[c], rs.mean.clone())));
            out.push((format!("{prefix}/bn{l}.bank{b}.var"), Tensor::from_vec(&[c], rs.var.clone())));
        }
    }
}

/// Every tensor of the training state, in a fixed order.
fn state_tensors(t: &Trainer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    push_set(&mut out, "target", &t.target.params);
    push_bn(&mut out, "target", &t.target.bn);
    push_set(&mut out, "target_sgd", &t.target_opt.buf);
    for (i, s) in t.slots.iter().enumerate() {
        let p = format!("aug{i}.{}", s.aug.kind());
        push_set(&mut out, &p, s.aug.params());
        if let Some(bn) = s.aug.bn() {
            push_bn(&mut out, &p, bn);
        }
        push_set(&mut out, &format!("{p}_adam_m"), &s.opt.m);
        push_set(&mut out, &format!("{p}_adam_v"), &s.opt.v);
    }
    out
}

/// Writes the values in `src` (same order as [`state_tensors`]) into `t`.
fn restore_tensors(t: &mut Trainer, src: &mut impl Iterator<Item = Tensor>) -> Result<()> {
    fn set(ps: &mut ParamSet, src: &mut impl Iterator<Item = Tensor>) -> Result<()> {
        for dst in ps.tensors_mut() {
            *dst = src.next().ok_or_else(|| Error::CorruptCheckpoint("missing tensor".into()))?;
        }
        Ok(())
    }
    fn bn(table: &mut BnTable, src: &mut impl Iterator<Item = Tensor>) -> Result<()> {
        for banks in table.layers_mut() {
            for rs in banks {
                rs.mean = src.next().ok_or_else(|| Error::CorruptCheckpoint("missing tensor".into()))?.into_data();
                rs.var = src.next().ok_or_else(|| Error::CorruptCheckpoint("missing tensor".into()))?.into_data();
            }
        }
        Ok(())
    }
    set(&mut t.target.params, src)?;
    bn(&mut t.target.bn, src)?;
    set(&mut t.target_opt.buf, src)?;
    for s in &mut t.slots {
        set(s.aug.params_mut(), src)?;
        if let Some(table) = s.aug.bn_mut() {
            bn(table, src)?;
        }
        set(&mut s.opt.m, src)?;
        set(&mut s.opt.v, src)?;
    }
    Ok(())
}

pub fn save(path: &Path, run: &RunConfig, t: &Trainer) -> Result<()> {
    let tensors = state_tensors(t);
    let header = Header {
        step: t.step,
        consecutive_divergent: t.consecutive_divergent,
        config: run.clone(),
        config_fingerprint: run.fingerprint(),
        target_fingerprint: t.target.fingerprint(),
        augmenter_fingerprints: t.slots.iter().map(|s| s.aug.fingerprint()).collect(),
        sgd_started: t.target_opt.started,
        adam_steps: t.slots.iter().map(|s| s.opt.step).collect(),
        rng_data: t.rng_data.clone(),
        rng_noise: t.rng_noise.clone(),
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 20 + 8 * tensors.iter().map(|(_, v)| v.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, v) in &tensors {
        for x in v.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write then rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A decoded checkpoint.
pub struct Loaded {
    pub run: RunConfig,
    pub trainer: Trainer,
}

/// Expected layout of the trainer a checkpoint is loaded into.
pub struct Layout {
    pub task: crate::data::TaskKind,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
}

/// Reads a checkpoint. The trainer is rebuilt from `config` (or the
/// embedded config), and every architecture fingerprint must match.
pub fn load(path: &Path, layout: impl FnOnce(&RunConfig) -> Result<Layout>, config: Option<&RunConfig>) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let mut run = config.cloned().unwrap_or_else(|| header.config.clone());
    run.trainer.seed = run.seed;
    let lay = layout(&run)?;
    let mut t = Trainer::new(run.trainer.clone(), lay.task, lay.channels, lay.size, lay.classes)?;
    let found = t.target.fingerprint();
    if found != header.target_fingerprint {
        return Err(Error::Fingerprint {
            kind: "target architecture",
            expected: header.target_fingerprint,
            found,
        });
    }
    let found: Vec<String> = t.slots.iter().map(|s| s.aug.fingerprint()).collect();
    if found != header.augmenter_fingerprints {
        return Err(Error::Fingerprint {
            kind: "augmenter architecture",
            expected: header.augmenter_fingerprints.join(","),
            found: found.join(","),
        });
    }
    let expected = state_tensors(&t);
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, v), e)| *n != e.name || v.shape() != e.shape.as_slice())
    {
        return Err(Error::CorruptCheckpoint("tensor table does not match the architecture".into()));
    }
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let data = &body[hlen..];
    if data.len() != 8 * total {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} payload bytes, found {}",
            8 * total,
            data.len()
        )));
    }
    let mut off = 0;
    let mut values = header.tensors.iter().map(|e| {
        let n: usize = e.shape.iter().product();
        let v: Vec<f64> = data[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += 8 * n;
        Tensor::from_vec(&e.shape, v)
    });
    restore_tensors(&mut t, &mut values)?;
    t.step = header.step;
    t.consecutive_divergent = header.consecutive_divergent;
    t.target_opt.started = header.sgd_started;
    for (s, &k) in t.slots.iter_mut().zip(&header.adam_steps) {
        s.opt.step = k;
    }
    t.rng_data = header.rng_data;
    t.rng_noise = header.rng_noise;
    Ok(Loaded { run, trainer: t })
}

/// Config fingerprint stored in a checkpoint, without loading tensors.
pub fn stored_config_fingerprint(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(bytes.get(20..20 + hlen).ok_or_else(|| Error::CorruptCheckpoint("truncated header".into()))?)?;
    Ok(header.config_fingerprint)
}
