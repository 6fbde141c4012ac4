//! Versioned, checksummed model checkpoints. The byte layout is described in
//! `docs/FORMATS.md`.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelSpec, Trainer};
use crate::binio::{get_bytes, get_f64, get_f64s, get_u32, get_u64, put_bytes, put_f64, put_f64s, put_u32, put_u64};
use crate::data::FieldLayout;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, FtrlAccumulators, FtrlConfig, Moments, Optimizer};

const MAGIC: &[u8; 4] = b"DFMM";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const CHECKSUM_LEN: usize = 32;
const MAX_TEXT: usize = 1 << 20;

fn opt_f64(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn from_opt_f64(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn encode(model: &Model, trainer: Option<&Trainer>) -> Result<Vec<u8>> {
    let mut b: Vec<u8> = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, MODEL_FORMAT_VERSION)?;
    put_u64(&mut b, 0)?; // total length, patched below

    let spec = toml::to_string(model.spec()).map_err(|e| Error::BadFormat(format!("spec: {e}")))?;
    put_bytes(&mut b, spec.as_bytes())?;
    match model.vocab_hash() {
        Some(h) => {
            b.push(1);
            b.extend_from_slice(h);
        }
        None => {
            b.push(0);
            b.extend_from_slice(&[0; 32]);
        }
    }
    let offsets = model.layout().offsets();
    put_u64(&mut b, offsets.len() as u64)?;
    for &o in offsets {
        put_u64(&mut b, o as u64)?;
    }
    let meta = &model.meta;
    put_u64(&mut b, meta.epochs)?;
    put_u64(&mut b, meta.seed)?;
    put_u64(&mut b, meta.steps)?;
    put_f64(&mut b, opt_f64(meta.final_auc))?;
    put_f64(&mut b, opt_f64(meta.final_logloss))?;

    let blocks = model.blocks();
    put_u32(&mut b, blocks.len() as u32)?;
    for (name, data) in &blocks {
        put_bytes(&mut b, name.as_bytes())?;
        put_u64(&mut b, data.len() as u64)?;
        put_f64s(&mut b, data)?;
    }

    match trainer {
        None => b.push(0),
        Some(t) => {
            match t.optimizer() {
                Optimizer::Adam { config, t: step, slots } => {
                    b.push(1);
                    put_u64(&mut b, t.seed())?;
                    put_u64(&mut b, t.steps())?;
                    put_f64s(&mut b, &[config.lr, config.beta1, config.beta2, config.eps])?;
                    put_u64(&mut b, *step)?;
                    put_u32(&mut b, slots.len() as u32)?;
                    for s in slots {
                        put_u64(&mut b, s.m.len() as u64)?;
                        put_f64s(&mut b, &s.m)?;
                        put_f64s(&mut b, &s.v)?;
                    }
                }
                Optimizer::Ftrl { config, slots } => {
                    b.push(2);
                    put_u64(&mut b, t.seed())?;
                    put_u64(&mut b, t.steps())?;
                    put_f64s(&mut b, &[config.alpha, config.beta, config.l1, config.l2])?;
                    put_u32(&mut b, slots.len() as u32)?;
                    for s in slots {
                        put_u64(&mut b, s.z.len() as u64)?;
                        put_f64s(&mut b, &s.z)?;
                        put_f64s(&mut b, &s.n)?;
                    }
                }
            }
        }
    }

    let total = (b.len() + CHECKSUM_LEN) as u64;
    b[8..16].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    Ok(b)
}

/// Write `model`, and optionally the trainer state for exact resumption.
pub fn save_model(model: &Model, trainer: Option<&Trainer>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !model.all_finite() {
        return Err(Error::NonFinite("refusing to save a model with non-finite parameters".into()));
    }
    let bytes = encode(model, trainer)?;
    let mut f = fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::at_path(path, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(load_checkpoint(path)?.0)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<Trainer>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode(&bytes)
}

fn remaining(c: &Cursor<&[u8]>) -> u64 {
    c.get_ref().len() as u64 - c.position()
}

fn read_f64s(c: &mut Cursor<&[u8]>, n: u64) -> Result<Vec<f64>> {
    let rem = remaining(c);
    get_f64s(c, n, Some(rem))
}

fn read_slot(c: &mut Cursor<&[u8]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = get_u64(c)?;
    let a = read_f64s(c, n)?;
    let b = read_f64s(c, n)?;
    Ok((a, b))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(Model, Option<Trainer>)> {
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(&bytes[..bytes.len().min(4)]) { Error::Truncated } else { Error::BadFormat("not a model file".into()) });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadFormat("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Truncated);
    }
    let total = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if (bytes.len() as u64) < total {
        return Err(Error::Truncated);
    }
    if bytes.len() as u64 != total {
        return Err(Error::ChecksumMismatch);
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::ChecksumMismatch);
    }

    let mut c = Cursor::new(body);
    c.set_position(HEADER_LEN as u64);
    let spec_text = String::from_utf8(get_bytes(&mut c, MAX_TEXT)?).map_err(|_| Error::BadFormat("spec is not UTF-8".into()))?;
    let spec: ModelSpec = toml::from_str(&spec_text).map_err(|e| Error::BadFormat(format!("spec: {e}")))?;
    let mut flag = [0u8; 33];
    std::io::Read::read_exact(&mut c, &mut flag).map_err(crate::binio::eof_to_truncated)?;
    let vocab_hash = (flag[0] == 1).then(|| flag[1..].try_into().unwrap());

    let n_offsets = get_u64(&mut c)?;
    if n_offsets.saturating_mul(8) > remaining(&c) {
        return Err(Error::Truncated);
    }
    let offsets = (0..n_offsets).map(|_| get_u64(&mut c).map(|o| o as usize)).collect::<Result<Vec<_>>>()?;
    let layout = FieldLayout::from_offsets(offsets)?;

    let mut model = Model::zeros(spec, &layout)?;
    model.set_vocab_hash(vocab_hash);
    model.meta.epochs = get_u64(&mut c)?;
    model.meta.seed = get_u64(&mut c)?;
    model.meta.steps = get_u64(&mut c)?;
    model.meta.final_auc = from_opt_f64(get_f64(&mut c)?);
    model.meta.final_logloss = from_opt_f64(get_f64(&mut c)?);

    let n_blocks = get_u32(&mut c)? as usize;
    let mut blocks = model.blocks_mut();
    if n_blocks != blocks.len() {
        return Err(Error::BadFormat(format!("expected {} parameter blocks, found {n_blocks}", blocks.len())));
    }
    for (name, dst) in blocks.iter_mut() {
        let found = get_bytes(&mut c, 256)?;
        if found != name.as_bytes() {
            return Err(Error::BadFormat(format!("expected block {name}, found {}", String::from_utf8_lossy(&found))));
        }
        let len = get_u64(&mut c)?;
        if len != dst.len() as u64 {
            return Err(Error::DimensionMismatch {
                context: "parameter block length",
                expected: dst.len(),
                got: len as usize,
            });
        }
        let data = read_f64s(&mut c, len)?;
        dst.copy_from_slice(&data);
    }
    drop(blocks);
    if !model.all_finite() {
        return Err(Error::NonFinite("model file holds non-finite parameters".into()));
    }

    let mut tag = [0u8; 1];
    std::io::Read::read_exact(&mut c, &mut tag).map_err(crate::binio::eof_to_truncated)?;
    let trainer = match tag[0] {
        0 => None,
        1 | 2 => {
            let seed = get_u64(&mut c)?;
            let steps = get_u64(&mut c)?;
            let h = read_f64s(&mut c, 4)?;
            let optimizer = if tag[0] == 1 {
                let config = AdamConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                };
                let t = get_u64(&mut c)?;
                let n = get_u32(&mut c)?;
                let slots = (0..n).map(|_| read_slot(&mut c).map(|(m, v)| Moments { m, v })).collect::<Result<_>>()?;
                Optimizer::Adam { config, t, slots }
            } else {
                let config = FtrlConfig {
                    alpha: h[0],
                    beta: h[1],
                    l1: h[2],
                    l2: h[3],
                };
                let n = get_u32(&mut c)?;
                let slots = (0..n).map(|_| read_slot(&mut c).map(|(z, n)| FtrlAccumulators { z, n })).collect::<Result<_>>()?;
                Optimizer::Ftrl { config, slots }
            };
            Some(Trainer::from_parts(optimizer, seed, steps))
        }
        t => return Err(Error::BadFormat(format!("unknown optimizer tag {t}"))),
    };
    if remaining(&c) != 0 {
        return Err(Error::BadFormat("trailing bytes after optimizer state".into()));
    }
    Ok((model, trainer))
}
