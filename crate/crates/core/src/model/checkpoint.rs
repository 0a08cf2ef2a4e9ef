//! Little-endian checkpoint files.
//!
//! ```text
//! "MGPM" | version u32 | d u32 | adapter_w, adapter_b, head_w, head_b as f64
//! | config_len u32, config key=value text
//! | has_optimizer u8 [ step u64 | lr, beta1, beta2, eps, weight_decay f64
//!                     | first moments | second moments ]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{AdamW, AdamWConfig, DetectorModel, Params, PipelineConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGPM";
const VERSION: u32 = 1;

fn put_f64s<W: Write>(w: &mut W, p: &Params) -> Result<()> {
    let mut buf = Vec::with_capacity(p.len() * 8);
    for b in p.blocks() {
        for v in b {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

fn get_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R, what: &'static str) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r, what)?))
}

fn get_params<R: Read>(r: &mut R, d: usize, what: &'static str) -> Result<Params> {
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        fill(r, &mut bytes, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap_or([0; 8])))
            .collect())
    };
    let blocks = [read_block(d * d)?, read_block(d)?, read_block(2 * d)?, read_block(2)?];
    Params::from_blocks(d, blocks)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &DetectorModel, opt: Option<&AdamW>) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(model.d() as u32).to_le_bytes())?;
    put_f64s(w, &model.params)?;
    let text = model.config().to_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    match opt {
        None => w.write_all(&[0])?,
        Some(o) => {
            w.write_all(&[1])?;
            w.write_all(&o.step.to_le_bytes())?;
            let h = o.hyper;
            for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
                w.write_all(&v.to_le_bytes())?;
            }
            put_f64s(w, &o.m)?;
            put_f64s(w, &o.v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(DetectorModel, Option<AdamW>)> {
    let mut magic = [0u8; 4];
    fill(r, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = get_u32(r, "checkpoint version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d = get_u32(r, "checkpoint dimension")? as usize;
    let params = get_params(r, d, "parameters")?;
    let len = get_u32(r, "config length")? as usize;
    let mut text = vec![0u8; len];
    fill(r, &mut text, "config")?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
    let config = PipelineConfig::from_text(&text)?;
    let model = DetectorModel::from_params(params, config)?;
    let mut flag = [0u8; 1];
    fill(r, &mut flag, "optimizer flag")?;
    let opt = match flag[0] {
        0 => None,
        1 => {
            let step = get_u64(r, "optimizer step")?;
            let mut h = [0.0; 5];
            for v in h.iter_mut() {
                *v = get_f64(r, "optimizer hyperparameters")?;
            }
            let [lr, beta1, beta2, eps, weight_decay] = h;
            Some(AdamW {
                hyper: AdamWConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                },
                step,
                m: get_params(r, d, "first moments")?,
                v: get_params(r, d, "second moments")?,
            })
        }
        other => {
            return Err(Error::InvalidRecord(format!("bad optimizer flag {other}")));
        }
    };
    Ok((model, opt))
}

pub fn save_checkpoint(path: &Path, model: &DetectorModel, opt: Option<&AdamW>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, opt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorModel, Option<AdamW>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
