//! Model checkpoints: magic `HGTM`, a config block, then every weight as
//! little-endian `f32` in declared layout order.

use std::io::{Read, Write};

use super::model::{TinyLM, TinyLMConfig};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HGTM";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &TinyLM, mut sink: W) -> Result<()> {
    let c = &model.config;
    sink.write_all(&MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.context_len] {
        sink.write_all(&(v as u32).to_le_bytes())?;
    }
    sink.write_all(&c.seed.to_le_bytes())?;
    sink.write_all(&(model.params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.params.len() * 4);
    for &p in &model.params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], section: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            section: section.to_string(),
        },
        _ => Error::Io(e),
    })
}

fn u32_at<R: Read>(src: &mut R, section: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b, section)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_at<R: Read>(src: &mut R, section: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b, section)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut src: R) -> Result<TinyLM> {
    let mut magic = [0u8; 4];
    read_exact(&mut src, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32_at(&mut src, "version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32_at(&mut src, "config")? as usize;
    }
    let config = TinyLMConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        context_len: dims[4],
        seed: u64_at(&mut src, "config")?,
    };
    config.validate()?;
    let n = u64_at(&mut src, "param_count")? as usize;
    let expected = super::model::Layout::new(&config).total;
    if n != expected {
        return Err(Error::Malformed(format!("{n} weights stored, layout needs {expected}")));
    }
    let mut raw = vec![0u8; n * 4];
    read_exact(&mut src, &mut raw, "weights")?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    TinyLM::from_params(config, params)
}
