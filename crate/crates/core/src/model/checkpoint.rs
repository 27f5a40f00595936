//! Binary checkpoint format, all integers and values little-endian:
//!
//! ```text
//! "LKAR"  u32 version  u32 len  config JSON
//! u32 tensor count, then per tensor:
//!     u32 len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 values[numel]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ModelError, ModelState, ParamTensor, Result, FORMAT_VERSION};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LKAR";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ModelError::Corrupt(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode(state: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&state.format_version.to_le_bytes());
    let config = serde_json::to_vec(&state.config)?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, state.params.len())?;
    for (name, p) in &state.params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut out, d)?;
        }
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn decode(buf: &[u8]) -> Result<ModelState> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = c.len()?;
    let config: ModelConfig = serde_json::from_slice(c.take(n)?)?;
    let count = c.len()?;
    let mut params = IndexMap::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.len()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.len()?;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| ModelError::Corrupt(format!("{name}: shape overflow")))?;
        let bytes = c.take(numel.checked_mul(4).ok_or(ModelError::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if params.insert(name.clone(), ParamTensor { shape, data }).is_some() {
            return Err(ModelError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let state = ModelState {
        format_version: version,
        config,
        params,
    };
    state.validate()?;
    Ok(state)
}

/// Values are written at single precision.
pub fn write_checkpoint(state: &ModelState, mut w: impl Write) -> Result<()> {
    state.validate()?;
    w.write_all(&encode(state)?)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelState> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(state, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    read_checkpoint(std::fs::File::open(path)?)
}
