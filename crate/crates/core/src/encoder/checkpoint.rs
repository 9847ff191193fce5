//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "M3CKPT01"
//! header     u64 length, then that many bytes of UTF-8 JSON
//! count      u64 number of tensors
//! tensor*    u32 name length, name bytes,
//!            u32 rank, rank × u64 dims,
//!            product(dims) × f64 values
//! ```
//!
//! Tensors appear in the declaration order of the model's parameters.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::Parameters;

const MAGIC: &[u8; 8] = b"M3CKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    /// Append every tensor of `params`, names prefixed with `section.`.
    pub fn push_section<P: Parameters + ?Sized>(&mut self, section: &str, params: &P) {
        params.visit(&mut |name, shape, data| {
            self.tensors.push(TensorRecord {
                name: format!("{section}.{name}"),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
    }

    /// Fill `params` from the tensors of `section`; names and shapes must
    /// match exactly and in order.
    pub fn load_section<P: Parameters + ?Sized>(&self, section: &str, params: &mut P) -> Result<()> {
        let prefix = format!("{section}.");
        let mut records = self.tensors.iter().filter(|t| t.name.starts_with(&prefix));
        let mut failure = None;
        params.visit_mut(&mut |name, shape, data| {
            if failure.is_some() {
                return;
            }
            match records.next() {
                Some(rec) if rec.name[prefix.len()..] == *name && rec.shape == shape => {
                    data.copy_from_slice(&rec.data);
                }
                Some(rec) => {
                    failure = Some(format!(
                        "expected {section}.{name} {shape:?}, found {} {:?}",
                        rec.name, rec.shape
                    ))
                }
                None => failure = Some(format!("missing tensor {section}.{name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::ModelMismatch(msg));
        }
        if let Some(extra) = records.next() {
            return Err(Error::ModelMismatch(format!("unexpected tensor {}", extra.name)));
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(&ckpt.header)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for t in &ckpt.tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &dim in &t.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_len<R: Read>(r: &mut R, limit: u64) -> Result<usize> {
    let n = u64::from_le_bytes(read_array::<8, _>(r)?);
    if n > limit {
        return Err(Error::Format(format!("implausible length {n} in checkpoint")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let header_len = read_len(&mut r, 1 << 32)?;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated checkpoint header: {e}")))?;
    let header = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = read_len(&mut r, 1 << 20)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array::<4, _>(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = u32::from_le_bytes(read_array::<4, _>(&mut r)?) as usize;
        let shape = (0..rank)
            .map(|_| read_len(&mut r, 1 << 32))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_array::<8, _>(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        tensors.push(TensorRecord { name, shape, data });
    }
    Ok(Checkpoint { header, tensors })
}
