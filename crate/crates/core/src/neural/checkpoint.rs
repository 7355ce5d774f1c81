//! Binary parameter files.
//!
//! Layout, all integers little-endian: the magic `DHNN`, a version byte, a
//! `u32`-prefixed UTF-8 header, a `u32` tensor count, then per tensor a
//! `u32`-prefixed name, a `u32` rank, `u64` dimensions and the `f64` values
//! in row-major order. Tensors are written in name order.

use ndarray::Array2;

use super::{NeuralError, ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DHNN";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(params: &ParameterSet, header: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.n_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        let (r, c) = t.shape();
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        for x in t.value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NeuralError> {
        if self.bytes.len() - self.pos < n {
            return Err(NeuralError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, NeuralError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| NeuralError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Returns the header and the parameters.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(String, ParameterSet), NeuralError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let header = r.string("header")?;
    let count = r.u32("tensor count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(NeuralError::Checkpoint(format!("{name}: rank {rank}, expected 2")));
        }
        let rows = r.u64("dimension")? as usize;
        let cols = r.u64("dimension")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| NeuralError::Checkpoint(format!("{name}: dimensions overflow")))?;
        let raw = r.take(n * 8, &name)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).unwrap();
        if params.get(&name).is_some() {
            return Err(NeuralError::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(value));
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::Checkpoint("trailing bytes".into()));
    }
    Ok((header, params))
}
