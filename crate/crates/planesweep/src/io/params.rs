//! Versioned binary parameter blobs: magic bytes, a shape table of named
//! tensors, then little-endian f32 payloads. Used for the tiny feature
//! encoder, the patch sampler and the 3D regularizer weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSWPARM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    /// Values are kept as f64 in memory; the file stores f32.
    pub values: Vec<f64>,
}

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBlob {
    tensors: Vec<Tensor>,
}

impl ParamBlob {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: &[usize], values: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            values,
        });
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fetch a tensor and check its shape against the expected dims.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f64]> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Structure(format!("parameter tensor '{name}' missing")))?;
        if t.dims != dims {
            return Err(Error::Structure(format!(
                "parameter tensor '{name}' has shape {:?}, expected {:?}",
                t.dims, dims
            )));
        }
        Ok(&t.values)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Structure(
                "bad parameter file magic (not a parameter blob or wrong version)".into(),
            ));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(Error::Structure("parameter tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Structure("parameter tensor name is not utf-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Structure("parameter tensor rank too large".into()));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let len: usize = dims.iter().product();
            if len > 100_000_000 {
                return Err(Error::Structure("parameter tensor too large".into()));
            }
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push(Tensor { name, dims, values });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut blob = ParamBlob::new();
        blob.push("w", &[2, 3], vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.0]);
        blob.push("b", &[2], vec![0.125, 3.5]);
        let mut bytes = Vec::new();
        blob.write_to(&mut bytes).unwrap();
        let back = ParamBlob::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, blob);
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTPARAM\x00\x00\x00\x00";
        assert!(ParamBlob::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn expect_checks_shape() {
        let mut blob = ParamBlob::new();
        blob.push("w", &[4], vec![0.0; 4]);
        assert!(blob.expect("w", &[4]).is_ok());
        assert!(blob.expect("w", &[2, 2]).is_err());
        assert!(blob.expect("missing", &[4]).is_err());
    }
}
