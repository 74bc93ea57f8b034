//! Named-parameter checkpoint container.
//!
//! Layout (all little-endian):
//! magic "FLCK", version u16, dtype tag u8, rng-state count u8,
//! rng states (56 bytes each), metadata blob (u32 length + bytes),
//! parameter count u32, then per parameter: name (u16 length + UTF-8),
//! rank u8, dims (u32 each), raw element data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint holds dtype tag {found}, expected {expected}")]
    DtypeMismatch { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// A set of named tensors plus RNG stream states and an opaque metadata blob.
pub struct Checkpoint<F> {
    pub meta: Vec<u8>,
    pub rng_states: Vec<[u8; 56]>,
    pub params: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(F::DTYPE.tag());
        out.push(self.rng_states.len() as u8);
        for state in &self.rng_states {
            out.extend_from_slice(state);
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let dtype = cur.take(1)?[0];
        if dtype != F::DTYPE.tag() {
            return Err(CheckpointError::DtypeMismatch { found: dtype, expected: F::DTYPE.tag() });
        }
        let n_rng = cur.take(1)?[0] as usize;
        let mut rng_states = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            let mut state = [0u8; 56];
            state.copy_from_slice(cur.take(56)?);
            rng_states.push(state);
        }
        let meta_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let meta = cur.take(meta_len)?.to_vec();
        let n_params = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let elem = F::DTYPE.size_bytes();
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("non-UTF-8 parameter name".into()))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * elem)?;
            let data: Vec<F> = raw.chunks_exact(elem).map(F::read_le).collect();
            params.push((name, Tensor::new(shape, data)));
        }
        Ok(Checkpoint { meta, rng_states, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Read only the dtype tag, for precision dispatch before full load.
pub fn peek_dtype(path: &Path) -> Result<Dtype, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    Dtype::from_tag(head[6])
        .ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype tag {}", head[6])))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_state_bytes, stream, StreamId};

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = Checkpoint::<f64> {
            meta: br#"{"kind":"test"}"#.to_vec(),
            rng_states: vec![rng_state_bytes(&stream(9, StreamId::Dropout))],
            params: vec![
                ("w".into(), Tensor::from_f64(vec![2, 3], &[1.0, -2.5, 0.0, 1e-300, f64::MAX, 3.125])),
                ("b".into(), Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3])),
            ],
        };
        let bytes = ckpt.to_bytes();
        let ckpt2 = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt2.to_bytes(), bytes);
        assert_eq!(ckpt2.params.len(), 2);
        assert_eq!(ckpt2.find("w").unwrap(), &ckpt.params[0].1);
    }

    #[test]
    fn wrong_magic_and_dtype_rejected() {
        let ckpt = Checkpoint::<f32> { meta: vec![], rng_states: vec![], params: vec![] };
        let mut bytes = ckpt.to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_load_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint::<f32> {
            meta: vec![1, 2, 3],
            rng_states: vec![],
            params: vec![("x".into(), Tensor::from_f64(vec![1], &[0.5]))],
        };
        ckpt.save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F32);
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    }
}
