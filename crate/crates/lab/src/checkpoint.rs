//! Named-tensor container.
//!
//! Layout, all integers little-endian: magic `LFTR`, format version `u16`,
//! tensor count `u32`; then per tensor the name length `u16`, the UTF-8
//! name, the rank `u8`, each dimension as `u32`, and the values as 32-bit
//! floats in row-major order. Tensors are written in name order.

use std::path::Path;

use lft_core::encoder::{self, EncoderConfig};
use lft_core::tensor::{ParamStore, Scalar, Tensor};

use crate::error::{LabError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"LFTR";
pub const VERSION: u16 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.iter().count() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> LabError {
        LabError::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!("truncated while reading {what} at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a container into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail("bad magic bytes (not an LFTR checkpoint)"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let raw_name = r.take(len, "name")?.to_vec();
        let name = String::from_utf8(raw_name).map_err(|_| r.fail(format!("tensor {i} has a non-UTF-8 name")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(store))
}

/// Every tensor in the file, all marked trainable.
pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, t) in decode(&fsutil::read_bytes(path)?, path)? {
        store.insert(name, t.cast(), true)?;
    }
    Ok(store)
}

/// Overwrites tensors of `store` from the file. Every tensor in the file
/// must exist in `store` with the same shape.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<usize> {
    let tensors = decode(&fsutil::read_bytes(path)?, path)?;
    let fail = |message: String| LabError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    for (name, t) in &tensors {
        let cur = store.get(name).map_err(|_| fail(format!("unknown tensor `{name}`")))?;
        if cur.shape() != t.shape() {
            return Err(fail(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), cur.shape())));
        }
    }
    let n = tensors.len();
    for (name, t) in tensors {
        *store.get_mut(&name)? = t.cast();
    }
    Ok(n)
}

/// An encoder checkpoint that must hold exactly the tensors of `config`.
pub fn load_encoder<T: Scalar>(path: &Path, config: &EncoderConfig) -> Result<ParamStore<T>> {
    let store = load::<T>(path)?;
    let fail = |message: String| LabError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let expected = encoder::parameter_shapes(config);
    for name in store.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            return Err(fail(format!("unknown tensor `{name}`")));
        }
    }
    for (name, shape) in &expected {
        let t = store.get(name).map_err(|_| fail(format!("missing tensor `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(fail(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let c = EncoderConfig::tiny(1, 4, 2, 10, 16).unwrap();
        encoder::new_encoder(&c, 5)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let bytes = encode(&s);
        let back = decode(&bytes, Path::new("x")).unwrap();
        let mut r = ParamStore::new();
        for (n, t) in back {
            r.insert(n, t, true).unwrap();
        }
        assert!(r.bit_eq(&s));
        let mut again = ParamStore::new();
        for (n, p) in r.iter() {
            again.insert(n, p.tensor.clone(), true).unwrap();
        }
        assert_eq!(encode(&again), bytes);
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap(), true).unwrap();
        let b = encode(&s);
        let mut want = b"LFTR".to_vec();
        want.extend_from_slice(&[1, 0, 1, 0, 0, 0, 1, 0, b'w', 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn corrupt_magic_version_and_truncation() {
        let bytes = encode(&store());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode(&bad, Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad, Path::new("x")).unwrap_err().to_string().contains("version 9"));
        let e = decode(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
    }

    #[test]
    fn unknown_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.lftr");
        let mut s = store();
        s.insert("extra.thing", Tensor::zeros(&[2]), true).unwrap();
        save(&s, &p).unwrap();
        let c = EncoderConfig::tiny(1, 4, 2, 10, 16).unwrap();
        let e = load_encoder::<f32>(&p, &c).unwrap_err().to_string();
        assert!(e.contains("extra.thing"), "{e}");
        let mut target = store();
        let e = load_into(&mut target, &p).unwrap_err().to_string();
        assert!(e.contains("extra.thing"), "{e}");
    }

    #[test]
    fn load_encoder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.lftr");
        save(&store(), &p).unwrap();
        let c = EncoderConfig::tiny(1, 4, 2, 10, 16).unwrap();
        assert!(load_encoder::<f32>(&p, &c).unwrap().bit_eq(&store()));
    }
}
