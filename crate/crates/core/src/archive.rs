//! Flat binary archive of named `f64` tensors, used for checkpoints and the
//! sample cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"MDSAARC1"
//! u32     metadata pair count, then per pair: u32 len + key, u32 len + value
//! u32     entry count, then per entry (the manifest, in write order):
//!         u32 len + name, u32 ndim, ndim × u64 dims
//! f64...  raw values of every entry, in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDSAARC1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Archive(format!("duplicate entry {name}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entry names in write order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// A copy holding only the entries whose name starts with `prefix`, and
    /// no metadata.
    pub fn subset(&self, prefix: &str) -> Archive {
        Archive {
            meta: BTreeMap::new(),
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, self.meta.len())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_u32(&mut w, self.entries.len())?;
        for (name, t) in &self.entries {
            write_str(&mut w, name)?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Archive("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Archive("bad magic bytes".into()));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        let count = read_u32(&mut r)?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            manifest.push((name, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Archive(format!("truncated data for {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Archive(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Archive("trailing bytes after data".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(fs::read(path)?.as_slice())
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Archive(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Archive("truncated archive".into()))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Archive("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Archive("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            key in "[a-z_.]{1,12}",
        ) {
            let mut a = Archive::new();
            a.meta.insert(key.clone(), "v=1".into());
            let n = values.len();
            a.push("x.weight", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            a.push("y", Tensor::new(vec![1, n], values).unwrap()).unwrap();
            let bytes = a.to_bytes();
            let b = Archive::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(b.to_bytes(), bytes);
            let names: Vec<&str> = b.names().collect();
            prop_assert_eq!(names, vec!["x.weight", "y"]);
            for ((_, x), (_, y)) in a.entries().iter().zip(b.entries()) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut a = Archive::new();
        a.push("w", Tensor::zeros(&[3])).unwrap();
        let bytes = a.to_bytes();
        assert!(Archive::read_from(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::read_from(&b"NOTANARC"[..]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::read_from(extra.as_slice()).is_err());
        assert!(a.push("w", Tensor::zeros(&[1])).is_err());
    }
}
