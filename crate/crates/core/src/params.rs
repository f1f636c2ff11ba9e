//! Named parameter storage and the `DSPL1` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DSPL1"
//! repeated until EOF:
//!   u32 name length, UTF-8 name bytes
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64 payload
//! ```
//!
//! Tensors whose names end in `.running_mean` or `.running_var` are
//! batch-norm buffers and are not trained.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DSPL1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.len()).sum()
    }

    /// Overwrite buffers with values recorded during a train-mode forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, values) in updates {
            let t = self.get_mut(&name)?;
            if t.len() != values.len() {
                return Err(Error::shape("buffer update", name));
            }
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
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

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let mut store = ParamStore::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err("truncated name".into());
            }
            let (name, rest) = r.split_at(name_len);
            let name = std::str::from_utf8(name).map_err(|e| e.to_string())?.to_string();
            r = rest;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(format!("truncated payload for `{name}`"));
            }
            let (payload, rest) = r.split_at(n * 8);
            r = rest;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
            store.insert(name, t).map_err(|e| e.to_string())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "truncated u32".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| "truncated u64".to_string())?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_bytes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[..5], b"DSPL1");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(b[9], b'w');
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(&b[22..30], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParamStore::from_bytes(b"NOPE1").is_err());
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[3])).unwrap();
        let b = s.to_bytes();
        assert!(ParamStore::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..4), 0..5),
                      seed in any::<u64>()) {
            let mut s = ParamStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| (seed.wrapping_add(k as u64) as f64).sin() * 1e3).collect();
                s.insert(format!("layer{i}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
            }
            let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
