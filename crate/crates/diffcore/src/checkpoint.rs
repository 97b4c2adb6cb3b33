//! Binary checkpoint container.
//!
//! Layout: magic `COAMD1\0`, `u32` entry count, then per entry `u32` name
//! length, UTF-8 name, `u32` rank, `rank × u32` dims and the raw little-endian
//! `f32` payload. Metadata is stored as empty entries named `key=value`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 7] = b"COAMD1\0";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            dims,
            data,
        });
    }

    pub fn push_meta(&mut self, key: &str, value: &str) {
        self.push(format!("{key}={value}"), vec![0], Vec::new());
    }

    /// First metadata value stored under `key`.
    pub fn meta<'a>(&'a self, key: &'a str) -> Option<&'a str> {
        self.metas(key).next()
    }

    /// All metadata values stored under `key`, in file order.
    pub fn metas<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter_map(move |e| {
            if e.dims != [0] {
                return None;
            }
            e.name
                .split_once('=')
                .filter(|(k, _)| *k == key)
                .map(|(_, v)| v)
        })
    }

    pub fn push_params<T: Real>(&mut self, params: &Params<T>) {
        for (name, t) in params.iter() {
            self.push(
                name,
                t.shape().to_vec(),
                t.data().iter().map(|x| x.as_f64() as f32).collect(),
            );
        }
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries.iter().find(|e| e.name == name && e.dims != [0]).map(|e| {
            Tensor::new(e.dims.clone(), e.data.iter().map(|&x| T::of(x as f64)).collect())
                .expect("validated on read")
        })
    }

    /// Overwrites every parameter with the same-named stored tensor.
    pub fn load_params<T: Real>(&self, params: &mut Params<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = params.find(&name).expect("name from store");
            let stored = self
                .tensor::<T>(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.shape() != params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = stored;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("unknown magic bytes".into()));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let name = take(&mut r, len)?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = take(&mut r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated entry".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}
