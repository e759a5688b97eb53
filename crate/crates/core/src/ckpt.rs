//! Binary checkpoint container: an 8-byte magic, a format version, a JSON
//! header (metadata plus an index of named arrays), then the concatenated
//! f64 payload in little-endian order. The same container carries model
//! checkpoints and full training-state snapshots; writes are byte-identical
//! for identical content.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DFKDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayIndexEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayIndexEntry>,
}

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array {name}: shape/data mismatch"
        );
        Self { name, shape, data }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let header = Header {
        meta: c.meta.clone(),
        arrays: c
            .arrays
            .iter()
            .map(|a| ArrayIndexEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for a in &c.arrays {
        for &v in &a.data {
            w.write_f64::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let header_len = r.read_u64::<LE>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let len: usize = e.shape.iter().product();
        let mut data = vec![0.0f64; len];
        for slot in data.iter_mut() {
            *slot = r
                .read_f64::<LE>()
                .map_err(|_| Error::Checkpoint(format!("truncated payload in {}", e.name)))?;
        }
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok(Container {
        meta: header.meta,
        arrays,
    })
}
