//! Flat binary archive of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     b"LMCK"
//! version   u32
//! hash      [u8; 32]      config hash
//! config    u32 len + UTF-8
//! meta      u32 len + UTF-8
//! count     u32
//! entries   count × { u32 name_len, name, u8 dtype, u32 ndim, ndim × u64 dim, values }
//! ```
//!
//! Values are raw little-endian IEEE floats of the entry's dtype.

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Result, Tensor, TensorError};

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LMCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn native() -> Self {
        if std::mem::size_of::<Real>() == 8 {
            DType::F64
        } else {
            DType::F32
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            t => Err(TensorError::Archive(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub config_hash: [u8; 32],
    pub config: String,
    pub meta: String,
    pub entries: Vec<Entry>,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TensorError::Archive(format!("invalid UTF-8: {e}")))
}

impl Archive {
    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.to_string(),
            dtype: DType::native(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, ARCHIVE_VERSION)?;
        w.write_all(&self.config_hash)?;
        write_str(w, &self.config)?;
        write_str(w, &self.meta)?;
        write_u32(w, self.entries.len() as u32)?;
        for e in &self.entries {
            write_str(w, &e.name)?;
            w.write_all(&[e.dtype as u8])?;
            write_u32(w, e.tensor.ndim() as u32)?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.tensor.len() * 8);
            match e.dtype {
                DType::F32 => e
                    .tensor
                    .data()
                    .iter()
                    .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => e
                    .tensor
                    .data()
                    .iter()
                    .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Archive("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != ARCHIVE_VERSION {
            return Err(TensorError::Archive(format!(
                "unsupported version {version}"
            )));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let config = read_str(r)?;
        let meta = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(r)?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let dtype = DType::from_tag(tag[0])?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<Real> = match dtype {
                DType::F32 => {
                    let mut raw = vec![0u8; n * 4];
                    r.read_exact(&mut raw)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                        .collect()
                }
                DType::F64 => {
                    let mut raw = vec![0u8; n * 8];
                    r.read_exact(&mut raw)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                        .collect()
                }
            };
            entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        Ok(Self {
            config_hash,
            config,
            meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
