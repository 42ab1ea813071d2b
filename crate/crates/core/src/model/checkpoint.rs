//! `NMCK` checkpoints: little-endian binary holding the model config, every
//! named parameter tensor, and optionally the optimizer state.
//!
//! ```text
//! "NMCK" u32:version
//! u64:len config-json   u64:len meta-json
//! u32:count { u32:len name  u32:rows u32:cols f64[rows*cols] }*
//! u8:has_optimizer [ u64:step u64:images_seen {tensor}* {tensor}* ]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NMCK";
const VERSION: u32 = 1;

/// Adam moments in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub images_seen: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form JSON saved alongside (the training config, for resumes).
    pub meta: serde_json::Value,
    pub params: Vec<(String, Array2<f64>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Array2<f64>) {
    put_u32(out, t.nrows() as u32);
    put_u32(out, t.ncols() as u32);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for json in [serde_json::to_vec(&self.config)?, serde_json::to_vec(&self.meta)?] {
            put_u64(&mut out, json.len() as u64);
            out.extend_from_slice(&json);
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                if o.m.len() != self.params.len() || o.v.len() != self.params.len() {
                    return Err(Error::Shape("optimizer moments do not match parameters".into()));
                }
                out.push(1);
                put_u64(&mut out, o.step);
                put_u64(&mut out, o.images_seen);
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let images_seen = r.u64()?;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimizerSnapshot {
                    step,
                    images_seen,
                    m,
                    v,
                })
            }
            b => return Err(Error::format("checkpoint", format!("bad optimizer flag {b}"))),
        };
        if !r.buf.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            meta,
            params,
            optimizer,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Array2<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::format("checkpoint", "truncated tensor"))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("nmck.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
