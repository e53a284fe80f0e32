//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MOFCKPT\0", u32 version
//! u64 len + UTF-8   run config (TOML, stored verbatim)
//! u32 count, then per entry: u32 len + key, u64 len + value   (sorted by key)
//! u32 count, then per parameter: u32 len + name, u32 ndim, ndim x u64 dims,
//!     numel x f64 values
//! u8 has_adam; if 1: u64 step, 4 x f64 (beta1, beta2, eps, weight_decay),
//!     then the first-moment tensors and the second-moment tensors, each in
//!     parameter order with the parameter's shape
//! 32-byte SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MOFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_toml: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(config_toml: String, params: ParamStore) -> Self {
        Checkpoint { config_toml, meta: BTreeMap::new(), params, adam: None }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {key:?} entry")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, self.config_toml.len() as u64);
        out.extend_from_slice(self.config_toml.as_bytes());

        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_u32(&mut out, k.len() as u32);
            out.extend_from_slice(k.as_bytes());
            put_u64(&mut out, v.len() as u64);
            out.extend_from_slice(v.as_bytes());
        }

        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_values(&mut out, t.data());
        }

        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                put_u64(&mut out, adam.step);
                let c = adam.config;
                put_values(&mut out, &[c.beta1, c.beta2, c.eps, c.weight_decay]);
                for t in adam.m.iter().chain(&adam.v) {
                    put_values(&mut out, t.data());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Checkpoint("checksum mismatch (file is corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let config_toml = r.string(len)?;

        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let klen = r.u32()? as usize;
            let k = r.string(klen)?;
            let vlen = r.u64()? as usize;
            meta.insert(k, r.string(vlen)?);
        }

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let nlen = r.u32()? as usize;
            let name = r.string(nlen)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let t = Tensor::new(shape, r.values(numel)?).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }

        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let c = r.values(4)?;
                let config = AdamConfig { beta1: c[0], beta2: c[1], eps: c[2], weight_decay: c[3] };
                let mut moment = || -> Result<Vec<Tensor>> {
                    params
                        .iter()
                        .map(|(_, p)| Ok(Tensor::from_raw(p.shape().to_vec(), r.values(p.numel())?)))
                        .collect()
                };
                let m = moment()?;
                let v = moment()?;
                Some(Adam { config, step, m, v })
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config_toml, meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("b.w", Tensor::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]).unwrap()).unwrap();
        params.insert("a.b", Tensor::vector(vec![1e-300, -0.0, 7.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step = 3;
        adam.m[0].data_mut()[1] = 0.5;
        adam.v[1].data_mut()[2] = 0.25;
        let mut c = Checkpoint::new("seed = 1\n".into(), params).with_meta("kind", "test").with_meta("a", "1");
        c.adam = Some(adam);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.names(), ["b.w", "a.b"]);
        assert_eq!(back.meta("kind"), Some("test"));
        assert_eq!(back.adam.as_ref().unwrap().m[0].data()[1], 0.5);
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
