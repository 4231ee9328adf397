//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `b"TLDMCKPT"`, `u32` version, `u32` entry count, then per entry a `u32`
//! name length, UTF-8 name, one kind byte and the payload. Kind 0 is an f32
//! tensor (`u32` rank, `u32` dims, raw values); kind 1 is a UTF-8 string
//! (`u32` byte length, bytes).

use std::fs;
use std::path::Path;

use super::model::{ModelConfig, ToyLdm};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TLDMCKPT";
const VERSION: u32 = 1;
const CONFIG_KEY: &str = "__config__";
const SCALE_KEY: &str = "latent_scale";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

/// Ordered named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), Entry::Tensor(t)));
    }

    pub fn push_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.entries.push((name.into(), Entry::Text(s.into())));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.entries.len());
        for (name, entry) in &self.entries {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    put_u32(&mut out, t.shape().len());
                    for &d in t.shape() {
                        put_u32(&mut out, d);
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(1);
                    put_u32(&mut out, s.len());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic bytes".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let kind = r.take(1)?[0];
            let entry = match kind {
                0 => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
                    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
                    let n = n.ok_or_else(|| format!("entry {name}: shape overflows"))?;
                    let bytes = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Entry::Tensor(Tensor::new(shape, data).map_err(|e| e.to_string())?)
                }
                1 => Entry::Text(r.string()?),
                k => return Err(format!("entry {name}: unknown kind {k}")),
            };
            entries.push((name, entry));
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

impl ToyLdm {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.push_text(CONFIG_KEY, serde_json::to_string(self.config())?);
        ck.push_tensor(SCALE_KEY, Tensor::scalar(self.latent_scale));
        for (name, t) in self.ae.iter() {
            ck.push_tensor(format!("ae/{name}"), t.clone());
        }
        for (name, t) in self.den.iter() {
            ck.push_tensor(format!("den/{name}"), t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::invalid(format!("checkpoint: {reason}"));
        let Some(Entry::Text(cfg)) = ck.get(CONFIG_KEY) else {
            return Err(bad(format!("missing {CONFIG_KEY}")));
        };
        let config: ModelConfig = serde_json::from_str(cfg)?;
        let Some(Entry::Tensor(scale)) = ck.get(SCALE_KEY) else {
            return Err(bad(format!("missing {SCALE_KEY}")));
        };
        if scale.len() != 1 {
            return Err(bad("latent_scale must be a scalar".into()));
        }
        let (mut ae, mut den) = (ParamStore::new(), ParamStore::new());
        for (name, entry) in &ck.entries {
            let Entry::Tensor(t) = entry else { continue };
            if let Some(rest) = name.strip_prefix("ae/") {
                ae.add(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("den/") {
                den.add(rest, t.clone());
            }
        }
        Self::from_parts(config, ae, den, scale.item())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| match e {
            Error::InvalidArgument(reason) => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
