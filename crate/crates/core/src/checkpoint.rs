//! Binary checkpoint: named tensors followed by a CRC32 of everything before it.
//!
//! ```text
//! "FOVB" | version u32 | count u32
//! per entry: name_len u32 | name | rank u32 | dims u32* | dtype u8 | data
//! crc32 u32
//! ```
//! All integers little-endian. dtype 0 is f64, dtype 1 is raw bytes (rank 1).

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::FovbModel;
use crate::optim::AdamWState;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"FOVB";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

impl Entry {
    pub fn f64(name: impl Into<String>, t: Tensor) -> Self {
        Entry { name: name.into(), payload: Payload::F64(t) }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Entry { name: name.into(), payload: Payload::Bytes(b) }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, entries.len())?;
    for e in entries {
        put_u32(&mut out, e.name.len())?;
        out.extend_from_slice(e.name.as_bytes());
        match &e.payload {
            Payload::F64(t) => {
                put_u32(&mut out, t.rank())?;
                for &d in t.shape() {
                    put_u32(&mut out, d)?;
                }
                out.push(DTYPE_F64);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Bytes(b) => {
                put_u32(&mut out, 1)?;
                put_u32(&mut out, b.len())?;
                out.push(DTYPE_BYTES);
                out.extend_from_slice(b);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 16 {
        return Err(Error::Integrity(format!("checkpoint of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Integrity("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("entry {name} is impossibly large")))?;
        let payload = match r.take(1)?[0] {
            DTYPE_F64 => {
                let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Payload::F64(Tensor::new(&dims, data)?)
            }
            DTYPE_BYTES if rank == 1 => Payload::Bytes(r.take(numel)?.to_vec()),
            d => return Err(Error::Integrity(format!("entry {name} has unknown dtype {d}"))),
        };
        entries.push(Entry { name, payload });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes after the last entry", body.len() - r.pos)));
    }
    Ok(entries)
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: FovbModel,
    pub optim: AdamWState,
}

pub fn to_entries(config: &RunConfig, model: &FovbModel, optim: &AdamWState) -> Vec<Entry> {
    let mut entries = vec![
        Entry::bytes("config", config.to_json().into_bytes()),
        Entry::bytes("optim.step", optim.step.to_le_bytes().to_vec()),
    ];
    for (_, p) in model.store.iter() {
        entries.push(Entry::f64(format!("param.{}", p.name), p.value.clone()));
    }
    for (k, &id) in optim.ids.iter().enumerate() {
        let name = &model.store.param(id).name;
        entries.push(Entry::f64(format!("optim.m.{name}"), optim.m[k].clone()));
        entries.push(Entry::f64(format!("optim.v.{name}"), optim.v[k].clone()));
    }
    entries
}

pub fn from_entries(entries: Vec<Entry>) -> Result<Checkpoint> {
    let mut map: std::collections::HashMap<String, Payload> =
        entries.into_iter().map(|e| (e.name, e.payload)).collect();
    let missing = |name: &str| Error::Integrity(format!("checkpoint has no entry {name}"));
    let mut bytes = |name: &str| match map.remove(name) {
        Some(Payload::Bytes(b)) => Ok(b),
        Some(_) => Err(Error::Integrity(format!("entry {name} has the wrong dtype"))),
        None => Err(missing(name)),
    };
    let config_text = String::from_utf8(bytes("config")?).map_err(|_| Error::Integrity("config is not UTF-8".into()))?;
    let config = RunConfig::from_json(&config_text).map_err(|e| Error::Integrity(format!("stored config: {e}")))?;
    let step: [u8; 8] = bytes("optim.step")?.try_into().map_err(|_| Error::Integrity("bad step counter".into()))?;

    let mut model = FovbModel::new(&config.model, config.seed, config.train.mc_samples)?;
    let mut optim = AdamWState::new(&model.store);
    optim.step = u64::from_le_bytes(step);
    let mut tensor = |name: String, like: &Tensor| -> Result<Tensor> {
        match map.remove(&name) {
            Some(Payload::F64(t)) if t.shape() == like.shape() => Ok(t),
            Some(Payload::F64(t)) => {
                Err(Error::Integrity(format!("entry {name} has shape {:?}, model expects {:?}", t.shape(), like.shape())))
            }
            Some(_) => Err(Error::Integrity(format!("entry {name} has the wrong dtype"))),
            None => Err(missing(&name)),
        }
    };
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = model.store.param(id).name.clone();
        let t = tensor(format!("param.{name}"), model.store.get(id))?;
        model.store.set(id, t)?;
    }
    for k in 0..optim.ids.len() {
        let name = model.store.param(optim.ids[k]).name.clone();
        optim.m[k] = tensor(format!("optim.m.{name}"), &optim.m[k])?;
        optim.v[k] = tensor(format!("optim.v.{name}"), &optim.v[k])?;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Integrity(format!("unexpected checkpoint entry {extra}")));
    }
    Ok(Checkpoint { config, model, optim })
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, model: &FovbModel, optim: &AdamWState) -> Result<()> {
    std::fs::write(path, encode(&to_entries(config, model, optim))?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_entries(decode(&std::fs::read(path)?)?)
}
