//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic   b"ATRL"
//! version u32 (= 1)
//! count   u32
//! count × entry:
//!     name_len u32, name (UTF-8)
//!     dtype    u8   0 = f64, 1 = u64, 2 = bytes
//!     ndim     u32, dims u64 × ndim
//!     payload  product(dims) × {8, 8, 1} bytes
//! ```
//!
//! Trailing bytes and short reads are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attrloss::AttributeCenterBank;
use crate::datapipe::write_atomic;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet};

use super::{EpochMetrics, RunState, TrainConfig};

const MAGIC: &[u8; 4] = b"ATRL";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

/// Everything needed to evaluate a model or continue its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub bank: Option<AttributeCenterBank>,
    pub state: RunState,
}

fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let dtype: u8 = match e.payload {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::Bytes(_) => 2,
        };
        out.push(dtype);
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn words(&mut self, n: usize) -> Result<Vec<[u8; 8]>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        Ok(self.take(len)?.chunks(8).map(|c| c.try_into().expect("8 bytes")).collect())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::Checkpoint("missing magic".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let mut dims = Vec::new();
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let payload = match dtype {
            0 => Payload::F64(r.words(n)?.into_iter().map(f64::from_le_bytes).collect()),
            1 => Payload::U64(r.words(n)?.into_iter().map(u64::from_le_bytes).collect()),
            2 => Payload::Bytes(r.take(n)?.to_vec()),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        entries.push(Entry { name, dims, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

fn take(map: &mut BTreeMap<String, Entry>, name: &str) -> Result<Entry> {
    map.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
}

fn tensor_entry(name: String, t: &Tensor) -> Entry {
    Entry {
        name,
        dims: t.shape().to_vec(),
        payload: Payload::F64(t.data().to_vec()),
    }
}

fn bytes_entry(name: &str, bytes: Vec<u8>) -> Entry {
    Entry {
        name: name.to_string(),
        dims: vec![bytes.len()],
        payload: Payload::Bytes(bytes),
    }
}

fn u64_entry(name: &str, v: Vec<u64>) -> Entry {
    Entry {
        name: name.to_string(),
        dims: vec![v.len()],
        payload: Payload::U64(v),
    }
}

impl Checkpoint {
    fn to_entries(&self) -> Result<Vec<Entry>> {
        let mut e = vec![
            bytes_entry("meta/model", json(&self.model)?),
            bytes_entry("meta/config", json(&self.config)?),
            bytes_entry("state/history", json(&self.state.history)?),
            u64_entry("state/counters", vec![self.state.epoch as u64, self.state.step, self.state.seed]),
            Entry {
                name: "state/lr".into(),
                dims: vec![1],
                payload: Payload::F64(vec![self.state.lr]),
            },
        ];
        for (name, p) in self.params.iter() {
            e.push(tensor_entry(format!("param/{name}"), &p.tensor));
        }
        for (name, v) in &self.state.velocities {
            e.push(tensor_entry(format!("velocity/{name}"), v));
        }
        if let Some(bank) = &self.bank {
            let ids: Vec<u64> = bank.attribute_ids().map(|a| a as u64).collect();
            let centers: Vec<f64> = bank.centers().values().flatten().copied().collect();
            e.push(u64_entry("bank/ids", ids.clone()));
            e.push(u64_entry("bank/counts", bank.counts().values().copied().collect()));
            e.push(Entry {
                name: "bank/centers".into(),
                dims: vec![ids.len(), bank.feature_dim()],
                payload: Payload::F64(centers),
            });
            e.push(Entry {
                name: "bank/alpha".into(),
                dims: vec![1],
                payload: Payload::F64(vec![bank.alpha()]),
            });
            e.push(u64_entry("bank/awaiting", vec![bank.awaiting_recompute() as u64]));
        }
        Ok(e)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode(&self.to_entries()?))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let entries = decode(buf)?;
        let mut map: BTreeMap<String, Entry> = BTreeMap::new();
        for e in entries {
            if map.contains_key(&e.name) {
                return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
            }
            map.insert(e.name.clone(), e);
        }
        let bytes = |e: Entry| match e.payload {
            Payload::Bytes(b) => Ok(b),
            _ => Err(Error::Checkpoint(format!("{} is not bytes", e.name))),
        };
        let words = |e: Entry| match e.payload {
            Payload::U64(b) => Ok(b),
            _ => Err(Error::Checkpoint(format!("{} is not u64", e.name))),
        };
        let floats = |e: Entry| match e.payload {
            Payload::F64(b) => Ok((e.dims, b)),
            _ => Err(Error::Checkpoint(format!("{} is not f64", e.name))),
        };
        let parse = |b: Vec<u8>, what: &str| -> Result<serde_json::Value> {
            serde_json::from_slice(&b).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
        };
        let model: ModelConfig = serde_json::from_value(parse(bytes(take(&mut map, "meta/model")?)?, "model")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config: TrainConfig = serde_json::from_value(parse(bytes(take(&mut map, "meta/config")?)?, "config")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let history: Vec<EpochMetrics> = serde_json::from_value(parse(bytes(take(&mut map, "state/history")?)?, "history")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let counters = words(take(&mut map, "state/counters")?)?;
        let [epoch, step, seed] = counters[..] else {
            return Err(Error::Checkpoint("state/counters must hold 3 values".into()));
        };
        let (_, lr) = floats(take(&mut map, "state/lr")?)?;
        let lr = *lr.first().ok_or_else(|| Error::Checkpoint("empty lr".into()))?;

        let mut params = Model::new(model.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .init_params(0)?;
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let mut velocities = BTreeMap::new();
        for name in &names {
            let (dims, data) = floats(take(&mut map, &format!("param/{name}"))?)?;
            let slot = params.tensor_mut(name)?;
            if dims != slot.shape() {
                return Err(Error::Checkpoint(format!("param {name} has shape {dims:?}")));
            }
            *slot = Tensor::new(dims, data)?;
            if let Some(e) = map.remove(&format!("velocity/{name}")) {
                let (dims, data) = floats(e)?;
                velocities.insert(name.clone(), Tensor::new(dims, data)?);
            }
        }
        let bank = if map.contains_key("bank/ids") {
            let ids = words(take(&mut map, "bank/ids")?)?;
            let counts = words(take(&mut map, "bank/counts")?)?;
            let (dims, centers) = floats(take(&mut map, "bank/centers")?)?;
            let (_, alpha) = floats(take(&mut map, "bank/alpha")?)?;
            let awaiting = words(take(&mut map, "bank/awaiting")?)?;
            if dims.len() != 2 || dims[0] != ids.len() || counts.len() != ids.len() || alpha.len() != 1 {
                return Err(Error::Checkpoint("inconsistent bank entries".into()));
            }
            let d = dims[1];
            let c: BTreeMap<usize, Vec<f64>> = ids
                .iter()
                .zip(centers.chunks(d.max(1)))
                .map(|(&a, row)| (a as usize, row.to_vec()))
                .collect();
            let n = ids.iter().map(|&a| a as usize).zip(counts).collect();
            Some(
                AttributeCenterBank::from_parts(d, alpha[0], c, n, awaiting.first() == Some(&1))
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            )
        } else {
            None
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
        }
        Ok(Self {
            model,
            config,
            params,
            bank,
            state: RunState {
                epoch: epoch as usize,
                step,
                seed,
                lr,
                velocities,
                history,
            },
        })
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Write atomically (temporary file + rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
