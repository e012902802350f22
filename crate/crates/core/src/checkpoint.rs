//! Versioned binary container of named tensor records.
//!
//! Layout (little-endian):
//! `"ADVP" | version u32 | precision u8 | header_len u32 | header JSON |
//! record_count u32 | records`, where each record is
//! `name_len u32 | name | kind u8 | ndim u32 | dims u64… | values`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::nn::{Layer, LayerDesc, Network, ParamRole};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ADVP";
pub const FORMAT_VERSION: u32 = 1;

/// Record kind byte. Parameter roles keep their `ParamRole` code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Param(ParamRole),
    RunningMain,
    RunningAux,
    Velocity,
    Data,
}

impl RecordKind {
    pub fn code(self) -> u8 {
        match self {
            RecordKind::Param(r) => r.code(),
            RecordKind::RunningMain => 3,
            RecordKind::RunningAux => 4,
            RecordKind::Velocity => 5,
            RecordKind::Data => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0..=2 => RecordKind::Param(ParamRole::from_code(code)?),
            3 => RecordKind::RunningMain,
            4 => RecordKind::RunningAux,
            5 => RecordKind::Velocity,
            6 => RecordKind::Data,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record<T> {
    pub name: String,
    pub kind: RecordKind,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub header: serde_json::Value,
    pub records: Vec<Record<T>>,
}

impl<T: Scalar> Container<T> {
    pub fn get(&self, name: &str) -> Result<&Record<T>> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::PRECISION.tag());
        let header = serde_json::to_vec(&self.header).expect("json value serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.kind.code());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.values {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let (_, precision) = read_preamble(&mut cur)?;
        if precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "stored in {precision:?}, requested {:?}",
                T::PRECISION
            )));
        }
        let header_len = cur.u32()? as usize;
        let header = serde_json::from_slice(cur.take(header_len)?)?;
        let count = cur.u32()?;
        let width = T::PRECISION.tag() as usize;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let code = cur.u8()?;
            let kind = RecordKind::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}` has unknown kind {code}")))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = cur.take(len * width)?;
            let values = raw.chunks_exact(width).map(T::read_le).collect();
            records.push(Record {
                name,
                kind,
                shape,
                values,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_preamble(cur: &mut Cursor) -> Result<(u32, Precision)> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let tag = cur.u8()?;
    let precision =
        Precision::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))?;
    Ok((version, precision))
}

/// Reads only the fixed preamble and reports the stored precision.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    read_preamble(&mut Cursor { bytes, pos: 0 }).map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layers: Vec<LayerDesc>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub steps_done: u64,
    pub mode: Mode,
    pub seed: u64,
    pub classes: usize,
}

/// Network, optimizer state and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub net: Network<T>,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Container<T> {
        let mut records = Vec::new();
        let info = self.net.param_info();
        for (p, t) in info.iter().zip(self.net.params()) {
            records.push(Record {
                name: p.name.clone(),
                kind: RecordKind::Param(p.role),
                shape: p.shape.clone(),
                values: t.data().to_vec(),
            });
        }
        for (i, layer) in self.net.layers().iter().enumerate() {
            if let Layer::DualBn(bn) = layer {
                for (tag, kind, state) in [
                    ("main", RecordKind::RunningMain, &bn.main),
                    ("aux", RecordKind::RunningAux, &bn.aux),
                ] {
                    for (stat, values) in [("running_mean", &state.running_mean), ("running_var", &state.running_var)] {
                        records.push(Record {
                            name: format!("{i}.bn.{tag}.{stat}"),
                            kind,
                            shape: vec![values.len()],
                            values: values.clone(),
                        });
                    }
                }
            }
        }
        for (p, v) in info.iter().zip(&self.velocity) {
            records.push(Record {
                name: format!("velocity/{}", p.name),
                kind: RecordKind::Velocity,
                shape: p.shape.clone(),
                values: v.clone(),
            });
        }
        Container {
            header: serde_json::to_value(&self.header).expect("header serializes"),
            records,
        }
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_value(c.header.clone())
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut net = Network::<T>::from_descs(&header.layers, 0);
        let info = net.param_info();
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let r = c.get(name)?;
            if r.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` has shape {:?}, expected {shape:?}",
                    r.shape
                )));
            }
            Ok(r.values.clone())
        };
        for (p, t) in info.iter().zip(net.params_mut()) {
            *t = Tensor::new(&p.shape, fetch(&p.name, &p.shape)?)?;
        }
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            if let Layer::DualBn(bn) = layer {
                let ch = bn.main.channels();
                for (tag, state) in [("main", &mut bn.main), ("aux", &mut bn.aux)] {
                    state.running_mean = fetch(&format!("{i}.bn.{tag}.running_mean"), &[ch])?;
                    state.running_var = fetch(&format!("{i}.bn.{tag}.running_var"), &[ch])?;
                }
            }
        }
        let velocity = info
            .iter()
            .map(|p| fetch(&format!("velocity/{}", p.name), &p.shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header,
            net,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
