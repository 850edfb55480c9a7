//! Binary checkpoint format.
//!
//! ```text
//! "MGAN" | version: u16 | meta_len: u32 | meta: JSON (meta_len bytes)
//! | record* | crc32: u32
//! record = name_len: u32 | name | rank: u32 | dims: u32 * rank | f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. The CRC covers every byte
//! before it. Records hold each network's parameters (`<role>.<param>`)
//! followed by its Adam moments (`<role>.adam_m.<param>`, `<role>.adam_v.<param>`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LossHistory, Nets, Task, TrainConfig};
use crate::models::UNet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGAN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint holds a {found} model, {expected} was requested")]
    TaskMismatch { expected: Task, found: Task },
    #[error("{0}")]
    Unsupported(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Translation direction: A is the image domain, B the mask domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a2b")]
    AToB,
    #[serde(rename = "b2a")]
    BToA,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AToB => "a2b",
            Direction::BToA => "b2a",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub nets: Nets,
    pub history: LossHistory,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    task: Task,
    image_size: usize,
    data_seed: Option<u64>,
    optimizer_steps: Vec<(String, u64)>,
    config: TrainConfig,
    history: LossHistory,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, nets: Nets, history: LossHistory) -> Self {
        Self { config, nets, history }
    }

    pub fn task(&self) -> Task {
        self.nets.task()
    }

    /// The generator serving an inference request. `expected` guards against
    /// loading the wrong kind of checkpoint; conditional GANs only translate
    /// images to masks.
    pub fn generator(&self, expected: Option<Task>, direction: Direction) -> Result<&UNet> {
        let found = self.task();
        if let Some(expected) = expected.filter(|&t| t != found) {
            return Err(CheckpointError::TaskMismatch { expected, found });
        }
        match (&self.nets, direction) {
            (Nets::Cgan(n), Direction::AToB) => Ok(&n.gen.model),
            (Nets::Cgan(_), Direction::BToA) => Err(CheckpointError::TaskMismatch {
                expected: Task::Cyclegan,
                found,
            }),
            (Nets::Cyclegan(n), Direction::AToB) => Ok(&n.gen_ab.model),
            (Nets::Cyclegan(n), Direction::BToA) => Ok(&n.gen_ba.model),
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (role, params, opt) in self.nets.parts() {
            for (name, t) in params.iter() {
                out.push((format!("{role}.{name}"), t.clone()));
            }
            for (prefix, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
                for ((name, t), buf) in params.iter().zip(moments) {
                    let moment = Tensor::new(t.shape().to_vec(), buf.clone()).expect("same shape");
                    out.push((format!("{role}.{prefix}.{name}"), moment));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            task: self.task(),
            image_size: self.config.image_size,
            data_seed: self.config.split.map(|s| s.seed),
            optimizer_steps: self
                .nets
                .parts()
                .into_iter()
                .map(|(role, _, opt)| (role.to_owned(), opt.t))
                .collect(),
            config: self.config.clone(),
            history: self.history.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        for (name, t) in self.tensors() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_owned());
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
        if meta.task != meta.config.task {
            return Err(corrupt("task field disagrees with config"));
        }

        let mut nets = Nets::build(&meta.config)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let mut records = Vec::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt("tensor extends past end of file"))?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push((name, dims, data));
        }

        let mut records = records.into_iter();
        for (role, params, opt) in nets.parts_mut() {
            let steps = meta
                .optimizer_steps
                .iter()
                .find(|(r, _)| r == role)
                .ok_or_else(|| CheckpointError::Corrupt(format!("no optimizer step for {role}")))?;
            opt.t = steps.1;
            let names: Vec<String> = params.names().map(str::to_owned).collect();
            let mut expect = |full: String, shape: &[usize]| -> Result<Vec<f32>> {
                match records.next() {
                    Some((name, dims, data)) if name == full && dims == shape => Ok(data),
                    Some((name, dims, _)) => Err(CheckpointError::Corrupt(format!(
                        "expected {full} {shape:?}, found {name} {dims:?}"
                    ))),
                    None => Err(CheckpointError::Corrupt(format!("missing tensor {full}"))),
                }
            };
            for name in &names {
                let t = params.get_mut(name).expect("listed");
                let shape = t.shape().to_vec();
                let data = expect(format!("{role}.{name}"), &shape)?;
                t.data_mut().copy_from_slice(&data);
            }
            for (prefix, moments) in [("adam_m", &mut opt.m), ("adam_v", &mut opt.v)] {
                for (name, buf) in names.iter().zip(moments.iter_mut()) {
                    let shape = params.get(name).expect("listed").shape().to_vec();
                    *buf = expect(format!("{role}.{prefix}.{name}"), &shape)?;
                }
            }
        }
        if records.next().is_some() {
            return Err(corrupt("unexpected extra tensors"));
        }
        Ok(Self { config: meta.config, nets, history: meta.history })
    }
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
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}
