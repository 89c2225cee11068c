//! Checkpoint files.
//!
//! ```text
//! "LCGC"  u16 version  u32 config_len  config (UTF-8)
//! u32 tensor_count, then per tensor:
//!   u32 name_len  name  u8 dtype (0 = f64, 1 = f32)  u8 rank  u64[rank] dims  payload
//! u8 has_optimizer; if 1: u64 adam_step, then m and v payloads (f64) in the
//!   order of the tensors not named `ema.*`
//! u64 step
//! u32 CRC32 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::diffusion::{DenoiserConfig, Model};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCGC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run configuration.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<AdamState>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(
        config: &str,
        model: &Model,
        optimizer: Option<&AdamState>,
        step: u64,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        model.visit_leaves("", &mut |name, t| {
            tensors.push(NamedTensor {
                name,
                dtype: Dtype::F64,
                tensor: t.clone(),
            })
        });
        Checkpoint {
            config: config.to_string(),
            tensors,
            optimizer: optimizer.cloned(),
            step,
        }
    }

    /// Appends the sampling-time weight average as `ema.`-prefixed tensors.
    pub fn with_ema(mut self, ema: &Model) -> Checkpoint {
        ema.visit_leaves(EMA_PREFIX, &mut |name, t| {
            self.tensors.push(NamedTensor {
                name,
                dtype: Dtype::F64,
                tensor: t.clone(),
            })
        });
        self
    }

    /// Rebuilds the model, requiring names and shapes to match `cfg`.
    pub fn model(&self, cfg: &DenoiserConfig) -> Result<Model> {
        let raw: Vec<&NamedTensor> = self.tensors.iter().filter(|t| !is_ema(t)).collect();
        rebuild(cfg, &raw, "")
    }

    /// The weight average, if the checkpoint holds one.
    pub fn ema_model(&self, cfg: &DenoiserConfig) -> Result<Option<Model>> {
        let ema: Vec<&NamedTensor> = self.tensors.iter().filter(|t| is_ema(t)).collect();
        if ema.is_empty() {
            return Ok(None);
        }
        rebuild(cfg, &ema, EMA_PREFIX).map(Some)
    }

    /// The weights to sample with: the average when present, else the raw model.
    pub fn inference_model(&self, cfg: &DenoiserConfig) -> Result<Model> {
        match self.ema_model(cfg)? {
            Some(m) => Ok(m),
            None => self.model(cfg),
        }
    }
}

/// Name prefix of the averaged weights.
pub const EMA_PREFIX: &str = "ema";

fn is_ema(t: &NamedTensor) -> bool {
    t.name
        .strip_prefix(EMA_PREFIX)
        .is_some_and(|rest| rest.starts_with('.'))
}

fn rebuild(cfg: &DenoiserConfig, tensors: &[&NamedTensor], prefix: &str) -> Result<Model> {
    let mut model = Model::init(cfg, &mut crate::seeds::rng(0))?;
    let mut i = 0;
    let mut mismatch = None;
    model.visit_leaves_mut(prefix, &mut |name, t| {
        match tensors.get(i) {
            Some(nt) if nt.name == name && nt.tensor.shape() == t.shape() => *t = nt.tensor.clone(),
            other if mismatch.is_none() => {
                mismatch = Some(match other {
                    Some(nt) => format!(
                        "checkpoint tensor {} {:?} where the configuration expects {name} {:?}",
                        nt.name,
                        nt.tensor.shape(),
                        t.shape()
                    ),
                    None => format!("checkpoint lacks tensor {name}"),
                })
            }
            _ => {}
        }
        i += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::Config(msg));
    }
    if i != tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, the configuration expects {i}",
            tensors.len()
        )));
    }
    Ok(model)
}

fn write_payload(w: &mut Writer, dtype: Dtype, t: &Tensor) {
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|&v| w.f64(v)),
        Dtype::F32 => t.data().iter().for_each(|&v| w.f32(v as f32)),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.string(&ck.config);
    w.u32(ck.tensors.len() as u32);
    for nt in &ck.tensors {
        w.string(&nt.name);
        w.u8(nt.dtype.code());
        w.u8(nt.tensor.rank() as u8);
        for &d in nt.tensor.shape() {
            w.u64(d as u64);
        }
        write_payload(&mut w, nt.dtype, &nt.tensor);
    }
    match &ck.optimizer {
        None => w.u8(0),
        Some(adam) => {
            w.u8(1);
            w.u64(adam.step);
            for t in adam.m.iter().chain(&adam.v) {
                write_payload(&mut w, Dtype::F64, t);
            }
        }
    }
    w.u64(ck.step);
    w.finish()
}

fn read_payload(r: &mut Reader, dtype: Dtype, shape: &[usize], what: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let raw = r.take(
        n.checked_mul(width).ok_or_else(|| Error::Format {
            offset: r.offset(),
            msg: format!("{what}: tensor too large"),
        })?,
        what,
    )?;
    let data = match dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let config = r.string("config")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let at = r.offset();
        let dtype = match r.u8("dtype")? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            code => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("{name}: unknown dtype {code}"),
                })
            }
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let tensor = read_payload(&mut r, dtype, &shape, &name)?;
        tensors.push(NamedTensor {
            name,
            dtype,
            tensor,
        });
    }
    let at = r.offset();
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let trained: Vec<&NamedTensor> = tensors.iter().filter(|t| !is_ema(t)).collect();
            let mut m = Vec::with_capacity(trained.len());
            for nt in &trained {
                m.push(read_payload(
                    &mut r,
                    Dtype::F64,
                    nt.tensor.shape(),
                    "first moment",
                )?);
            }
            let mut v = Vec::with_capacity(trained.len());
            for nt in &trained {
                v.push(read_payload(
                    &mut r,
                    Dtype::F64,
                    nt.tensor.shape(),
                    "second moment",
                )?);
            }
            Some(AdamState { step, m, v })
        }
        flag => {
            return Err(Error::Format {
                offset: at,
                msg: format!("invalid optimizer flag {flag}"),
            })
        }
    };
    let step = r.u64("step")?;
    r.finish()?;
    Ok(Checkpoint {
        config,
        tensors,
        optimizer,
        step,
    })
}

/// Writes through a temporary file so readers never see a partial checkpoint.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
