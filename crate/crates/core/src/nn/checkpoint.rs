//! Binary checkpoint format.
//!
//! ```text
//! "SCNT" | version u32 | config_len u32 | config (TOML, UTF-8)
//! | scheduler state | epochs_completed u32
//! | n_blobs u32 | { name_len u32 | name | ndim u32 | dims u32.. | f32 data.. }
//! | crc32 u32 (of every preceding byte)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::model::{Model, ModelConfig};
use super::optim::{SchedulerConfig, SchedulerState};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCNT";
const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub scheduler: SchedulerState,
    pub epochs_completed: u32,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            scheduler: SchedulerState::new(SchedulerConfig::default()),
            epochs_completed: 0,
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let config = toml::to_string(&ck.model.config).map_err(|e| Error::Config(e.to_string()))?;
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());

    let s = &ck.scheduler;
    put_f64(&mut buf, s.config.initial_lr);
    put_f64(&mut buf, s.config.factor);
    put_f64(&mut buf, s.config.threshold);
    put_u32(&mut buf, s.config.patience);
    put_u32(&mut buf, s.config.max_decays);
    put_f64(&mut buf, s.best_cv_loss);
    put_u32(&mut buf, s.epochs_since_improve);
    put_u32(&mut buf, s.decay_count);
    put_u32(&mut buf, ck.epochs_completed);

    let params = ck.model.named_params();
    put_u32(&mut buf, params.len() as u32 + 2);
    let nm = ck.model.norm_mean.len();
    put_blob(&mut buf, "norm.mean", &[nm], &ck.model.norm_mean);
    put_blob(&mut buf, "norm.std", &[nm], &ck.model.norm_std);
    for (name, t) in params {
        put_blob(&mut buf, &name, t.shape(), t.data());
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::corrupt(KIND, format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::corrupt(KIND, format!("truncated: only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::corrupt(KIND, "bad magic, not a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(KIND, format!("unsupported version {version}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::corrupt(KIND, "checksum mismatch (truncated or modified)"));
    }
    let clen = r.u32()? as usize;
    let ctext = std::str::from_utf8(r.take(clen)?).map_err(|_| Error::corrupt(KIND, "config is not UTF-8"))?;
    let config: ModelConfig = toml::from_str(ctext).map_err(|e| Error::corrupt(KIND, format!("config: {e}")))?;
    config.validate()?;

    let sconf = SchedulerConfig {
        initial_lr: r.f64()?,
        factor: r.f64()?,
        threshold: r.f64()?,
        patience: r.u32()?,
        max_decays: r.u32()?,
    };
    let scheduler = SchedulerState {
        config: sconf,
        best_cv_loss: r.f64()?,
        epochs_since_improve: r.u32()?,
        decay_count: r.u32()?,
    };
    let epochs_completed = r.u32()?;

    let mut model: Model<f32> = Model::new(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = {
        let nm = model.config.n_mels;
        let mut v = vec![("norm.mean".to_string(), vec![nm]), ("norm.std".to_string(), vec![nm])];
        v.extend(model.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())));
        v
    };
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(Error::corrupt(KIND, format!("{n} parameter blobs, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(n);
    for (want_name, want_shape) in &expected {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::corrupt(KIND, "blob name is not UTF-8"))?;
        if name != want_name {
            return Err(Error::corrupt(KIND, format!("blob '{name}', expected '{want_name}'")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::corrupt(KIND, format!("blob '{name}' shape {shape:?}, expected {want_shape:?}")));
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::corrupt(KIND, format!("blob '{name}' holds non-finite values")));
        }
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(KIND, format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut it = tensors.into_iter();
    model.norm_mean = it.next().expect("norm.mean").into_data();
    model.norm_std = it.next().expect("norm.std").into_data();
    for (dst, src) in model.params_mut().into_iter().zip(it) {
        *dst = src;
    }
    Ok(Checkpoint {
        model,
        scheduler,
        epochs_completed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
