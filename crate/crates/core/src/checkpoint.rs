//! Versioned little-endian checkpoint files.
//!
//! ```text
//! "SRCK" | u32 version | u32 len + TOML config echo
//! u64 seed | u64 epoch | u64 step | u64 adam_t
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u32 tensor count, then per tensor:
//!   u32 len + name | u32 ndim | u64 × ndim shape | f64 × prod(shape)
//! ```
//!
//! Tensors are the model parameters followed by `adam.m.*` and `adam.v.*`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::training::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"SRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Truncated {
            what: "checkpoint",
            expected: (self.pos as u64).saturating_add(n as u64),
            found: self.buf.len() as u64,
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Shape("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Shape(format!("tensor {name} shape {shape:?} overflows")))?;
        let data = self
            .take(count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let echo = ConfigEcho {
        model: trainer.model.config,
        train: trainer.config.clone(),
    };
    let text = toml::to_string(&echo).map_err(|e| Error::Config(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(text.as_bytes());
    w.u64(trainer.seed);
    w.u64(trainer.epoch);
    w.u64(trainer.step);
    w.u64(trainer.adam.t);
    w.0.extend_from_slice(&trainer.rng.get_seed());
    w.u64(trainer.rng.get_stream());
    w.0.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());

    let tensors = trainer.model.tensors();
    w.u32((3 * tensors.len()) as u32);
    for t in &tensors {
        w.tensor(&t.name, &t.shape, t.data);
    }
    for (prefix, moments) in [("adam.m", &trainer.adam.m), ("adam.v", &trainer.adam.v)] {
        for (t, m) in tensors.iter().zip(moments) {
            w.tensor(&format!("{prefix}.{}", t.name), &t.shape, m);
        }
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotCheckpoint);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Config("config echo is not UTF-8".into()))?;
    let echo: ConfigEcho = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    let adam_t = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());

    let mut trainer = Trainer::from_model(Model::new(echo.model, seed)?, echo.train, seed);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.epoch = epoch;
    trainer.step = step;
    trainer.adam.t = adam_t;

    let count = r.u32()? as usize;
    let mut params = trainer.model.tensors_mut();
    if count != 3 * params.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} tensors, model needs {}",
            3 * params.len()
        )));
    }
    let n = params.len();
    for i in 0..count {
        let (name, shape, data) = r.tensor()?;
        let slot = i % n;
        let base = &params[slot].name;
        let expect_name = match i / n {
            0 => base.clone(),
            1 => format!("adam.m.{base}"),
            _ => format!("adam.v.{base}"),
        };
        if name != expect_name || shape != params[slot].shape {
            return Err(Error::Shape(format!(
                "tensor {i}: found {name} {shape:?}, expected {expect_name} {:?}",
                params[slot].shape
            )));
        }
        let dst: &mut [f64] = match i / n {
            0 => params[slot].data,
            1 => &mut trainer.adam.m[slot],
            _ => &mut trainer.adam.v[slot],
        };
        dst.copy_from_slice(&data);
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(Error::Shape(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(trainer)
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    decode_checkpoint(&fs::read(path)?)
}
