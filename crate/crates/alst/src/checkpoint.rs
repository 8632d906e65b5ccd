//! Binary checkpoint container.
//!
//! ```text
//! "ALSTCKPT"            8-byte magic
//! u32 version
//! u32 len, bytes        model config as JSON
//! u64 epochs_completed
//! u64 global_step
//! u64 seed
//! [u8; 32] rng seed, u64 stream, u128 word position   next shuffle stream
//! u32 tensor count, then per tensor:
//!     u32 len, name bytes, u32 rank, u64 dims[rank], f64 data[..]
//! u8 has_optimizer, then when 1:
//!     u64 step_count, f64 beta1, beta2, epsilon,
//!     f64 first moments, f64 second moments (same shapes as the tensors)
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use numcore::{AdamConfig, AdamState, Tensor};

use crate::error::{Error, Result};
use crate::model::{AlstConfig, AlstParams};
use crate::rng::shuffle_rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, stored so a resumed run can confirm it
/// continues the same random sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    /// State of the shuffle stream for `epoch`.
    pub fn for_epoch(seed: u64, epoch: u64) -> Self {
        let rng = shuffle_rng(seed, epoch);
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AlstParams,
    pub epochs_completed: u64,
    pub global_step: u64,
    pub seed: u64,
    pub rng: RngState,
    pub optimizer: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} more bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'b [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

impl Checkpoint {
    pub fn config(&self) -> &AlstConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(serde_json::to_string(&self.params.config).expect("config serializes").as_bytes());
        w.u64(self.epochs_completed);
        w.u64(self.global_step);
        w.u64(self.seed);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.tensors.len() as u32);
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.u64(s.step_count);
                w.f64s(&[s.config.beta1, s.config.beta2, s.config.epsilon]);
                for m in s.first_moment.iter().chain(&s.second_moment) {
                    w.f64s(m.data());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.err("missing ALSTCKPT magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let cfg_bytes = r.bytes()?;
        let config: AlstConfig = serde_json::from_slice(cfg_bytes).map_err(|e| r.err(format!("config: {e}")))?;
        let epochs_completed = r.u64()?;
        let global_step = r.u64()?;
        let seed = r.u64()?;
        let rng = RngState {
            seed: r.take(32)?.try_into().unwrap(),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let data = r.f64s(shape.iter().product())?;
            named.push((name, Tensor::new(shape, data)?));
        }
        let params = AlstParams::from_named(&config, named)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let adam = AdamConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let read_moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
                    params
                        .tensors
                        .iter()
                        .map(|t| Ok(Tensor::new(t.shape().to_vec(), r.f64s(t.len())?)?))
                        .collect()
                };
                let first_moment = read_moments(&mut r)?;
                let second_moment = read_moments(&mut r)?;
                Some(AdamState {
                    config: adam,
                    step_count,
                    first_moment,
                    second_moment,
                })
            }
            other => return Err(r.err(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            params,
            epochs_completed,
            global_step,
            seed,
            rng,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
