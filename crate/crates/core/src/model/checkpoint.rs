//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          8 bytes   "DSMOECKP"
//! version        u32       1
//! config         vocab_size u32, embed_dim u32, num_layers u32, num_experts u32,
//!                top_k u32, expert_hidden_dim u32, router_mode u8 (0 post, 1 pre),
//!                max_seq_len u32, mixer u8 (0 attention, 1 mean-pool), seed u64
//! optimiser      steps u64, batch_size u64, learning_rate f64, beta1 f64, beta2 f64,
//!                eps f64, warmup_steps u64, grad_clip f64, balance_coef f64, seed u64
//! blocks         count u32, then per block: ndim u32, dims u32 × ndim, data f64 × Π dims
//! ```
//!
//! Parameter blocks follow [`MoeModel::params`] declaration order.

use std::fs;
use std::path::Path;

use super::config::{MixerKind, ModelConfig, RouterMode, TrainSettings};
use super::network::MoeModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSMOECKP";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn encode_config(c: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(46);
    for v in [
        c.vocab_size,
        c.embed_dim,
        c.num_layers,
        c.num_experts,
        c.top_k,
        c.expert_hidden_dim,
    ] {
        put_u32(&mut out, v);
    }
    out.push(match c.router_mode {
        RouterMode::PostSoftmax => 0,
        RouterMode::PreSoftmax => 1,
    });
    put_u32(&mut out, c.max_seq_len);
    out.push(match c.mixer {
        MixerKind::Attention => 0,
        MixerKind::MeanPool => 1,
    });
    out.extend_from_slice(&c.seed.to_le_bytes());
    out
}

fn encode_settings(s: &TrainSettings, out: &mut Vec<u8>) {
    out.extend_from_slice(&(s.steps as u64).to_le_bytes());
    out.extend_from_slice(&(s.batch_size as u64).to_le_bytes());
    for f in [s.learning_rate, s.beta1, s.beta2, s.eps] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(s.warmup_steps as u64).to_le_bytes());
    for f in [s.grad_clip, s.balance_coef] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
}

/// Serialises the model to the checkpoint byte layout.
pub fn encode_checkpoint(model: &MoeModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&encode_config(model.config()));
    encode_settings(model.train_settings(), &mut out);
    let params = model.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.shape().len());
        for &d in p.shape() {
            put_u32(&mut out, d);
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MoeModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic header, not a checkpoint".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let router_mode = match r.u8()? {
        0 => RouterMode::PostSoftmax,
        1 => RouterMode::PreSoftmax,
        other => return Err(Error::Format(format!("unknown router mode tag {other}"))),
    };
    let max_seq_len = r.u32()?;
    let mixer = match r.u8()? {
        0 => MixerKind::Attention,
        1 => MixerKind::MeanPool,
        other => return Err(Error::Format(format!("unknown mixer tag {other}"))),
    };
    let seed = r.u64()?;
    let config = ModelConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        num_layers: dims[2],
        num_experts: dims[3],
        top_k: dims[4],
        expert_hidden_dim: dims[5],
        router_mode,
        max_seq_len,
        mixer,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;

    let settings = TrainSettings {
        steps: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        warmup_steps: r.u64()? as usize,
        grad_clip: r.f64()?,
        balance_coef: r.f64()?,
        seed: r.u64()?,
    };

    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(Error::Format(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("block too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameter blocks",
            bytes.len() - r.pos
        )));
    }
    let mut model = MoeModel::from_params(config, params)?;
    model.train_settings = settings;
    Ok(model)
}

pub fn save_checkpoint(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MoeModel> {
    decode_checkpoint(&fs::read(path)?)
}
