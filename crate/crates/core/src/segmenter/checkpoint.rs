//! SEG1 checkpoint container.
//!
//! ```text
//! "SEG1"
//! n u32 | n descriptors u32: patch, hidden1, hidden2, param_count, step_lo, step_hi
//! param_count f32                      parameters
//! 4 f32: beta1, beta2, eps, weight_decay
//! param_count f32                      first moments
//! param_count f32                      second moments
//! ```
//! Everything is little-endian.

use std::fs;
use std::path::Path;

use super::mlp::{ModelShape, PatchMlp};
use super::optim::{AdamWConfig, OptimizerState};
use super::Segmenter;
use crate::error::{Error, Result};

pub const SEG1_MAGIC: &[u8; 4] = b"SEG1";
const DESCRIPTORS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PatchMlp,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Rounds model and optimizer state to the on-disk precision, so the
    /// in-memory value equals what a reload would produce.
    pub fn quantized(mut self) -> Self {
        self.model.quantize();
        for x in self.optimizer.m.iter_mut().chain(self.optimizer.v.iter_mut()) {
            *x = *x as f32 as f64;
        }
        let c = &mut self.optimizer.config;
        for x in [&mut c.beta1, &mut c.beta2, &mut c.eps, &mut c.weight_decay] {
            *x = *x as f32 as f64;
        }
        self
    }
}

fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let shape = ck.model.shape();
    let params = ck.model.params();
    let mut out = Vec::new();
    out.extend_from_slice(SEG1_MAGIC);
    out.extend_from_slice(&(DESCRIPTORS as u32).to_le_bytes());
    let step = ck.optimizer.step;
    for d in [
        shape.patch as u32,
        shape.hidden1 as u32,
        shape.hidden2 as u32,
        params.len() as u32,
        step as u32,
        (step >> 32) as u32,
    ] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    push_f32s(&mut out, params.iter().copied());
    let c = ck.optimizer.config;
    push_f32s(&mut out, [c.beta1, c.beta2, c.eps, c.weight_decay]);
    push_f32s(&mut out, ck.optimizer.m.iter().copied());
    push_f32s(&mut out, ck.optimizer.v.iter().copied());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Length {
                expected: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != SEG1_MAGIC {
        return Err(Error::Format("missing SEG1 magic".into()));
    }
    let mut r = Reader { bytes, at: 4 };
    let n = r.u32()? as usize;
    if n != DESCRIPTORS {
        return Err(Error::Format(format!("expected {DESCRIPTORS} shape descriptors, found {n}")));
    }
    let d: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let shape = ModelShape {
        patch: d[0],
        hidden1: d[1],
        hidden2: d[2],
    };
    shape.validate()?;
    if d[3] != shape.param_count() {
        return Err(Error::Format(format!(
            "descriptor says {} params, shape implies {}",
            d[3],
            shape.param_count()
        )));
    }
    let count = d[3];
    let step = d[4] as u64 | ((d[5] as u64) << 32);
    let params = r.f32s(count)?;
    let c = r.f32s(4)?;
    let m = r.f32s(count)?;
    let v = r.f32s(count)?;
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    if v.iter().any(|&x| x < 0.0) {
        return Err(Error::Value("negative second moment".into()));
    }
    Ok(Checkpoint {
        model: PatchMlp::from_params(shape, params)?,
        optimizer: OptimizerState {
            config: AdamWConfig {
                beta1: c[0],
                beta2: c[1],
                eps: c[2],
                weight_decay: c[3],
            },
            m,
            v,
            step,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_checkpoint_round_trips_exactly() {
        let shape = ModelShape { patch: 3, hidden1: 4, hidden2: 2 };
        let model = PatchMlp::new(shape, 3).unwrap();
        let mut optimizer = OptimizerState::new(shape.param_count(), AdamWConfig::default());
        optimizer.step = (1 << 33) + 5;
        optimizer.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 0.1);
        optimizer.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.01);
        let ck = Checkpoint { model, optimizer }.quantized();
        let bytes = encode_checkpoint(&ck);
        assert_eq!(&bytes[..4], b"SEG1");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"SEG2").is_err());
    }
}
