//! Little-endian checkpoint format.
//!
//! ```text
//! magic      4 bytes  "FTRC"
//! version    u32
//! config     n_layers, d_model, n_heads, d_ffn, vocab_size, context_len (u64 each),
//!            max_lr, min_lr_ratio (f64), warmup_steps, total_steps, init_seed (u64),
//!            beta1, beta2, eps, weight_decay (f64)
//! sections   u64 count, then per section: u32 name length, name bytes, u64 length, f64 values
//! moments    u64 length, f64 first moments; u64 length, f64 second moments
//! counters   step u64, rng_state u64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamConfig, ModelConfig, ModelError, ModelState};

pub const MAGIC: &[u8; 4] = b"FTRC";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.0.len() < n {
            return Err(err("unexpected end of checkpoint"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self, field: &str) -> Result<usize, ModelError> {
        usize::try_from(self.u64()?).map_err(|_| err(format!("{field} out of range")))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, expect: usize, field: &str) -> Result<Vec<f64>, ModelError> {
        let n = self.usize(field)?;
        if n != expect {
            return Err(err(format!("{field}: length {n}, expected {expect}")));
        }
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| err("unexpected end of checkpoint"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serializes `state` into checkpoint bytes.
pub fn write_checkpoint(state: &ModelState, out: &mut impl Write) -> Result<(), ModelError> {
    let c = &state.config;
    let mut w = Writer(Vec::with_capacity(state.params.len() * 24 + 1024));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for x in [c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.context_len] {
        w.u64(x as u64);
    }
    w.f64(c.max_lr);
    w.f64(c.min_lr_ratio);
    w.u64(c.warmup_steps);
    w.u64(c.total_steps);
    w.u64(c.init_seed);
    for x in [c.adam.beta1, c.adam.beta2, c.adam.eps, c.adam.weight_decay] {
        w.f64(x);
    }
    let sections = state.layout().sections();
    w.u64(sections.len() as u64);
    for s in sections {
        w.u32(s.name.len() as u32);
        w.0.extend_from_slice(s.name.as_bytes());
        w.f64s(&state.params[s.offset..s.offset + s.len]);
    }
    w.f64s(&state.m);
    w.f64s(&state.v);
    w.u64(state.step);
    w.u64(state.rng_state);
    out.write_all(&w.0)?;
    Ok(())
}

/// Parses checkpoint bytes. Corruption is reported by field name.
pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelState, ModelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader(&buf);
    if r.take(4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.usize("n_layers")?,
        d_model: r.usize("d_model")?,
        n_heads: r.usize("n_heads")?,
        d_ffn: r.usize("d_ffn")?,
        vocab_size: r.usize("vocab_size")?,
        context_len: r.usize("context_len")?,
        max_lr: r.f64()?,
        min_lr_ratio: r.f64()?,
        warmup_steps: r.u64()?,
        total_steps: r.u64()?,
        init_seed: r.u64()?,
        adam: AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? },
    };
    config.validate().map_err(|e| err(format!("config: {e}")))?;
    let layout = super::Layout::new(&config);
    let count = r.usize("section count")?;
    if count != layout.sections().len() {
        return Err(err(format!("section count {count}, expected {}", layout.sections().len())));
    }
    let mut params = vec![0.0; layout.total()];
    for s in layout.sections() {
        let n = r.u32()? as usize;
        let name = r.take(n)?;
        if name != s.name.as_bytes() {
            return Err(err(format!("section name: expected {}", s.name)));
        }
        let vals = r.f64s(s.len, &s.name)?;
        params[s.offset..s.offset + s.len].copy_from_slice(&vals);
    }
    let m = r.f64s(layout.total(), "first moments")?;
    let v = r.f64s(layout.total(), "second moments")?;
    let step = r.u64()?;
    let rng_state = r.u64()?;
    if !r.0.is_empty() {
        return Err(err("trailing bytes after rng_state"));
    }
    ModelState::from_parts(config, params, m, v, step, rng_state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    write_checkpoint(state, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let mut f = std::fs::File::open(path)?;
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Batch};

    fn micro() -> ModelConfig {
        ModelConfig { d_model: 8, d_ffn: 16, vocab_size: 12, context_len: 64, warmup_steps: 2, total_steps: 40, max_lr: 1e-2, ..ModelConfig::default() }
    }

    fn bytes(s: &ModelState) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(s, &mut b).unwrap();
        b
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut s = init_model(&micro()).unwrap();
        s.train_step(&Batch::from_sequences(&[vec![1, 4, 5, 6, 7]])).unwrap();
        s.train_step(&Batch::from_sequences(&[vec![1, 4, 5, 6, 7]])).unwrap();
        let b = bytes(&s);
        let back = read_checkpoint(&mut b.as_slice()).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let batches: Vec<Batch> =
            (0..20).map(|i| Batch::from_sequences(&[(0..10).map(|j| (3 + (i + j * 3) % 9) as u32).collect()])).collect();
        let mut straight = init_model(&micro()).unwrap();
        batches.iter().for_each(|b| {
            straight.train_step(b).unwrap();
        });
        let mut first = init_model(&micro()).unwrap();
        batches[..10].iter().for_each(|b| {
            first.train_step(b).unwrap();
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        batches[10..].iter().for_each(|b| {
            resumed.train_step(b).unwrap();
        });
        assert_eq!(resumed.checksum(), straight.checksum());
    }

    #[test]
    fn corruption_is_named() {
        let b = bytes(&init_model(&micro()).unwrap());
        let e = read_checkpoint(&mut &b[..b.len() - 3]).unwrap_err();
        assert!(e.to_string().contains("unexpected end of checkpoint"));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(read_checkpoint(&mut bad.as_slice()).unwrap_err().to_string().contains("version"));
    }
}
