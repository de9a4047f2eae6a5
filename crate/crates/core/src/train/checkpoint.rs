//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//! `"FGLW"`, `u32` version, `u32`-prefixed model config text, `u8`
//! initialized flag, `u32` entry count, then per entry a `u32`-prefixed
//! name, `u32` rank, `u64` dims and `f32` values; then the Adam step
//! (`u64`), both moments of every entry as `f32` values, and the `u64`
//! iteration counter.

use std::fs;
use std::path::Path;

use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{FullGlow, ModelConfig};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FGLW";
pub const VERSION: u32 = 1;

/// A model with its optimizer state and iteration counter.
#[derive(Clone, Debug)]
pub struct TrainState<R> {
    pub model: FullGlow<R>,
    pub adam: AdamState<R>,
    pub iteration: u64,
}

impl<R: Real> TrainState<R> {
    pub fn new(model: FullGlow<R>) -> Self {
        let adam = AdamState::new(&model.store, AdamConfig::default());
        Self { model, adam, iteration: 0 }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
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
    fn reals<R: Real>(&mut self, t: &Tensor<R>) {
        for v in t.data() {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::checkpoint(format!("{what} is not valid UTF-8")))
    }
    fn reals<R: Real>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<R>> {
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n, what)?;
        let data = raw.chunks_exact(4).map(|b| R::lit(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::checkpoint(format!("{what}: {e}")))
    }
}

pub fn encode_checkpoint<R: Real>(state: &TrainState<R>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(state.model.config().to_text().as_bytes());
    w.u8(u8::from(state.model.is_initialized()));
    let entries = state.model.store.entries();
    w.u32(entries.len() as u32);
    for e in entries {
        w.bytes(e.name.as_bytes());
        w.u32(e.value.rank() as u32);
        for &d in e.value.shape() {
            w.u64(d as u64);
        }
        w.reals(&e.value);
    }
    w.u64(state.adam.step);
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        w.reals(m);
        w.reals(v);
    }
    w.u64(state.iteration);
    w.0
}

pub fn decode_checkpoint<R: Real>(bytes: &[u8]) -> Result<TrainState<R>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint("bad magic; not a model checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let config = ModelConfig::from_text(&r.string("model config")?)
        .map_err(|e| Error::checkpoint(format!("stored model config is invalid: {e}")))?;
    let initialized = match r.u8("initialized flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::checkpoint(format!("invalid initialized flag {other}"))),
    };
    let mut model = FullGlow::<R>::new(config, 0)?;
    let count = r.u32("entry count")? as usize;
    if count != model.store.len() {
        return Err(Error::checkpoint(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let id = model.store.find(&name).ok_or_else(|| Error::checkpoint(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::checkpoint(format!("parameter {name:?} appears twice")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.get(id).shape() {
            return Err(Error::checkpoint(format!(
                "parameter {name:?} has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let value = r.reals(&shape, &name)?;
        model.store.set(id, value)?;
    }
    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    adam.step = r.u64("optimizer step")?;
    for i in 0..count {
        let shape = adam.m[i].shape().to_vec();
        adam.m[i] = r.reals(&shape, "first moment")?;
        adam.v[i] = r.reals(&shape, "second moment")?;
    }
    let iteration = r.u64("iteration counter")?;
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    model.mark_initialized(initialized);
    Ok(TrainState { model, adam, iteration })
}

pub fn save_checkpoint<R: Real>(state: &TrainState<R>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> Result<TrainState<R>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainState<f32> {
        let cfg = ModelConfig { n_blocks: 1, n_flows: 2, image_size: 4, in_channels: 2, hidden_channels: 4, ..ModelConfig::default() };
        TrainState::new(FullGlow::new(cfg, 3).unwrap())
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let mut state = tiny();
        state.iteration = 17;
        state.adam.step = 5;
        state.adam.m[0].data_mut()[0] = 0.25;
        let bytes = encode_checkpoint(&state);
        let back: TrainState<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.adam, state.adam);
        assert_eq!(encode_checkpoint(&back), bytes);
        for (a, b) in back.model.store.entries().iter().zip(state.model.store.entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn malformed_files_are_rejected_with_a_cause() {
        let bytes = encode_checkpoint(&tiny());
        let msg = |b: &[u8]| match decode_checkpoint::<f32>(b) {
            Err(Error::Checkpoint(m)) => m,
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(msg(&bad).contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(msg(&bad).contains("version"));
        assert!(msg(&bytes[..bytes.len() - 3]).contains("truncated"));
        let name = b"source.b0.f0.actnorm.log_scale";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
        let mut bad = bytes.clone();
        bad[at] = b'Z';
        assert!(msg(&bad).contains("unknown parameter"));
    }
}
