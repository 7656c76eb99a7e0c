//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "PHRN" | version u32 | config_len u32 | config JSON
//! step u64 | data seed u64 | data cursor u64 | loss averages f64 x 8
//! 2 x store:   count u32, then per tensor:
//!     path_len u32 | path | kind u8 | dtype u8 | ndim u32 | dims u32 x ndim
//!     values f32 x numel
//!     (trainable only) adam_step u64 | m f32 x numel | v f32 x numel
//! ```
//!
//! Stores are written generator first, then discriminators.

use std::path::Path;

use thiserror::Error;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::nn::{AdamMoments, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::train::{DataCursor, TrainState};

pub const MAGIC: &[u8; 4] = b"PHRN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: String, expected: usize, actual: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupt(msg.into()).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(CheckpointError::Truncated { what: what(), expected: n, actual: remaining }.into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: impl FnOnce() -> String) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: impl FnOnce() -> String) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn f32s(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (path, p) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(p.kind.code());
        out.push(DTYPE_F32);
        let dims = p.value.shape().dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(out, p.value.data());
        if let Some(adam) = &p.adam {
            out.extend_from_slice(&adam.step.to_le_bytes());
            put_f32s(out, &adam.m);
            put_f32s(out, &adam.v);
        }
    }
}

/// Fills `store` from the reader, requiring identical paths, kinds and
/// shapes in the same order.
fn read_store(r: &mut Reader, store: &mut ParamStore, label: &str) -> Result<()> {
    let count = r.u32(|| format!("{label} tensor count"))? as usize;
    if count != store.len() {
        return Err(corrupt(format!("{label} store has {count} tensors, model expects {}", store.len())));
    }
    for index in 0..count {
        let len = r.u32(|| format!("{label} tensor #{index} path length"))? as usize;
        let path = r.take(len, || format!("{label} tensor #{index} path"))?;
        let path = std::str::from_utf8(path).map_err(|_| corrupt(format!("{label} tensor #{index}: path is not UTF-8")))?.to_string();
        let (expected_path, param) = store.get_index_mut(index).expect("count checked");
        if path != expected_path {
            return Err(corrupt(format!("{label} tensor #{index} is `{path}`, model expects `{expected_path}`")));
        }
        let kind = r.u8(|| format!("tensor `{path}` kind"))?;
        let kind = ParamKind::from_code(kind).ok_or_else(|| corrupt(format!("tensor `{path}`: unknown kind {kind}")))?;
        if kind != param.kind {
            return Err(corrupt(format!("tensor `{path}` has kind {kind:?}, model expects {:?}", param.kind)));
        }
        let dtype = r.u8(|| format!("tensor `{path}` dtype"))?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(format!("tensor `{path}`: unsupported dtype {dtype}")));
        }
        let ndim = r.u32(|| format!("tensor `{path}` rank"))? as usize;
        if ndim != 4 {
            return Err(corrupt(format!("tensor `{path}`: rank {ndim}, expected 4")));
        }
        let mut dims = [0; 4];
        for d in &mut dims {
            *d = r.u32(|| format!("tensor `{path}` shape"))? as usize;
        }
        let shape = Shape::from_dims(dims);
        if shape != param.value.shape() {
            return Err(corrupt(format!("tensor `{path}` has shape {:?}, model expects {:?}", shape, param.value.shape())));
        }
        let n = shape.numel();
        param.value = Tensor::new(shape, r.f32s(n, || format!("tensor `{path}` values"))?)?;
        if param.adam.is_some() {
            let step = r.u64(|| format!("tensor `{path}` Adam step"))?;
            let m = r.f32s(n, || format!("tensor `{path}` Adam first moment"))?;
            let v = r.f32s(n, || format!("tensor `{path}` Adam second moment"))?;
            param.adam = Some(AdamMoments { m, v, step });
        }
    }
    Ok(())
}

fn loss_fields(b: &mut LossBundle) -> [&mut f64; 8] {
    [
        &mut b.l_content,
        &mut b.l_style,
        &mut b.l_adv_feat_g,
        &mut b.l_adv_img_g,
        &mut b.l_total_g,
        &mut b.l_adv_feat_d,
        &mut b.l_adv_img_d,
        &mut b.l_total_d,
    ]
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&state.config).map_err(|e| corrupt(format!("config does not serialize: {e}")))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.data.seed.to_le_bytes());
    out.extend_from_slice(&state.data.cursor.to_le_bytes());
    let mut avg = state.loss_avg;
    for v in loss_fields(&mut avg) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_store(&mut out, &state.generator.store);
    write_store(&mut out, &state.discriminators.store);
    Ok(out)
}

/// Rebuilds the models from the stored configuration, then fills every
/// tensor and optimizer slot.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, || "magic".into()).map_err(|_| CheckpointError::NotACheckpoint)? != MAGIC {
        return Err(CheckpointError::NotACheckpoint.into());
    }
    let version = r.u32(|| "format version".into())?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
    }
    let len = r.u32(|| "config length".into())? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(len, || "config".into())?).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut state = TrainState::new(config)?;
    state.step = r.u64(|| "step counter".into())?;
    state.data = DataCursor { seed: r.u64(|| "data seed".into())?, cursor: r.u64(|| "data cursor".into())? };
    for (i, v) in loss_fields(&mut state.loss_avg).into_iter().enumerate() {
        *v = r.f64(|| format!("loss average #{i}"))?;
    }
    read_store(&mut r, &mut state.generator.store, "generator")?;
    read_store(&mut r, &mut state.discriminators.store, "discriminator")?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
