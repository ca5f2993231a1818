//! Binary parameter files plus a JSON sidecar holding the config and the
//! layer layout.
//!
//! Layout: `DCLSCKPT`, u32 version, u32 parameter count, then per
//! parameter: u32 name length, UTF-8 name, u8 dtype tag (0 = f32), u32
//! rank, u32 extents, little-endian f32 payload. All integers are
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelLayout, ParamStore, Result, TrainConfig, ZooError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCLSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    pub layout: ModelLayout,
}

/// `model.ckpt` → `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ZooError + '_ {
    move |source| ZooError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_params<W: Write>(mut w: W, params: &ParamStore) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(ZooError::Format(format!("truncated while reading {what} at byte {}", self.at)));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|source| ZooError::Io {
        path: "<reader>".into(),
        source,
    })?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ZooError::Format("bad magic, not a DCLSCKPT file".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ZooError::Format(format!(
            "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let count = c.u32("parameter count")?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| ZooError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(ZooError::Format(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = c.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(ZooError::Format(format!("{name}: rank {rank} out of range")));
        }
        let shape = (0..rank).map(|_| c.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()));
        let numel = numel.ok_or_else(|| ZooError::Format(format!("{name}: shape {shape:?} too large")))?;
        let payload = c.take(numel * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.at != bytes.len() {
        return Err(ZooError::Format(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(store)
}

/// Writes `path` and its sidecar.
pub fn save(model: &Model, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, model.params()).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))?;
    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        config: config.cloned(),
        layout: model.layout(),
    };
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    fs::write(&side, json).map_err(io_err(&side))
}

pub fn load(path: &Path) -> Result<(Model, Sidecar)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let params = read_params(bytes.as_slice())?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let model = Model::from_layout(&sidecar.layout, params)?;
    Ok((model, sidecar))
}
