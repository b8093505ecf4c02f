//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "MHCK" | version u32 | config_len u32 | config JSON
//! | tensor_count u32 | { name_len u16 | name | kind u8 | rank u8 | dims u32* | f32 data }*
//! | crc32 u32 over every preceding byte
//! ```
//!
//! `kind` is 0 for trainable parameters and 1 for buffers.

use std::path::Path;

use super::{io_err, Result, RunConfig, RuntimeError};
use crate::nn::{Mhcnn, NamedTensors, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    /// The stored config drops `output_dir`, so the bytes depend only on the
    /// model and the training recipe, not on where the run was written.
    pub fn new(model: &Mhcnn<f32>, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.model = model.config().clone();
        config.output_dir = None;
        Self {
            config,
            store: model.store.clone(),
        }
    }

    pub fn model(&self) -> Result<Mhcnn<f32>> {
        Mhcnn::from_store(&self.config.model, self.store.clone())
            .map_err(|e| RuntimeError::Corrupt(format!("tensors do not match the embedded config: {e}")))
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ckpt.config).expect("run config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors: Vec<(u8, &String, &Tensor<f32>)> = ckpt
        .store
        .params
        .iter()
        .map(|(n, t)| (0u8, n, t))
        .chain(ckpt.store.buffers.iter().map(|(n, t)| (1u8, n, t)))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (kind, name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RuntimeError::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

struct RawTensor<'a> {
    kind: u8,
    name: &'a [u8],
    shape: Vec<usize>,
    payload: &'a [u8],
}

/// Parses and fully validates a checkpoint: framing, checksum, config and
/// tensor layout against the embedded model config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(RuntimeError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(RuntimeError::Version(version));
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config")?;
    let count = r.u32("tensor count")? as usize;
    let mut raw = Vec::new();
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = r.u16(&what)? as usize;
        let name = r.take(name_len, &what)?;
        let kind = r.u8(&what)?;
        let rank = r.u8(&what)? as usize;
        let shape = (0..rank).map(|_| r.u32(&what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| RuntimeError::Corrupt(format!("{what}: absurd shape {shape:?}")))?;
        let payload = r.take(numel, &what)?;
        raw.push(RawTensor {
            kind,
            name,
            shape,
            payload,
        });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(RuntimeError::Corrupt(format!(
            "{} unexpected bytes after the checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(RuntimeError::Checksum { stored, computed });
    }

    let config: RunConfig =
        serde_json::from_slice(json).map_err(|e| RuntimeError::Corrupt(format!("embedded config: {e}")))?;
    let mut store = ParamStore::<f32>::default();
    for t in raw {
        let name = String::from_utf8(t.name.to_vec())
            .map_err(|_| RuntimeError::Corrupt("tensor name is not UTF-8".into()))?;
        let data = t
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&t.shape, data).map_err(|e| RuntimeError::Corrupt(format!("`{name}`: {e}")))?;
        let table: &mut NamedTensors<f32> = match t.kind {
            0 => &mut store.params,
            1 => &mut store.buffers,
            k => return Err(RuntimeError::Corrupt(format!("`{name}`: unknown tensor kind {k}"))),
        };
        if table.insert(name.clone(), tensor).is_some() {
            return Err(RuntimeError::Corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    let ckpt = Checkpoint { config, store };
    ckpt.model()?;
    Ok(ckpt)
}

pub fn save_checkpoint(model: &Mhcnn<f32>, config: &RunConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(&Checkpoint::new(model, config));
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}
