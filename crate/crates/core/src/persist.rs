//! Checkpoint container and report files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FPCMCKPT" | u32 version | u32 header length | JSON header
//! | f32 payload | u32 CRC-32 of every preceding byte
//! ```
//!
//! The header echoes the model configuration and indexes the payload by
//! tensor name.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FPCMCKPT";
pub const VERSION: u32 = 1;

/// Training state stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Cutoff of the scheduled layers at save time.
    pub beta: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<BlobEntry>,
    buffers: Vec<BlobEntry>,
    optimizer: Option<Vec<BlobEntry>>,
    payload_len: usize,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    /// Momentum buffers, in parameter order, when saved.
    pub optimizer: Option<Vec<Tensor>>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn push_blobs<'a>(entries: &mut Vec<BlobEntry>, payload: &mut Vec<u8>, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
    for (name, t) in items {
        entries.push(BlobEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() / 4,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Encodes a checkpoint in memory.
pub fn encode(model: &Model, meta: &CheckpointMeta, optimizer: Option<&[Tensor]>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    push_blobs(&mut params, &mut payload, model.params().iter().map(|p| (p.name.as_str(), &p.value)));
    push_blobs(&mut buffers, &mut payload, model.buffers().iter().map(|p| (p.name.as_str(), &p.value)));
    let optimizer = optimizer.map(|bufs| {
        let mut entries = Vec::new();
        let names: Vec<String> = model.params().iter().map(|p| format!("momentum.{}", p.name)).collect();
        push_blobs(&mut entries, &mut payload, names.iter().map(String::as_str).zip(bufs));
        entries
    });
    let header = Header {
        model: model.config().clone(),
        meta: meta.clone(),
        params,
        buffers,
        optimizer,
        payload_len: payload.len() / 4,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Saves `model` atomically.
pub fn save(model: &Model, meta: &CheckpointMeta, optimizer: Option<&[Tensor]>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, meta, optimizer)?)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn read_blobs(entries: &[BlobEntry], payload: &[u8]) -> Result<Vec<Tensor>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 4, (e.offset + n) * 4);
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("blob {} runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            Tensor::new(e.shape.clone(), data)
        })
        .collect()
}

/// Decodes a checkpoint. The model is rebuilt from the stored config and
/// its cutoff state restored.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header_len = u32_at(bytes, 12) as usize;
    let header_bytes = body
        .get(16..16 + header_len)
        .ok_or_else(|| Error::Format("header runs past the end of the file".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &body[16 + header_len..];
    if payload.len() != header.payload_len * 4 {
        return Err(Error::Format("payload length does not match the header".into()));
    }
    let mut model = Model::build(&header.model, 0)?;
    let names_match = model.params().iter().map(|p| &p.name).eq(header.params.iter().map(|e| &e.name))
        && model.buffers().iter().map(|p| &p.name).eq(header.buffers.iter().map(|e| &e.name));
    if !names_match {
        return Err(Error::config("stored tensor names do not match the configured model"));
    }
    model.load_state(read_blobs(&header.params, payload)?, read_blobs(&header.buffers, payload)?)?;
    if let (Some(beta), Some(_)) = (header.meta.beta, model.scheduled_beta()) {
        model.set_scheduled_beta(beta)?;
    }
    let optimizer = header.optimizer.as_deref().map(|e| read_blobs(e, payload)).transpose()?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
        optimizer,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads weights into an existing model, refusing a checkpoint whose
/// configuration differs from the model's.
pub fn load_into(model: &mut Model, path: &Path) -> Result<CheckpointMeta> {
    let ck = load(path)?;
    if ck.model.config() != model.config() {
        return Err(Error::config("checkpoint was saved with a different model configuration"));
    }
    *model = ck.model;
    Ok(ck.meta)
}
