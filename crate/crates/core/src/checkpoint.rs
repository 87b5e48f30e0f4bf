//! Self-describing checkpoint container.
//!
//! ```text
//! 8 bytes   magic "MMPCKPT1"
//! u64 LE    header length in bytes
//! header    UTF-8 JSON: kind, epoch, config echo, optimizer step, tensor index
//! payload   f32 LE values of every indexed tensor, back to back
//! ```
//!
//! Tensor names: network weights as-is, Adam moments under `adam.m.` and
//! `adam.v.`, an embedded frozen MMP-Net under `mmpnet.`. Files are written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"MMPCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, epoch: usize, config: serde_json::Value) -> Self {
        Self { kind: kind.into(), epoch, config, adam_step: 0, tensors: Vec::new() }
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn add_adam(&mut self, store: &ParamStore<f32>, adam: &Adam<f32>) {
        self.adam_step = adam.step;
        for (id, name, _) in store.iter() {
            self.tensors.push((format!("adam.m.{name}"), adam.m[id.0].clone()));
            self.tensors.push((format!("adam.v.{name}"), adam.v[id.0].clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from `<prefix><name>`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.get(&name).ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::invalid(format!("tensor `{name}` has shape {}, expected {}", t.shape(), store.get(id).shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn load_adam(&self, store: &ParamStore<f32>) -> Result<Adam<f32>> {
        let mut adam = Adam::new(store);
        adam.step = self.adam_step;
        for (id, name, t) in store.iter() {
            for (slot, key) in [(&mut adam.m[id.0], "m"), (&mut adam.v[id.0], "v")] {
                let full = format!("adam.{key}.{name}");
                let s = self.get(&full).ok_or_else(|| Error::invalid(format!("checkpoint lacks optimizer tensor `{full}`")))?;
                if s.shape() != t.shape() {
                    return Err(Error::invalid(format!("optimizer tensor `{full}` has the wrong shape")));
                }
                *slot = s.clone();
            }
        }
        Ok(adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().dims(), offset });
            offset += t.len();
        }
        let header = Header {
            kind: self.kind.clone(),
            epoch: self.epoch,
            config: self.config.clone(),
            adam_step: self.adam_step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 4 * offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
            let range = 4 * e.offset..4 * (e.offset + shape.len());
            let raw = payload.get(range).ok_or_else(|| Error::format(path, format!("tensor `{}` out of bounds", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(shape, data)));
        }
        Ok(Self { kind: header.kind, epoch: header.epoch, config: header.config, adam_step: header.adam_step, tensors })
    }
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// `ckpt_epochNNNN`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}")
}

/// Checkpoints in `dir` sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(e) = name.strip_prefix("ckpt_epoch").and_then(|d| d.parse::<usize>().ok()) {
            out.push((e, p));
        }
    }
    out.sort();
    Ok(out)
}
