use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderConfig, EncoderConfig, RestorationModel};
use crate::error::{Error, IoContext, Result};
use crate::nn::{Param, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDCPTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `pretrain`, `finetune` or `encoder`.
    pub kind: String,
    pub iteration: u64,
    pub seed: u64,
    /// SHA-256 of the loss log up to `iteration`.
    pub loss_digest: String,
    #[serde(default)]
    pub optimizer_step: u64,
    #[serde(default)]
    pub decoder: Option<DecoderConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
}

/// Self-describing parameter file: magic, `u32` version, `u64` header length, a JSON header
/// listing `(name, dtype, shape)` per tensor, then the tensors as little-endian `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(encoder: EncoderConfig, meta: CheckpointMeta) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            encoder,
            meta,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of `store` accepted by `keep`, in store order.
    pub fn add_params(&mut self, store: &ParamStore, mut keep: impl FnMut(&Param) -> bool) {
        for (_, p) in store.iter() {
            if keep(p) {
                self.tensors.push((p.name.clone(), p.value.clone()));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: self.version,
            encoder: self.encoder.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorHeader {
                    name: n.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.tensors.iter().map(|(_, t)| 4 * t.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let mut offset = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            if th.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", th.name, th.dtype)));
            }
            let n: usize = th.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| corrupt(format!("{}: truncated data", th.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((th.name, Tensor::from_vec(&th.shape, data)?));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self {
            version,
            encoder: header.encoder,
            meta: header.meta,
            tensors,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    /// Copy tensors into every parameter of `store` accepted by `keep`, matching by name.
    ///
    /// Shape disagreements are reported together, in store order.
    pub fn load_into(&self, store: &mut ParamStore, mut keep: impl FnMut(&Param) -> bool) -> Result<()> {
        let mut mismatched = Vec::new();
        let mut missing = Vec::new();
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            if !keep(p) {
                continue;
            }
            match self.get(&p.name) {
                None => missing.push(p.name.clone()),
                Some(t) if t.shape() != p.value.shape() => mismatched.push(p.name.clone()),
                Some(t) => updates.push((id, t.clone())),
            }
        }
        if !mismatched.is_empty() {
            return Err(Error::ShapeMismatch { names: mismatched });
        }
        if !missing.is_empty() {
            return Err(corrupt(format!("missing tensors: {}", missing.join(", "))));
        }
        for (id, t) in updates {
            *store.value_mut(id) = t;
        }
        Ok(())
    }
}

/// Write the encoder tensors of a checkpoint to a new encoder-only checkpoint.
pub fn export_encoder(src: &Path, dst: &Path) -> Result<Checkpoint> {
    let full = Checkpoint::load(src)?;
    let mut out = Checkpoint::new(
        full.encoder.clone(),
        CheckpointMeta {
            kind: "encoder".into(),
            decoder: None,
            optimizer_step: 0,
            ..full.meta.clone()
        },
    );
    out.tensors = full.tensors.into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect();
    out.save(dst)?;
    Ok(out)
}

/// Transplant a checkpoint's encoder into `target`; the target's head is left as initialized.
pub fn import_encoder(path: &Path, mut target: RestorationModel) -> Result<RestorationModel> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.load_into(&mut target.store, |p| p.name.starts_with("encoder."))?;
    Ok(target)
}
