//! Checkpoint directories: `manifest.json` plus a little-endian f32 blob.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "isp-align-checkpoint";

/// Trainable state: GCM + mapping network, and the optional discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub gen: ParamStore<f32>,
    pub disc: Option<ParamStore<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub models: Models,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Owner {
    Gen,
    Disc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    owner: Owner,
    kind: Kind,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    step: usize,
    config: TrainConfig,
    rng: ChaCha8Rng,
    blob: String,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    fn entries(&self) -> Vec<(Owner, Kind, &String, &Tensor<f32>)> {
        let mut out = Vec::new();
        let stores = [
            (Owner::Gen, Some(&self.models.gen)),
            (Owner::Disc, self.models.disc.as_ref()),
        ];
        for (owner, store) in stores {
            let Some(s) = store else { continue };
            out.extend(s.iter().map(|(k, v)| (owner, Kind::Param, k, v)));
            out.extend(s.buffers().map(|(k, v)| (owner, Kind::Buffer, k, v)));
        }
        out
    }

    /// Serialized manifest and blob.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (owner, kind, name, t) in self.entries() {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(Entry {
                name: name.clone(),
                owner,
                kind,
                shape: t.shape().to_vec(),
                dtype: "float32".into(),
                offset,
                nbytes: blob.len() - offset,
            });
        }
        let m = Manifest {
            format: FORMAT.into(),
            version: 1,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            blob: BLOB.into(),
            tensors,
        };
        let mut manifest = serde_json::to_vec_pretty(&m)?;
        manifest.push(b'\n');
        Ok((manifest, blob))
    }

    pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let m: Manifest =
            serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if m.format != FORMAT || m.version != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                m.format, m.version
            )));
        }
        let mut gen = ParamStore::new();
        let mut disc: Option<ParamStore<f32>> = None;
        let mut cursor = 0;
        for e in &m.tensors {
            let numel: usize = e.shape.iter().product();
            if e.dtype != "float32" || e.offset != cursor || e.nbytes != numel * 4 || e.offset + e.nbytes > blob.len() {
                return Err(Error::Format(format!(
                    "checkpoint entry {} does not tile the blob",
                    e.name
                )));
            }
            let data = blob[e.offset..e.offset + e.nbytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            cursor += e.nbytes;
            let t = Tensor::new(&e.shape, data)?;
            let store = match e.owner {
                Owner::Gen => &mut gen,
                Owner::Disc => disc.get_or_insert_with(ParamStore::new),
            };
            match e.kind {
                Kind::Param => store.insert(e.name.clone(), t),
                Kind::Buffer => store.insert_buffer(e.name.clone(), t),
            }
        }
        if cursor != blob.len() {
            return Err(Error::Format(format!(
                "checkpoint blob has {} trailing bytes",
                blob.len() - cursor
            )));
        }
        Ok(Self {
            epoch: m.epoch,
            step: m.step,
            config: m.config,
            rng: m.rng,
            models: Models { gen, disc },
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (manifest, blob) = self.to_bytes()?;
        std::fs::write(dir.join(BLOB), blob)?;
        std::fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            std::fs::read(dir.join(name)).map_err(|e| Error::Load {
                path: dir.join(name),
                reason: e.to_string(),
            })
        };
        Self::from_bytes(&read(MANIFEST)?, &read(BLOB)?)
    }
}
