use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RAFL";
pub const VERSION: u32 = 1;

const OPT_M_PREFIX: &str = "optim.m.";
const OPT_V_PREFIX: &str = "optim.v.";

/// Layout: magic, u32 version, u64 manifest length, JSON manifest, raw
/// little-endian f64 payloads, u32 CRC32 of the payload region. The manifest
/// is human-inspectable; the payload is bit-exact.
#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    /// Named generator states (`data`, `dropout`) for bitwise resume.
    rng: BTreeMap<String, String>,
    train: Option<TrainMeta>,
    arrays: Vec<ArrayEntry>,
}

/// Training-loop state that is not a tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub opt_step: u64,
    pub divergence_run: u32,
    pub diverged_at: Option<u64>,
    /// f64 bit pattern as decimal text; survives NaN and round-trips exactly.
    pub initial_loss_bits: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the payload region
    offset: u64,
    /// element count
    len: u64,
}

/// In-memory checkpoint contents. Optimizer moments ride along as extra
/// arrays under `optim.m.` / `optim.v.` prefixes when present.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParameterStore,
    pub rng: BTreeMap<String, String>,
    pub train: Option<TrainMeta>,
    pub moments: Option<(ParameterStore, ParameterStore)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names: Vec<(String, &Tensor)> = Vec::new();
        for (p, t) in self.params.iter() {
            names.push((p.clone(), t));
        }
        if let Some((m, v)) = &self.moments {
            for (p, t) in m.iter() {
                names.push((format!("{OPT_M_PREFIX}{p}"), t));
            }
            for (p, t) in v.iter() {
                names.push((format!("{OPT_V_PREFIX}{p}"), t));
            }
        }
        let mut arrays = Vec::with_capacity(names.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &names {
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: t.numel() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            train: self.train.clone(),
            arrays,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| Error::CkptManifest(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        fs::write(path, out).map_err(Error::io(path))
    }

    /// Check that the stored parameter arrays exactly match what `cfg`
    /// expects, reporting the first offending path in canonical order.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        for (path, shape) in param_shapes(cfg) {
            match self.params.get(&path) {
                None => {
                    return Err(Error::CkptShape { path, found: vec![], expected: shape });
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CkptShape {
                        path,
                        found: t.shape().to_vec(),
                        expected: shape,
                    });
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Minimal save: parameters, config, and step only.
pub fn save_checkpoint(store: &ParameterStore, config: &ModelConfig, step: u64, path: &Path) -> Result<()> {
    Checkpoint {
        config: config.clone(),
        step,
        params: store.clone(),
        rng: BTreeMap::new(),
        train: None,
        moments: None,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 16 {
        return Err(Error::CkptTruncated("missing header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::CkptMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("sized slice"));
    if version != VERSION {
        return Err(Error::CkptVersion { found: version, expected: VERSION });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("sized slice")) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&e| e + 4 <= bytes.len())
        .ok_or_else(|| Error::CkptTruncated("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| Error::CkptManifest(e.to_string()))?;
    let payload = &bytes[manifest_end..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("sized slice"));
    let computed = crc32fast::hash(payload);
    if stored_crc != computed {
        return Err(Error::CkptChecksum { stored: stored_crc, computed });
    }
    let mut params = ParameterStore::new();
    let mut m = ParameterStore::new();
    let mut v = ParameterStore::new();
    for entry in &manifest.arrays {
        let start = entry.offset as usize;
        let nbytes = (entry.len as usize) * 8;
        if start + nbytes > payload.len() {
            return Err(Error::CkptTruncated(format!("array {} extends past payload", entry.name)));
        }
        let data: Vec<f64> = payload[start..start + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("sized chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|_| {
            Error::CkptManifest(format!(
                "array {}: shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            ))
        })?;
        if let Some(rest) = entry.name.strip_prefix(OPT_M_PREFIX) {
            m.insert(rest.to_string(), t)?;
        } else if let Some(rest) = entry.name.strip_prefix(OPT_V_PREFIX) {
            v.insert(rest.to_string(), t)?;
        } else {
            params.insert(entry.name.clone(), t)?;
        }
    }
    let moments = if m.is_empty() && v.is_empty() { None } else { Some((m, v)) };
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
        rng: manifest.rng,
        train: manifest.train,
        moments,
    })
}
