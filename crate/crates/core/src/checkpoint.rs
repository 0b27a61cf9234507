//! Model checkpoint files.
//!
//! Layout: magic `MTDCKPT1`, `u32` format version, length-prefixed
//! `key = value` metadata, then one record per tensor in name order:
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` values.
//! Everything little-endian.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{ModelConfig, SyncModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTDCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    /// Epoch after which the parameters were captured (0-based).
    pub epoch: usize,
    pub val_f1: f64,
    /// Digest of the batch sampler state at capture time.
    pub rng_digest: String,
    /// Free-form provenance (method, corpus digest, ...).
    pub extra: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn model_config_pairs(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.d_model", c.d_model.to_string()),
        ("model.n_heads", c.n_heads.to_string()),
        ("model.layers_per_block", c.layers_per_block.to_string()),
        ("model.ffn_mult", c.ffn_mult.to_string()),
        ("model.d_visual_in", c.d_visual_in.to_string()),
        ("model.d_audio_in", c.d_audio_in.to_string()),
        ("model.audio_rate", c.audio_rate.to_string()),
        ("model.seed", c.seed.to_string()),
    ]
}

fn model_config_from(m: &kv::Map) -> Result<ModelConfig> {
    Ok(ModelConfig {
        d_model: m.get("model.d_model")?,
        n_heads: m.get("model.n_heads")?,
        layers_per_block: m.get("model.layers_per_block")?,
        ffn_mult: m.get("model.ffn_mult")?,
        d_visual_in: m.get("model.d_visual_in")?,
        d_audio_in: m.get("model.d_audio_in")?,
        audio_rate: m.get("model.audio_rate")?,
        seed: m.get("model.seed")?,
    })
}

const RESERVED: [&str; 5] = ["format.version", "train.epoch", "train.val_f1", "train.rng_digest", "tensors"];

pub fn checkpoint_bytes(model: &SyncModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut pairs: Vec<(String, String)> = vec![("format.version".into(), CHECKPOINT_VERSION.to_string())];
    pairs.extend(model_config_pairs(model.config()).into_iter().map(|(k, v)| (k.to_string(), v)));
    pairs.push(("train.epoch".into(), meta.epoch.to_string()));
    pairs.push(("train.val_f1".into(), format!("{:?}", meta.val_f1)));
    pairs.push(("train.rng_digest".into(), meta.rng_digest.clone()));
    pairs.push(("tensors".into(), model.params().len().to_string()));
    for (k, v) in &meta.extra {
        if RESERVED.contains(&k.as_str()) || k.starts_with("model.") {
            return Err(Error::Usage(format!("checkpoint metadata key `{k}` is reserved")));
        }
        if v.contains('\n') || v.contains('#') {
            return Err(Error::Usage(format!("checkpoint metadata value for `{k}` must be a single plain line")));
        }
        pairs.push((k.clone(), v.clone()));
    }
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.prefixed(kv::render(pairs.iter().map(|(k, v)| (k.as_str(), v.clone()))).as_bytes());
    // Parameter names are kept sorted by the model itself.
    for (name, t) in model.names().iter().zip(model.params()) {
        w.prefixed(name.as_bytes());
        w.array(t);
    }
    Ok(w.finish())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(SyncModel, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    binio::check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let version = r.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let meta_at = r.offset();
    let to_format = |e: Error| Error::Format {
        offset: meta_at,
        detail: e.to_string(),
    };
    let text = r.utf8("metadata")?;
    let entries = kv::parse(text).map_err(to_format)?;
    let map = kv::Map::parse(text).map_err(to_format)?;
    let config = model_config_from(&map).map_err(to_format)?;
    let mut model = SyncModel::init(&config).map_err(to_format)?;
    let n: usize = map.get("tensors").map_err(to_format)?;
    if n != model.params().len() {
        return Err(Error::Format {
            offset: meta_at,
            detail: format!("{n} tensors listed, configuration implies {}", model.params().len()),
        });
    }
    let meta = CheckpointMeta {
        epoch: map.get("train.epoch").map_err(to_format)?,
        val_f1: map.get("train.val_f1").map_err(to_format)?,
        rng_digest: map.get_str("train.rng_digest").map_err(to_format)?.to_string(),
        extra: entries
            .into_iter()
            .filter(|e| !RESERVED.contains(&e.key.as_str()) && !e.key.starts_with("model."))
            .map(|e| (e.key, e.value))
            .collect(),
    };
    for i in 0..n {
        let at = r.offset();
        let name = r.utf8("tensor name")?;
        if name != model.names()[i] {
            return Err(Error::Format {
                offset: at,
                detail: format!("expected tensor `{}`, found `{name}`", model.names()[i]),
            });
        }
        let t = r.array(name)?;
        let slot = &mut model.params_mut()[i];
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                offset: at,
                detail: format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
            });
        }
        slot.values_mut().copy_from_slice(t.values());
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &SyncModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SyncModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint that must match `expected` in every shape-determining
/// field. A mismatch is reported as a shape error instead of a reinterpretation.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(SyncModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    let dims = |c: &ModelConfig| {
        vec![
            c.d_model,
            c.n_heads,
            c.layers_per_block,
            c.ffn_mult,
            c.d_visual_in,
            c.d_audio_in,
            c.audio_rate,
        ]
    };
    let (got, want) = (dims(model.config()), dims(expected));
    if got != want {
        return Err(Error::Shape {
            op: "load_checkpoint",
            lhs: got,
            rhs: want,
        });
    }
    Ok((model, meta))
}

/// Hex SHA-256 over parameter names and their `f64` bit patterns.
pub fn parameter_digest(model: &SyncModel) -> String {
    let mut bytes = Vec::new();
    for (name, t) in model.names().iter().zip(model.params()) {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        for v in t.values() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    binio::digest(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            layers_per_block: 1,
            ..ModelConfig::student()
        }
    }

    #[test]
    fn round_trip_keeps_meta() {
        let m = SyncModel::init(&tiny()).unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            val_f1: 0.75,
            rng_digest: "ab".into(),
            extra: vec![("distill.method".into(), "mtd".into())],
        };
        let bytes = checkpoint_bytes(&m, &meta).unwrap();
        let (back, meta2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.config(), m.config());
        assert_eq!(checkpoint_bytes(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn reserved_keys_are_refused() {
        let m = SyncModel::init(&tiny()).unwrap();
        let meta = CheckpointMeta {
            extra: vec![("tensors".into(), "1".into())],
            ..CheckpointMeta::default()
        };
        assert!(matches!(checkpoint_bytes(&m, &meta), Err(Error::Usage(_))));
    }
}
