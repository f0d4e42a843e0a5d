//! Versioned checkpoints: `manifest.json` plus a little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{load_tensors, Decoder, Encoder, ModelConfig, Parameters, KERNEL, LEAKY_SLOPE, PADDING, STRIDE};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Stage1,
    Stage2,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: String,
    pub output: String,
}

impl Architecture {
    pub fn current() -> Self {
        Self {
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            activation: format!("leaky_relu({LEAKY_SLOPE})"),
            output: "sigmoid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub architecture: Architecture,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form provenance, e.g. the hashes of the checkpoints combined.
    #[serde(default)]
    pub provenance: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub params_file: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub encoder: Option<Encoder>,
    pub decoder: Option<Decoder>,
}

pub struct CheckpointMeta<'a> {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub seed: u64,
    pub provenance: &'a [String],
}

/// Writes `dir/manifest.json` and `dir/params.bin`; `dir` is created.
pub fn save_checkpoint(
    dir: &Path,
    meta: CheckpointMeta<'_>,
    encoder: Option<&Encoder>,
    decoder: Option<&Decoder>,
) -> Result<CheckpointManifest> {
    let config = match (encoder, decoder) {
        (Some(e), Some(d)) if e.config().latent_dim != d.config().latent_dim => {
            return Err(Error::CheckpointMismatch(format!(
                "encoder latent dim {} != decoder latent dim {}",
                e.config().latent_dim,
                d.config().latent_dim
            )))
        }
        (Some(e), _) => e.config().clone(),
        (None, Some(d)) => d.config().clone(),
        (None, None) => return Err(crate::error::invalid("checkpoint needs an encoder or a decoder")),
    };
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut push = |prefix: &str, named: Vec<(String, &[f32])>| {
        for (name, t) in named {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                offset: bytes.len() / 4,
                len: t.len(),
            });
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    if let Some(e) = encoder {
        push("encoder", e.named_tensors());
    }
    if let Some(d) = decoder {
        push("decoder", d.named_tensors());
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: meta.kind,
        config,
        architecture: Architecture::current(),
        epoch: meta.epoch,
        seed: meta.seed,
        provenance: meta.provenance.to_vec(),
        tensors,
        params_file: PARAMS_FILE.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = dir.join(PARAMS_FILE);
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads a checkpoint, rejecting unknown versions, checksum failures and,
/// when `expected` is given, a differing model config.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "{}: format version {} (supported: {CHECKPOINT_FORMAT_VERSION})",
            mpath.display(),
            manifest.format_version
        )));
    }
    if manifest.architecture != Architecture::current() {
        return Err(Error::CheckpointMismatch(format!(
            "{}: architecture {:?} differs from this build",
            mpath.display(),
            manifest.architecture
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != manifest.config {
            return Err(Error::CheckpointMismatch(format!(
                "{}: model config {:?} differs from expected {:?}",
                mpath.display(),
                manifest.config,
                cfg
            )));
        }
    }
    let blob = dir.join(&manifest.params_file);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(Error::CorruptFile {
            path: blob,
            reason: "checksum mismatch".into(),
        });
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptFile {
            path: blob,
            reason: "length is not a multiple of 4".into(),
        });
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let fill = |prefix: &str, target: &mut dyn Parameters| -> Result<bool> {
        let want: Vec<String> = target.named_tensors().into_iter().map(|(n, _)| format!("{prefix}.{n}")).collect();
        let entries: Vec<&TensorEntry> = manifest.tensors.iter().filter(|t| t.name.starts_with(&format!("{prefix}."))).collect();
        if entries.is_empty() {
            return Ok(false);
        }
        let names: Vec<&str> = entries.iter().map(|t| t.name.as_str()).collect();
        if names != want.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::CheckpointMismatch(format!("{prefix} tensor layout differs from the model")));
        }
        let mut values = Vec::with_capacity(entries.len());
        for t in entries {
            let slice = floats.get(t.offset..t.offset + t.len).ok_or_else(|| Error::CorruptFile {
                path: dir.join(&manifest.params_file),
                reason: format!("tensor {} lies outside the blob", t.name),
            })?;
            values.push(slice.to_vec());
        }
        load_tensors(target, &values).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(true)
    };

    let mut encoder = Encoder::new(&manifest.config)?;
    let mut decoder = Decoder::new(&manifest.config)?;
    let has_encoder = fill("encoder", &mut encoder)?;
    let has_decoder = fill("decoder", &mut decoder)?;
    Ok(Checkpoint {
        encoder: has_encoder.then_some(encoder),
        decoder: has_decoder.then_some(decoder),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_shape: [16, 16, 16],
            latent_dim: 4,
            num_layers: 2,
            base_channels: 2,
            seed: 1,
        }
    }

    fn meta() -> CheckpointMeta<'static> {
        CheckpointMeta {
            kind: CheckpointKind::Stage1,
            epoch: 3,
            seed: 1,
            provenance: &[],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::new(&cfg()).unwrap();
        enc.tensors_mut()[0][0] = 0.123;
        let dec = Decoder::new(&cfg()).unwrap();
        save_checkpoint(dir.path(), meta(), Some(&enc), Some(&dec)).unwrap();
        let ck = load_checkpoint(dir.path(), Some(&cfg())).unwrap();
        assert_eq!(ck.encoder.unwrap(), enc);
        assert_eq!(ck.decoder.unwrap(), dec);
        assert_eq!(ck.manifest.epoch, 3);
    }

    #[test]
    fn rejects_mismatch_and_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let dec = Decoder::new(&cfg()).unwrap();
        save_checkpoint(dir.path(), meta(), None, Some(&dec)).unwrap();
        let ck = load_checkpoint(dir.path(), None).unwrap();
        assert!(ck.encoder.is_none());

        let mut other = cfg();
        other.latent_dim = 5;
        assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::CheckpointMismatch(_))));

        let mpath = dir.path().join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::CheckpointMismatch(_))));
        fs::write(&mpath, text).unwrap();

        let blob = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::CorruptFile { .. })));
    }
}
