//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `DMGCKPT1`, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian parameter payload.
//! The header records the format version, scalar dtype, the full model
//! config, the training epoch and validation loss at save time, free-form
//! extras (e.g. the split seed), and a blob directory with the name, shape,
//! offset, and byte length of every parameter.
//!
//! Loading validates the magic, version, dtype, config, and blob directory
//! against the architecture *before* decoding any payload bytes, so a
//! mismatched checkpoint fails fast with a named reason.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::{blob_layout, Model, ModelConfig, ParamStore};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"DMGCKPT1";
const VERSION: u32 = 1;

/// Training context stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    /// Free-form provenance (split seed, run id, …).
    pub extras: BTreeMap<String, String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    epoch: usize,
    val_loss: f64,
    extras: BTreeMap<String, String>,
    blobs: Vec<BlobEntry>,
}

fn dtype_of<S: Scalar>() -> &'static str {
    match std::mem::size_of::<S>() {
        4 => "f32",
        8 => "f64",
        other => unreachable!("unsupported scalar width {other}"),
    }
}

fn scalar_bytes<S: Scalar>() -> u64 {
    std::mem::size_of::<S>() as u64
}

/// Serializes the model and metadata to `path`.
pub fn save<S: Scalar>(path: &Path, model: &Model<S>, meta: &CheckpointMeta) -> Result<()> {
    let width = scalar_bytes::<S>();
    let mut blobs = Vec::new();
    let mut payload = Vec::new();
    for (name, value) in model.params.iter() {
        let offset = payload.len() as u64;
        for &v in value.iter() {
            let x = v.into_f64();
            if width == 4 {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        blobs.push(BlobEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
            len_bytes: value.len() as u64 * width,
        });
    }

    let header = Header {
        version: VERSION,
        dtype: dtype_of::<S>().to_string(),
        config: model.config().clone(),
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        extras: meta.extras.clone(),
        blobs,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;

    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Deserializes a model and its metadata from `path`.
pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let header_len =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 8;
    let payload_start = header_start + header_len;
    if payload_start > bytes.len() {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;

    if header.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {} (expected {VERSION})", header.version),
        ));
    }
    if header.dtype != dtype_of::<S>() {
        return Err(Error::Config(format!(
            "checkpoint stores {} parameters, requested {}",
            header.dtype,
            dtype_of::<S>()
        )));
    }
    header.config.validate()?;

    // Validate the directory against the architecture before reading any
    // payload bytes.
    let layout = blob_layout(&header.config);
    if header.blobs.len() != layout.len() {
        return Err(Error::Config(format!(
            "checkpoint lists {} blobs, architecture defines {}",
            header.blobs.len(),
            layout.len()
        )));
    }
    let width = scalar_bytes::<S>();
    let by_name: BTreeMap<&str, &BlobEntry> =
        header.blobs.iter().map(|b| (b.name.as_str(), b)).collect();
    for (name, shape) in &layout {
        let entry = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Config(format!("checkpoint is missing parameter blob {name}"))
        })?;
        let expected_len = shape.iter().product::<usize>() as u64 * width;
        if &entry.shape != shape || entry.len_bytes != expected_len {
            return Err(Error::Config(format!(
                "blob {name} has shape {:?} ({} bytes), architecture expects {:?} ({} bytes)",
                entry.shape, entry.len_bytes, shape, expected_len
            )));
        }
        let end = payload_start as u64 + entry.offset + entry.len_bytes;
        if end > bytes.len() as u64 {
            return Err(Error::format(path, format!("blob {name} extends past end of file")));
        }
    }

    let mut blobs = BTreeMap::new();
    for entry in &header.blobs {
        let start = payload_start + entry.offset as usize;
        let raw = &bytes[start..start + entry.len_bytes as usize];
        let values: Vec<S> = raw
            .chunks_exact(width as usize)
            .map(|chunk| {
                if width == 4 {
                    S::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
                } else {
                    S::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()))
                }
            })
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::format(path, format!("blob {}: {e}", entry.name)))?;
        blobs.insert(entry.name.clone(), arr);
    }

    let params = ParamStore::from_blobs(&header.config, blobs)?;
    let model = Model::from_parts(header.config, params)?;
    let meta = CheckpointMeta {
        epoch: header.epoch,
        val_loss: header.val_loss,
        extras: header.extras,
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Phase, Session};
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> ModelConfig {
        ModelConfig {
            input_side: 16,
            stage_channels: vec![4, 8],
            diff_block_levels: 1,
            attn_layers_per_diff_block: 1,
            attn_heads: 1,
            attn_ff_expansion: 2,
            stem_channels: 2,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            epoch: 17,
            val_loss: 0.4375,
            extras: [("split_seed".to_string(), "3".to_string())].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_preserves_every_parameter_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &meta()).unwrap();

        let (loaded, loaded_meta) = load::<f32>(&path).unwrap();
        assert_eq!(loaded_meta, meta());
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.count_parameters(), model.count_parameters());
        for (name, value) in model.params.iter() {
            assert_eq!(loaded.params.get(name), value, "blob {name} changed");
        }
    }

    #[test]
    fn reloaded_model_reproduces_forward_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();
        let (loaded, _) = load::<f32>(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pre = ArrayD::from_shape_simple_fn(
            IxDyn(&[1, 3, 16, 16]),
            || rng.gen_range(-1.0..1.0f32),
        );
        let post = ArrayD::from_shape_simple_fn(
            IxDyn(&[1, 3, 16, 16]),
            || rng.gen_range(-1.0..1.0f32),
        );

        let mut a = Session::new(&model, Phase::Eval, false);
        let pa = a.forward(pre.clone(), post.clone()).unwrap();
        let mut b = Session::new(&loaded, Phase::Eval, false);
        let pb = b.forward(pre, post).unwrap();
        assert_eq!(a.tape.value(pa.logits), b.tape.value(pb.logits));
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m64.ckpt");
        let model = Model::<f64>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();
        let (loaded, _) = load::<f64>(&path).unwrap();
        for (name, value) in model.params.iter() {
            assert_eq!(loaded.params.get(name), value, "blob {name} changed");
        }
    }

    #[test]
    fn dtype_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("f32") && err.to_string().contains("f64"));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut tampered = bytes.clone();
        tampered[0] = b'X';
        std::fs::write(&bad_magic, &tampered).unwrap();
        assert!(matches!(load::<f32>(&bad_magic).unwrap_err(), Error::Format { .. }));

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load::<f32>(&truncated).unwrap_err(), Error::Format { .. }));
    }

    /// Overwrites the first occurrence of `from` with the same-length `to`,
    /// leaving every other byte (including the binary payload) untouched.
    fn patch_bytes(bytes: &mut [u8], from: &[u8], to: &[u8]) {
        assert_eq!(from.len(), to.len());
        let pos = bytes
            .windows(from.len())
            .position(|w| w == from)
            .expect("pattern present in header");
        bytes[pos..pos + to.len()].copy_from_slice(to);
    }

    #[test]
    fn tampered_config_fails_before_payload_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();

        // Flip input_side 16 → 61 in the ASCII header; same byte length, so
        // the directory still parses but the config is invalid.
        let mut bytes = std::fs::read(&path).unwrap();
        patch_bytes(&mut bytes, b"\"input_side\":16,", b"\"input_side\":61,");
        let tampered_path = dir.path().join("tampered.ckpt");
        std::fs::write(&tampered_path, &bytes).unwrap();
        let err = load::<f32>(&tampered_path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(test_config()).unwrap();
        save(&path, &model, &CheckpointMeta::default()).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        patch_bytes(&mut bytes, b"\"version\":1,", b"\"version\":9,");
        let tampered_path = dir.path().join("v9.ckpt");
        std::fs::write(&tampered_path, &bytes).unwrap();
        let err = load::<f32>(&tampered_path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
