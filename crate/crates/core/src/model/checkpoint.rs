//! Directory layout: `manifest.json` plus `tensors.bin`, a little-endian blob
//! of the tensors listed in the manifest, back to back in manifest order.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelConfig, Params};
use crate::tensor::{AdamWConfig, OptimizerState, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {0} required by the config is missing")]
    MissingTensor(String),
    #[error("tensor {0} is not implied by the config")]
    UnexpectedTensor(String),
    #[error("tensor {name}: stored shape {found:?}, config implies {expected:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("blob integrity: {0}")]
    Integrity(String),
    #[error("manifest format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerRecord {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerRecord>,
    blob_bytes: u64,
    /// FNV-1a over the blob.
    checksum: String,
    tensors: Vec<TensorRecord>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const M_PREFIX: &str = "optimizer.first_moment/";
const V_PREFIX: &str = "optimizer.second_moment/";

/// Writes `ckpt` into directory `path`, creating it if needed. Tensors whose
/// values are all exactly representable in f32 are stored as f32, the rest as
/// f64, so loading is always bit-exact.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    let mut named: Vec<(String, &Tensor)> = ckpt.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (name, m) in ckpt.params.names().iter().zip(&opt.first_moment) {
            named.push((format!("{M_PREFIX}{name}"), m));
        }
        for (name, v) in ckpt.params.names().iter().zip(&opt.second_moment) {
            named.push((format!("{V_PREFIX}{name}"), v));
        }
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let exact32 = t.data().iter().all(|&x| (x as f32 as f64).to_bits() == x.to_bits());
        let dtype = if exact32 { DType::F32 } else { DType::F64 };
        tensors.push(TensorRecord {
            name,
            shape: t.shape().to_vec(),
            dtype,
            offset: blob.len() as u64,
        });
        for &x in t.data() {
            match dtype {
                DType::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => blob.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format_version: ckpt.format_version,
        config: ckpt.config.clone(),
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerRecord {
            config: o.config,
            step: o.step,
        }),
        blob_bytes: blob.len() as u64,
        checksum: format!("{:016x}", fnv1a(&blob)),
        tensors,
    };
    let blob_path = path.join(BLOB);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let manifest_path = path.join(MANIFEST);
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let manifest_path = path.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let version: serde_json::Value = serde_json::from_str(&text)?;
    let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(version)?;
    manifest.config.validate()?;

    // offsets must tile the blob exactly, in order
    let mut expected_offset = 0u64;
    for rec in &manifest.tensors {
        if rec.offset != expected_offset {
            return Err(CheckpointError::Format(format!(
                "tensor {} at byte {}, expected {expected_offset}",
                rec.name, rec.offset
            )));
        }
        let numel: usize = rec.shape.iter().product();
        expected_offset += (numel * rec.dtype.width()) as u64;
    }
    if expected_offset != manifest.blob_bytes {
        return Err(CheckpointError::Format(format!(
            "{} tensor records cover {expected_offset} bytes, manifest declares {}",
            manifest.tensors.len(),
            manifest.blob_bytes
        )));
    }

    let blob_path = path.join(BLOB);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CheckpointError::Integrity(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if format!("{:016x}", fnv1a(&blob)) != manifest.checksum {
        return Err(CheckpointError::Integrity("checksum mismatch".into()));
    }

    let decode = |rec: &TensorRecord| -> Tensor {
        let numel: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let bytes = &blob[start..start + numel * rec.dtype.width()];
        let data = match rec.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(&rec.shape, data).expect("record shape")
    };

    let expected = manifest.config.parameter_shapes();
    let mut seen = HashSet::new();
    for rec in &manifest.tensors {
        if !seen.insert(rec.name.as_str()) {
            return Err(CheckpointError::Format(format!("tensor {} listed twice", rec.name)));
        }
    }
    let find = |name: &str| manifest.tensors.iter().find(|r| r.name == name);
    let mut names = Vec::with_capacity(expected.len());
    let mut tensors = Vec::with_capacity(expected.len());
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, shape, _) in &expected {
        let rec = find(name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if &rec.shape != shape {
            return Err(CheckpointError::ShapeConflict {
                name: name.clone(),
                expected: shape.clone(),
                found: rec.shape.clone(),
            });
        }
        names.push(name.clone());
        tensors.push(decode(rec));
        if manifest.optimizer.is_some() {
            for (prefix, out) in [(M_PREFIX, &mut first), (V_PREFIX, &mut second)] {
                let full = format!("{prefix}{name}");
                let rec = find(&full).ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
                if &rec.shape != shape {
                    return Err(CheckpointError::ShapeConflict {
                        name: full,
                        expected: shape.clone(),
                        found: rec.shape.clone(),
                    });
                }
                out.push(decode(rec));
            }
        }
    }
    let allowed = expected.len() * if manifest.optimizer.is_some() { 3 } else { 1 };
    if manifest.tensors.len() != allowed {
        let known: HashSet<String> = expected
            .iter()
            .flat_map(|(n, _, _)| [n.clone(), format!("{M_PREFIX}{n}"), format!("{V_PREFIX}{n}")])
            .collect();
        let extra = manifest
            .tensors
            .iter()
            .find(|r| !known.contains(&r.name) || (manifest.optimizer.is_none() && r.name.starts_with("optimizer.")))
            .map(|r| r.name.clone())
            .unwrap_or_default();
        return Err(CheckpointError::UnexpectedTensor(extra));
    }

    Ok(Checkpoint {
        format_version: manifest.format_version,
        config: manifest.config,
        params: Params::new(names, tensors),
        optimizer: manifest.optimizer.map(|o| OptimizerState {
            config: o.config,
            first_moment: first,
            second_moment: second,
            step: o.step,
        }),
        step: manifest.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::AdamWConfig;

    fn sample() -> Checkpoint {
        let mut c = init_model(&ModelConfig::tiny(30, 16), 7).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), c.params.tensors());
        opt.first_moment[0].data_mut()[0] = 0.1; // not f32-representable
        opt.step = 3;
        c.optimizer = Some(opt);
        c.step = 3;
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&c, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.tensors().iter().zip(c.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Integrity(_))));
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let p = dir.join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        f(&mut v);
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn offsets_disagree_with_records() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| {
            v["tensors"].as_array_mut().unwrap().remove(3);
        });
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = init_model(&ModelConfig::tiny(30, 16), 1).unwrap();
        save_checkpoint(&c, dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["format_version"] = 9.into());
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));

        save_checkpoint(&c, dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["config"]["d_ff"] = 64.into());
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::ShapeConflict { .. })));

        save_checkpoint(&c, dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["config"]["num_layers"] = 3.into());
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::MissingTensor(_))));

        save_checkpoint(&c, dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["config"]["num_layers"] = 1.into());
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::UnexpectedTensor(_))));
    }
}
