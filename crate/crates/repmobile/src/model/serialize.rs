//! Model container format: a directory holding `manifest.json` (architecture
//! config, mode, tensor table) and `weights.bin` (little-endian 32-bit
//! floats, row-major, concatenated in manifest order). Round-trips are
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelGraph, ModelMode};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "repmobile-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into `weights.bin`.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    mode: ModelMode,
    mid_training: bool,
    tensors: Vec<TensorEntry>,
}

impl ModelGraph<f32> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        self.for_each_tensor(&mut |name, tensor| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                dtype: "f32".to_string(),
                offset: blob.len() as u64,
                len: tensor.numel() as u64,
            });
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        });
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            mode: self.mode,
            mid_training: self.mid_training,
            tensors: entries,
        };
        let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(&mut mf, &manifest)?;
        mf.write_all(b"\n")?;
        fs::File::create(dir.join(WEIGHTS_FILE))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_reader(fs::File::open(dir.join(MANIFEST_FILE)).map_err(|e| {
                Error::Input(format!("cannot open {}: {}", dir.join(MANIFEST_FILE).display(), e))
            })?)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut blob = Vec::new();
        fs::File::open(dir.join(WEIGHTS_FILE))
            .map_err(|e| {
                Error::Input(format!("cannot open {}: {}", dir.join(WEIGHTS_FILE).display(), e))
            })?
            .read_to_end(&mut blob)?;

        let mut model = ModelGraph::<f32>::architecture(manifest.config, manifest.mode)?;
        model.mid_training = manifest.mid_training;
        let mut table = std::collections::HashMap::new();
        for e in &manifest.tensors {
            table.insert(e.name.clone(), e);
        }
        let mut missing: Vec<String> = Vec::new();
        let mut err: Option<Error> = None;
        let mut used = 0usize;
        model.for_each_tensor_mut(&mut |name, tensor| {
            if err.is_some() {
                return;
            }
            let Some(entry) = table.get(name) else {
                missing.push(name.to_string());
                return;
            };
            used += 1;
            if entry.shape != tensor.shape() {
                err = Some(Error::Format(format!(
                    "tensor {} has shape {:?} in manifest, architecture expects {:?}",
                    name,
                    entry.shape,
                    tensor.shape()
                )));
                return;
            }
            let start = entry.offset as usize;
            let end = start + entry.len as usize * 4;
            if entry.dtype != "f32" || end > blob.len() {
                err = Some(Error::Format(format!("tensor {} has a bad blob range", name)));
                return;
            }
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                let o = start + i * 4;
                *v = f32::from_le_bytes(blob[o..o + 4].try_into().unwrap());
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!("container is missing tensors: {:?}", missing)));
        }
        if used != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "container has {} tensors, architecture uses {}",
                manifest.tensors.len(),
                used
            )));
        }
        Ok(model)
    }
}

/// Read just the tensor table (name -> shape) of a saved model.
pub fn read_tensor_table(dir: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let manifest: Manifest =
        serde_json::from_reader(fs::File::open(dir.join(MANIFEST_FILE))?)?;
    Ok(manifest
        .tensors
        .into_iter()
        .map(|e| (e.name, e.shape))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BranchShape};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = build_model::<f32>(16, &BranchShape::ALL, 42).unwrap();
        // perturb running stats so they are not all identity
        let x = crate::tensor::Tensor::<f32>::full(&[2, 1, 64, 25], 0.3);
        let _ = m.forward_train_collect(&x).unwrap();
        m.finalize_training();

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ModelGraph::<f32>::load(dir.path()).unwrap();
        assert_eq!(m, back);

        // saving again produces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        let a = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let b = std::fs::read(dir2.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(a, b);
        let ma = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(dir2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let m = build_model::<f32>(16, &BranchShape::ALL, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let blob = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        std::fs::write(dir.path().join(WEIGHTS_FILE), &blob[..blob.len() / 2]).unwrap();
        assert!(ModelGraph::<f32>::load(dir.path()).is_err());
    }
}
