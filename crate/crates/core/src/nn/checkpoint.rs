//! On-disk layer stacks: a JSON manifest plus a flat little-endian `f64` blob.
//!
//! The manifest lists every layer with its kind and hyper-parameters, and for
//! each parameter tensor its name, shape and byte offset into the blob.
//! Tensors are stored back to back in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConvTranspose2d, Conv2d, Dense, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "cae-cluster-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub layers: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestEntry {
    Conv2d {
        stride: usize,
        padding: usize,
        tensors: Vec<TensorEntry>,
    },
    ConvTranspose2d {
        stride: usize,
        padding: usize,
        output_padding: usize,
        tensors: Vec<TensorEntry>,
    },
    Dense {
        tensors: Vec<TensorEntry>,
    },
    Relu,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn blob_path(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

/// Writes `layers` to `manifest_path` (JSON) and a sibling `.bin` blob.
pub fn save_layers(manifest_path: &Path, layers: &[Layer], metadata: serde_json::Value) -> Result<Manifest> {
    let mut blob = Vec::new();
    let push = |name: &str, t: &Tensor, blob: &mut Vec<u8>| {
        let entry = TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        };
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entry
    };
    let mut entries = Vec::with_capacity(layers.len());
    for layer in layers {
        let entry = match layer {
            Layer::Conv2d(l) => ManifestEntry::Conv2d {
                stride: l.stride(),
                padding: l.padding(),
                tensors: vec![push("weight", l.weight(), &mut blob), push("bias", l.bias(), &mut blob)],
            },
            Layer::ConvTranspose2d(l) => ManifestEntry::ConvTranspose2d {
                stride: l.stride(),
                padding: l.padding(),
                output_padding: l.output_padding(),
                tensors: vec![push("weight", l.weight(), &mut blob), push("bias", l.bias(), &mut blob)],
            },
            Layer::Dense(l) => ManifestEntry::Dense {
                tensors: vec![push("weight", l.weight(), &mut blob), push("bias", l.bias(), &mut blob)],
            },
            Layer::Relu(_) => ManifestEntry::Relu,
            Layer::Flatten(_) => ManifestEntry::Flatten,
            Layer::Reshape(l) => ManifestEntry::Reshape {
                shape: l.target().to_vec(),
            },
        };
        entries.push(entry);
    }
    let blob_name = format!(
        "{}.bin",
        manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
    );
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        blob: blob_name,
        blob_bytes: blob.len() as u64,
        layers: entries,
        metadata,
    };
    let bin = blob_path(manifest_path, &manifest.blob);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

/// Reads a layer stack written by [`save_layers`].
pub fn load_layers(manifest_path: &Path) -> Result<(Vec<Layer>, Manifest)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bad = |offset: u64, reason: String| Error::Format {
        path: manifest_path.to_path_buf(),
        offset,
        reason,
    };
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(bad(0, format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let bin = blob_path(manifest_path, &manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Format {
            path: bin,
            offset: blob.len() as u64,
            reason: format!("expected {} bytes", manifest.blob_bytes),
        });
    }
    let read = |entries: &[TensorEntry]| -> Result<(Tensor, Tensor)> {
        let mut out = Vec::new();
        for e in entries {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 8;
            if end > blob.len() {
                return Err(bad(e.offset, format!("tensor {} runs past the blob", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            out.push(Tensor::new(e.shape.clone(), data)?);
        }
        let mut it = out.into_iter();
        match (it.next(), it.next(), it.next()) {
            (Some(w), Some(b), None) => Ok((w, b)),
            _ => Err(bad(0, "expected exactly a weight and a bias".into())),
        }
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let layer = match entry {
            ManifestEntry::Conv2d { stride, padding, tensors } => {
                let (w, b) = read(tensors)?;
                Layer::Conv2d(Conv2d::from_parts(w, b, *stride, *padding)?)
            }
            ManifestEntry::ConvTranspose2d {
                stride,
                padding,
                output_padding,
                tensors,
            } => {
                let (w, b) = read(tensors)?;
                Layer::ConvTranspose2d(ConvTranspose2d::from_parts(w, b, *stride, *padding, *output_padding)?)
            }
            ManifestEntry::Dense { tensors } => {
                let (w, b) = read(tensors)?;
                Layer::Dense(Dense::from_parts(w, b)?)
            }
            ManifestEntry::Relu => Layer::relu(),
            ManifestEntry::Flatten => Layer::flatten(),
            ManifestEntry::Reshape { shape } => Layer::reshape(shape.clone()),
        };
        layers.push(layer);
    }
    Ok((layers, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers = vec![
            Layer::Conv2d(Conv2d::new(1, 3, 3, 2, 1, &mut rng)),
            Layer::relu(),
            Layer::flatten(),
            Layer::Dense(Dense::new(12, 4, &mut rng)),
            Layer::Dense(Dense::new(4, 12, &mut rng)),
            Layer::reshape(vec![3, 2, 2]),
            Layer::ConvTranspose2d(ConvTranspose2d::new(3, 1, 3, 2, 1, 1, &mut rng)),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_layers(&path, &layers, serde_json::json!({"note": "x"})).unwrap();
        let (loaded, manifest) = load_layers(&path).unwrap();
        assert_eq!(manifest.metadata["note"], "x");
        assert_eq!(loaded.len(), layers.len());
        for (a, b) in layers.iter().zip(&loaded) {
            assert_eq!(a.kind(), b.kind());
            for (pa, pb) in a.params().iter().zip(b.params()) {
                assert_eq!(*pa, pb);
            }
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_layers(&path, &[Layer::Dense(Dense::new(2, 2, &mut rng))], serde_json::Value::Null).unwrap();
        let bin = dir.path().join("d.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_layers(&path), Err(Error::Format { .. })));
    }
}
