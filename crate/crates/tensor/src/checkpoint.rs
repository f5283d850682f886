//! Named-parameter checkpoints: a JSON manifest plus a flat little-endian
//! blob holding every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
}

pub type Named<F> = Vec<(String, Tensor<F>)>;

pub fn encode<F: Scalar>(params: &[(String, Tensor<F>)]) -> (Manifest, Vec<u8>) {
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut blob = Vec::with_capacity(total * F::BYTES);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        t.data().iter().for_each(|&x| x.put_le(&mut blob));
    }
    (
        Manifest {
            dtype: F::DTYPE.to_string(),
            params: entries,
        },
        blob,
    )
}

fn decode_as<S: Scalar, F: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<Named<F>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * S::BYTES;
        if end > blob.len() {
            return Err(TensorError::Manifest(format!(
                "blob too short for {} (need {end} bytes, have {})",
                entry.name,
                blob.len()
            )));
        }
        let data = blob[offset..end]
            .chunks_exact(S::BYTES)
            .map(|b| F::of(S::get_le(b).as_f64()))
            .collect();
        let t = if entry.shape.is_empty() {
            Tensor::scalar(F::of(S::get_le(&blob[offset..end]).as_f64()))
        } else {
            Tensor::new(entry.shape.clone(), data)?
        };
        out.push((entry.name.clone(), t));
        offset = end;
    }
    if offset != blob.len() {
        return Err(TensorError::Manifest(format!(
            "blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    Ok(out)
}

/// Decodes into `F`, converting if the stored dtype differs.
pub fn decode<F: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<Named<F>> {
    match manifest.dtype.as_str() {
        "f32" => decode_as::<f32, F>(manifest, blob),
        "f64" => decode_as::<f64, F>(manifest, blob),
        other => Err(TensorError::Manifest(format!("unknown dtype {other}"))),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_checkpoint<F: Scalar>(manifest_path: &Path, blob_path: &Path, params: &[(String, Tensor<F>)]) -> Result<()> {
    let (manifest, blob) = encode(params);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TensorError::Manifest(e.to_string()))?;
    fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
    fs::write(blob_path, blob).map_err(io_err(blob_path))?;
    Ok(())
}

pub fn read_checkpoint<F: Scalar>(manifest_path: &Path, blob_path: &Path) -> Result<Named<F>> {
    let json = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| TensorError::Manifest(e.to_string()))?;
    let blob = fs::read(blob_path).map_err(io_err(blob_path))?;
    decode(&manifest, &blob)
}
