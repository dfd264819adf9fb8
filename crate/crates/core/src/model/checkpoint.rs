use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, verify_blob, write_container, BlobInfo, BlobReader, BlobWriter, Segment, CHECKSUM_ALGORITHM};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::real::Real;

use super::{init_model, ToyConfig, ToyModel};

pub const MODEL_FORMAT: &str = "toymodel/1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    checksum: String,
    config: ToyConfig,
    blob: BlobInfo,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Segment,
}

pub fn save_model<T: Real>(model: &ToyModel<T>, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let tensors: Vec<TensorEntry> = model
        .tensors()
        .into_iter()
        .map(|(name, rows, cols, values)| TensorEntry {
            name,
            rows,
            cols,
            data: blob.push(&[values]),
        })
        .collect();
    write_container(
        path,
        |info| ModelManifest {
            format: MODEL_FORMAT.into(),
            checksum: CHECKSUM_ALGORITHM.into(),
            config: model.cfg.clone(),
            blob: info,
            tensors,
        },
        blob.into_bytes(),
    )
}

/// Loads a checkpoint; tensor names and shapes must match the stored config.
pub fn load_model<T: Real>(path: &Path) -> Result<ToyModel<T>> {
    let (manifest, info, bytes): (ModelManifest, _, _) = read_container(path, MODEL_FORMAT)?;
    manifest.config.validate()?;
    // A freshly initialized model gives the expected layout; its values are overwritten.
    let mut model = init_model::<T>(&manifest.config)?;
    let expected: Vec<(String, usize, usize)> = model
        .tensors()
        .into_iter()
        .map(|(n, r, c, _)| (n, r, c))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let reader = BlobReader::new(&bytes);
    let mut values = Vec::with_capacity(expected.len());
    for ((name, rows, cols), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(Error::Format(format!(
                "tensor `{}` ({}×{}) found where `{name}` ({rows}×{cols}) was expected",
                entry.name, entry.rows, entry.cols
            )));
        }
        values.push(reader.read::<T>(&entry.data, &entry.name)?);
    }
    verify_blob(&info, &bytes)?;

    let mut it = values.into_iter();
    let mut next = |rows: usize, cols: usize| -> Result<DenseMatrix<T>> {
        DenseMatrix::new(rows, cols, it.next().expect("tensor count checked"))
    };
    let (vocab, d, m) = (model.cfg.vocab_size, model.cfg.d_model, model.cfg.mlp_dim());
    model.embed = next(vocab, d)?;
    for layer in model.layers.iter_mut() {
        layer.attn_norm = next(1, d)?.into_vec();
        layer.qkv = next(3 * d, d)?;
        layer.out = next(d, d)?;
        layer.mlp_norm = next(1, d)?.into_vec();
        layer.up = next(m, d)?;
        layer.down = next(d, m)?;
    }
    model.final_norm = next(1, d)?.into_vec();
    Ok(model)
}
