//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (mode, vocabulary,
//! dimensions and a tensor table) and `weights.bin`, the tensors as
//! little-endian `f64`, row-major, concatenated in manifest order. Writes go
//! to a sibling temporary directory that is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::error::{IsanError, Result};
use crate::model::{tensor_specs, Mode, ModelParams};
use crate::vocab::Vocab;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "isan-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

/// Change of basis a checkpoint was transformed with, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub rows: usize,
    pub cols: usize,
    pub augmented: bool,
    pub data: Vec<f64>,
}

impl BasisRecord {
    pub fn from_matrix(m: &DMatrix<f64>, augmented: bool) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            augmented,
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(IsanError::Checkpoint {
                tensor: "basis".into(),
                reason: format!("expected {} values, found {}", self.rows * self.cols, self.data.len()),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub vocab: Vec<String>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisRecord>,
}

/// Write `params` (and optionally the basis it lives in) to `dir`.
pub fn save(params: &ModelParams, dir: &Path, basis: Option<&BasisRecord>) -> Result<()> {
    params.validate()?;
    let mut tensors = Vec::new();
    let mut bytes: Vec<u8> = Vec::with_capacity(params.num_parameters() * 8);
    for (spec, data) in params.tensor_specs().iter().zip(params.tensors()) {
        let shape = if spec.vector {
            vec![spec.rows]
        } else {
            vec![spec.rows, spec.cols]
        };
        tensors.push(TensorEntry {
            name: spec.name.clone(),
            shape,
            dtype: "f64".into(),
            offset: bytes.len() as u64,
        });
        // column-major storage -> row-major file order
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                bytes.extend_from_slice(&data[c * spec.rows + r].to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        mode: params.mode,
        vocab: params.vocab.symbols().iter().map(|c| c.to_string()).collect(),
        hidden_dim: params.hidden_dim(),
        output_dim: params.output_dim(),
        tensors,
        basis: basis.cloned(),
    };

    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| IsanError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| IsanError::io(&tmp, e))?;
    let manifest_path = tmp.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| IsanError::io(&manifest_path, e))?;
    let weights_path = tmp.join(WEIGHTS);
    fs::write(&weights_path, &bytes).map_err(|e| IsanError::io(&weights_path, e))?;

    let old = sibling(dir, "old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| IsanError::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| IsanError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| IsanError::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| IsanError::io(&old, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Loaded parameters plus the recorded basis, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub basis: Option<BasisRecord>,
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| IsanError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    let bad = |tensor: &str, reason: String| IsanError::Checkpoint {
        tensor: tensor.to_string(),
        reason,
    };
    if manifest.format != FORMAT {
        return Err(bad("manifest", format!("unknown format {:?}", manifest.format)));
    }
    let symbols = manifest
        .vocab
        .iter()
        .map(|s| {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(bad("vocab", format!("symbol {s:?} is not a single character"))),
            }
        })
        .collect::<Result<Vec<char>>>()?;
    let vocab = Vocab::from_symbols(&symbols)?;
    let weights_path = dir.join(WEIGHTS);
    let bytes = fs::read(&weights_path).map_err(|e| IsanError::io(&weights_path, e))?;

    let (n, out, k) = (manifest.hidden_dim, manifest.output_dim, vocab.len());
    let specs = tensor_specs(manifest.mode, k, n, out);
    if specs.len() != manifest.tensors.len() {
        return Err(bad(
            "manifest",
            format!("expected {} tensors, found {}", specs.len(), manifest.tensors.len()),
        ));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(specs.len());
    let mut expected_offset = 0u64;
    for (spec, entry) in specs.iter().zip(&manifest.tensors) {
        if spec.name != entry.name {
            return Err(bad(&entry.name, format!("expected tensor `{}` at this position", spec.name)));
        }
        if entry.dtype != "f64" {
            return Err(bad(&entry.name, format!("unsupported dtype {}", entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        if count != spec.rows * spec.cols || entry.shape.first() != Some(&spec.rows) {
            return Err(bad(
                &entry.name,
                format!("shape {:?} does not match {}x{}", entry.shape, spec.rows, spec.cols),
            ));
        }
        if entry.offset != expected_offset {
            return Err(bad(&entry.name, format!("offset {} should be {expected_offset}", entry.offset)));
        }
        let start = entry.offset as usize;
        let end = start + count * 8;
        let chunk = bytes
            .get(start..end)
            .ok_or_else(|| bad(&entry.name, format!("weights.bin too short ({} bytes)", bytes.len())))?;
        values.push(
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
        );
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(bad(
            "weights.bin",
            format!("{} trailing bytes", bytes.len() - expected_offset as usize),
        ));
    }

    let mut it = values.into_iter();
    let n_mats = if manifest.mode == Mode::Switched { k } else { 1 };
    let transitions = (0..n_mats)
        .map(|_| DMatrix::from_row_slice(n, n, &it.next().expect("counted")))
        .collect();
    let biases = (0..k)
        .map(|_| DVector::from_vec(it.next().expect("counted")))
        .collect();
    let h0 = DVector::from_vec(it.next().expect("counted"));
    let weight = DMatrix::from_row_slice(out, n, &it.next().expect("counted"));
    let bias = DVector::from_vec(it.next().expect("counted"));
    let params = ModelParams::new(
        manifest.mode,
        vocab,
        transitions,
        biases,
        h0,
        AffineMap { weight, bias },
    )?;
    Ok(Checkpoint {
        params,
        basis: manifest.basis,
    })
}
