//! Named weight collections, their gradients, and the on-disk checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{ArrayView1, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    /// Views a rank-2 tensor as a matrix.
    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .expect("rank-2 parameter")
    }
}

pub type WeightMap = BTreeMap<String, ParamTensor>;

/// Architectures that fully determine the names and shapes of their weights.
pub trait ParamLayout {
    fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>>;
}

/// Checks that `weights` has exactly the names and shapes `layout` declares.
pub fn validate_weights(layout: &impl ParamLayout, weights: &WeightMap) -> Result<()> {
    let shapes = layout.param_shapes()?;
    if shapes.len() != weights.len() {
        return Err(Error::config(format!(
            "expected {} weight arrays, found {}",
            shapes.len(),
            weights.len()
        )));
    }
    for (name, shape) in shapes {
        let w = weights
            .get(&name)
            .ok_or_else(|| Error::config(format!("missing weight array `{name}`")))?;
        if w.shape != shape {
            return Err(Error::config(format!(
                "weight `{name}` has shape {:?}, architecture declares {:?}",
                w.shape, shape
            )));
        }
        if w.data.len() != shape.iter().product::<usize>() {
            return Err(Error::config(format!("weight `{name}` has wrong element count")));
        }
    }
    Ok(())
}

/// SHA-256 over names, shapes and little-endian values, in name order.
pub fn weights_checksum(weights: &WeightMap) -> String {
    let mut h = Sha256::new();
    for (name, t) in weights {
        h.update(name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Per-parameter gradient buffers keyed like the weights they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(weights: &WeightMap) -> Self {
        Self {
            grads: weights
                .iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient buffer for `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.grads.iter_mut()
    }

    /// `self += scale * other`. Both must cover the same parameters.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in self.grads.iter_mut() {
            let o = &other.grads[name];
            for (a, b) in g.iter_mut().zip(o) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.grads.values().flatten().all(|v| *v == 0.0)
    }

    /// Largest elementwise absolute difference against `other`.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        let mut worst = 0.0f64;
        for (name, g) in &self.grads {
            match other.grads.get(name) {
                Some(o) if o.len() == g.len() => {
                    for (a, b) in g.iter().zip(o) {
                        worst = worst.max((a - b).abs());
                    }
                }
                _ => return f64::INFINITY,
            }
        }
        if other.grads.len() != self.grads.len() {
            return f64::INFINITY;
        }
        worst
    }
}

#[derive(Serialize, Deserialize)]
struct WeightRecord {
    name: String,
    shape: Vec<usize>,
    /// Little-endian f64 values, base64 encoded.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile<A> {
    format_version: u32,
    name: String,
    arch: A,
    seed: u64,
    frozen: bool,
    dtype: String,
    weights: Vec<WeightRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

/// Everything a checkpoint holds besides its weights.
#[derive(Debug, Clone)]
pub struct CheckpointHeader<A> {
    pub name: String,
    pub arch: A,
    pub seed: u64,
    pub frozen: bool,
    pub metadata: Option<serde_json::Value>,
}

pub fn encode_checkpoint<A: Serialize + Clone>(
    header: &CheckpointHeader<A>,
    weights: &WeightMap,
) -> Result<String> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        name: header.name.clone(),
        arch: header.arch.clone(),
        seed: header.seed,
        frozen: header.frozen,
        dtype: "f64".into(),
        weights: weights
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                WeightRecord {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    data: B64.encode(bytes),
                }
            })
            .collect(),
        metadata: header.metadata.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn decode_checkpoint<A: DeserializeOwned + ParamLayout>(
    text: &str,
) -> Result<(CheckpointHeader<A>, WeightMap)> {
    let file: CheckpointFile<A> = serde_json::from_str(text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    if file.dtype != "f64" {
        return Err(Error::config(format!("unsupported dtype `{}`", file.dtype)));
    }
    let mut weights = WeightMap::new();
    for rec in file.weights {
        let bytes = B64
            .decode(rec.data.as_bytes())
            .map_err(|e| Error::config(format!("weight `{}`: {e}", rec.name)))?;
        if bytes.len() != 8 * rec.shape.iter().product::<usize>() {
            return Err(Error::config(format!(
                "weight `{}`: {} bytes do not match shape {:?}",
                rec.name,
                bytes.len(),
                rec.shape
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        weights.insert(
            rec.name,
            ParamTensor {
                shape: rec.shape,
                data,
            },
        );
    }
    validate_weights(&file.arch, &weights)?;
    Ok((
        CheckpointHeader {
            name: file.name,
            arch: file.arch,
            seed: file.seed,
            frozen: file.frozen,
            metadata: file.metadata,
        },
        weights,
    ))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}
