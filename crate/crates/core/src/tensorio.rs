//! `FRODTNSR` container files.
//!
//! Layout: 8-byte magic, u32 LE version, u64 LE header length `H`, `H`
//! bytes of UTF-8 JSON describing each tensor, then the payload. Each
//! tensor's little-endian row-major data starts at an 8-byte aligned
//! offset (relative to the payload start); gaps are zero-filled.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomp::{CategoryStack, WeightStack};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;

pub const MAGIC: &[u8; 8] = b"FRODTNSR";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 20;
const MAX_NAME_LEN: usize = 255;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: shape {shape:?} holds {expected} values but data has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("bad magic: not a FRODTNSR file")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("zero dimension: {0}")]
    ZeroDimension(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: {reason}")]
    WrongKind { name: String, reason: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar storage. Kept typed so an f32 payload round-trips bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl PartialEq for NamedTensor {
    /// Bitwise payload comparison (NaN payloads and signed zeros included).
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::f64(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Result<Self> {
        Self::f64(name, vec![v.len()], v.to_vec())
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Result<Self> {
        Self::f64(name, vec![1], vec![v])
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN {
            return Err(TensorError::InvalidName(self.name.clone()));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(TensorError::ZeroDimension(format!(
                "{}: shape {:?}",
                self.name, self.shape
            )));
        }
        let expected = self.numel();
        if expected != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// Interprets a rank-2 tensor as a matrix (f32 data is widened).
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(TensorError::WrongKind {
                name: self.name.clone(),
                reason: format!("expected a matrix, shape is {:?}", self.shape),
            });
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.data.to_f64()).map_err(|e| {
            TensorError::WrongKind {
                name: self.name.clone(),
                reason: e.to_string(),
            }
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Default for TensorContainer {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorContainer {
    pub fn new() -> Self {
        Self {
            version: VERSION,
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor, rejecting duplicate names.
    pub fn push(&mut self, t: NamedTensor) -> Result<()> {
        t.validate()?;
        if self.get(&t.name).is_some() {
            return Err(TensorError::DuplicateName(t.name));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| TensorError::Missing(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.require(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.require(name)?.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(TensorError::DuplicateName(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for t in &self.tensors {
            entries.push(HeaderEntry {
                name: t.name.clone(),
                dtype: t.dtype(),
                shape: t.shape.clone(),
                offset: payload.len() as u64,
            });
            t.data.write_le(&mut payload);
            payload.resize(payload.len().next_multiple_of(8), 0);
        }
        let header = serde_json::to_vec(&Header { tensors: entries })
            .map_err(|e| TensorError::Header(e.to_string()))?;

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(TensorError::Truncated(
                "file ends inside the fixed prefix".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = (PREFIX_LEN as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| TensorError::Truncated(format!("header declares {header_len} bytes")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| TensorError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut container = TensorContainer {
            version,
            tensors: Vec::with_capacity(header.tensors.len()),
        };
        for entry in header.tensors {
            if entry.offset % 8 != 0 {
                return Err(TensorError::Header(format!(
                    "tensor {:?} offset {} is not 8-byte aligned",
                    entry.name, entry.offset
                )));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| TensorError::Header(format!("shape {:?} overflows", entry.shape)))?;
            let nbytes = numel
                .checked_mul(entry.dtype.size())
                .ok_or_else(|| TensorError::Header("tensor size overflows".into()))?;
            let start = usize::try_from(entry.offset)
                .map_err(|_| TensorError::Header("offset overflows".into()))?;
            let end = start
                .checked_add(nbytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    TensorError::Truncated(format!(
                        "tensor {:?} needs payload bytes {}..{} but only {} are present",
                        entry.name,
                        start,
                        start.saturating_add(nbytes),
                        payload.len()
                    ))
                })?;
            let data = TensorData::read_le(entry.dtype, &payload[start..end]);
            container.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            })?;
        }
        Ok(container)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `c` to `path` and fsyncs before returning.
pub fn write_container(path: &Path, c: &TensorContainer) -> Result<()> {
    let bytes = c.to_bytes()?;
    let mut file = File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<TensorContainer> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    TensorContainer::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackDistribution {
    /// i.i.d. `N(0, 1/n)` entries.
    Gaussian,
    /// Layers sharing a per-category row space with a decaying spectrum,
    /// plus a little noise; closer to what trained weights look like.
    TrainedTask,
}

impl std::str::FromStr for StackDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "trained-task" => Ok(Self::TrainedTask),
            other => Err(format!(
                "unknown distribution {other:?} (gaussian | trained-task)"
            )),
        }
    }
}

/// Deterministic synthetic weight stack. Categories are labelled `c0, c1, ...`.
pub fn generate_synthetic_stack(
    seed: u64,
    categories: usize,
    layers: usize,
    m: usize,
    n: usize,
    dist: StackDistribution,
) -> Result<WeightStack> {
    for (what, v) in [
        ("categories", categories),
        ("layers", layers),
        ("m", m),
        ("n", n),
    ] {
        if v == 0 {
            return Err(TensorError::ZeroDimension(format!(
                "{what} must be at least 1"
            )));
        }
    }
    let mut rng = SplitMix64::new(seed);
    let std = 1.0 / (n as f64).sqrt();
    let mut cats = Vec::with_capacity(categories);
    for c in 0..categories {
        let mats = match dist {
            StackDistribution::Gaussian => (0..layers)
                .map(|_| Matrix::from_fn(m, n, |_, _| std * rng.normal()))
                .collect(),
            StackDistribution::TrainedTask => {
                let shared = Matrix::from_fn(n, n, |_, _| rng.normal());
                let decay: Vec<f64> = (0..n).map(|k| 1.0 / (1.0 + k as f64)).collect();
                let row_space = shared.scale_rows(&decay);
                (0..layers)
                    .map(|_| {
                        let x = Matrix::from_fn(m, n, |_, _| rng.normal());
                        let noise = Matrix::from_fn(m, n, |_, _| 0.1 * std * rng.normal());
                        x.matmul(&row_space).scale(std).add(&noise)
                    })
                    .collect()
            }
        };
        cats.push(CategoryStack {
            label: format!("c{c}"),
            layers: mats,
        });
    }
    Ok(WeightStack { categories: cats })
}

/// Tensor name for layer `i` of category `label` in a stack container.
pub fn stack_tensor_name(label: &str, i: usize) -> String {
    format!("cat/{label}/layer/{i}")
}

pub fn stack_to_container(stack: &WeightStack) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    for cat in &stack.categories {
        for (i, w) in cat.layers.iter().enumerate() {
            c.push(NamedTensor::from_matrix(
                stack_tensor_name(&cat.label, i),
                w,
            )?)?;
        }
    }
    Ok(c)
}

/// Rebuilds a stack from `cat/<label>/layer/<i>` tensors. Categories keep
/// their order of first appearance; layer indices must be `0..L` without gaps.
/// Tensors with other names are ignored.
pub fn stack_from_container(c: &TensorContainer) -> Result<WeightStack> {
    let mut groups: Vec<(String, Vec<(usize, Matrix)>)> = Vec::new();
    for t in &c.tensors {
        let parts: Vec<&str> = t.name.split('/').collect();
        let [kind, label, layer, idx] = parts.as_slice() else {
            continue;
        };
        if *kind != "cat" || *layer != "layer" {
            continue;
        }
        let idx: usize = idx
            .parse()
            .map_err(|_| TensorError::InvalidName(t.name.clone()))?;
        let m = t.to_matrix()?;
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, v)) => v.push((idx, m)),
            None => groups.push((label.to_string(), vec![(idx, m)])),
        }
    }
    if groups.is_empty() {
        return Err(TensorError::Missing("cat/<label>/layer/<i>".into()));
    }
    let mut categories = Vec::with_capacity(groups.len());
    for (label, mut layers) in groups {
        layers.sort_by_key(|(i, _)| *i);
        if layers.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(TensorError::Header(format!(
                "category {label:?} has non-contiguous layer indices"
            )));
        }
        categories.push(CategoryStack {
            label,
            layers: layers.into_iter().map(|(_, m)| m).collect(),
        });
    }
    Ok(WeightStack { categories })
}
