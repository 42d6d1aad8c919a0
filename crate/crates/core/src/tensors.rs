//! Dense tensors, model bundles and the `EALM` container format.
//!
//! A bundle file is laid out as
//!
//! ```text
//! "EALM" | version u16 | tensor count u32
//! per tensor: name len u16 | name | dtype u8 | rank u8 | dims u64* | payload len u64 | payload
//! metadata len u64 | metadata (UTF-8 JSON)
//! ```
//!
//! with every integer little-endian. Quantized payloads hold the packed codes
//! followed by the `f32` scales.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prune::PruneSpec;
use crate::quant::{Granularity, HalfTensor, QuantizedTensor};
use crate::tinylm::LmConfig;

pub const MAGIC: &[u8; 4] = b"EALM";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} must be non-empty with positive dimensions")]
    BadShape(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("failed to write bundle {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to read bundle {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad bundle format: {0}")]
    Format(String),
    #[error("corrupt payload for tensor `{tensor}`: {detail}")]
    Corrupt { tensor: String, detail: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

/// Row-major dense `f32` tensor. Every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = checked_numel(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length matches and values are finite.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Length of the innermost dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }

    /// Number of innermost rows (product of all but the last dimension).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|v| -v).collect())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::BadShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Storage precision of a tensor or bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    Int4,
    Int8,
    Fp16,
    Fp32,
}

impl Precision {
    pub const ALL: [Precision; 4] = [
        Precision::Int4,
        Precision::Int8,
        Precision::Fp16,
        Precision::Fp32,
    ];

    pub fn bits(self) -> u8 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Fp16 => 16,
            Precision::Fp32 => 32,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            4 => Some(Precision::Int4),
            8 => Some(Precision::Int8),
            16 => Some(Precision::Fp16),
            32 => Some(Precision::Fp32),
            _ => None,
        }
    }

    /// Largest symmetric integer code, for the integer precisions.
    pub fn qmax(self) -> Option<i32> {
        match self {
            Precision::Int4 => Some(7),
            Precision::Int8 => Some(127),
            _ => None,
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.bits()
    }
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, Self::Error> {
        Precision::from_bits(bits).ok_or_else(|| format!("unsupported precision {bits} bits"))
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.bits())
    }
}

/// Container dtype codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    I8Sym = 2,
    I4SymPacked = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::I8Sym),
            3 => Some(DType::I4SymPacked),
            _ => None,
        }
    }

    pub fn precision(self) -> Precision {
        match self {
            DType::F32 => Precision::Fp32,
            DType::F16 => Precision::Fp16,
            DType::I8Sym => Precision::Int8,
            DType::I4SymPacked => Precision::Int4,
        }
    }
}

/// A tensor in one of its storage representations.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor),
    F16(HalfTensor),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F16(h) => h.shape(),
            StoredTensor::Quantized(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F16(_) => DType::F16,
            StoredTensor::Quantized(q) => match q.precision() {
                Precision::Int8 => DType::I8Sym,
                _ => DType::I4SymPacked,
            },
        }
    }

    pub fn precision(&self) -> Precision {
        self.dtype().precision()
    }

    /// Dense 32-bit view (dequantized where needed).
    pub fn to_dense(&self) -> Tensor {
        match self {
            StoredTensor::F32(t) => t.clone(),
            StoredTensor::F16(h) => h.to_tensor(),
            StoredTensor::Quantized(q) => crate::quant::dequantize(q),
        }
    }

    /// Flags, per element, whether the stored value is exactly zero.
    pub fn zero_flags(&self) -> Vec<bool> {
        match self {
            StoredTensor::F32(t) => t.data().iter().map(|v| *v == 0.0).collect(),
            StoredTensor::F16(h) => h.bits().iter().map(|b| b & 0x7fff == 0).collect(),
            StoredTensor::Quantized(q) => q.codes().iter().map(|c| *c == 0).collect(),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        match self {
            StoredTensor::F32(t) => 4 * t.numel() as u64,
            StoredTensor::F16(h) => 2 * h.numel() as u64,
            StoredTensor::Quantized(q) => q.payload_bytes(),
        }
    }

    fn encode_payload(&self) -> Vec<u8> {
        match self {
            StoredTensor::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            StoredTensor::F16(h) => h.bits().iter().flat_map(|v| v.to_le_bytes()).collect(),
            StoredTensor::Quantized(q) => {
                let mut out = q.packed_codes().to_vec();
                out.extend(q.scales().iter().flat_map(|s| s.to_le_bytes()));
                out
            }
        }
    }

    fn layout(&self) -> Option<Granularity> {
        match self {
            StoredTensor::Quantized(q) => Some(q.granularity()),
            _ => None,
        }
    }
}

/// Which tensors of a bundle a compression step touches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "names")]
pub enum TargetFilter {
    /// Attention and MLP weight matrices; embeddings, norms and the output
    /// head are excluded.
    #[default]
    Projections,
    All,
    Names(Vec<String>),
}

impl TargetFilter {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            TargetFilter::Projections => is_projection_weight(name),
            TargetFilter::All => true,
            TargetFilter::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Attention (`.attn.w*`) and MLP (`.mlp.w*`) weight matrices.
pub fn is_projection_weight(name: &str) -> bool {
    name.contains(".attn.w") || name.contains(".mlp.w")
}

/// Compression history of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub precision_bits: Precision,
    pub epochs_trained: u32,
    pub prune_spec: Option<PruneSpec>,
    /// Fraction of targeted weights the prune mask removed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    pub parent_id: Option<String>,
}

impl Default for Lineage {
    fn default() -> Self {
        Self {
            precision_bits: Precision::Fp32,
            epochs_trained: 0,
            prune_spec: None,
            sparsity: None,
            parent_id: None,
        }
    }
}

/// Named tensors plus architecture and lineage metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: LmConfig,
    pub lineage: Lineage,
    tensors: Vec<(String, StoredTensor)>,
}

impl ModelBundle {
    pub fn new(
        config: LmConfig,
        lineage: Lineage,
        tensors: Vec<(String, StoredTensor)>,
    ) -> Result<Self, BundleError> {
        check_unique(&tensors)?;
        Ok(Self {
            config,
            lineage,
            tensors,
        })
    }

    /// Unchecked constructor; `save_bundle` still rejects duplicate names.
    pub fn from_parts_unchecked(
        config: LmConfig,
        lineage: Lineage,
        tensors: Vec<(String, StoredTensor)>,
    ) -> Self {
        Self {
            config,
            lineage,
            tensors,
        }
    }

    pub fn tensors(&self) -> &[(String, StoredTensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Returns a copy with each tensor passed through `f`.
    pub fn map_tensors<E>(
        &self,
        mut f: impl FnMut(&str, &StoredTensor) -> Result<StoredTensor, E>,
    ) -> Result<ModelBundle, E> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), f(n, t)?)))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(ModelBundle {
            config: self.config.clone(),
            lineage: self.lineage.clone(),
            tensors,
        })
    }

    /// Checks that every non-32-bit tensor matches the lineage precision.
    pub fn check_precision(&self) -> Result<(), BundleError> {
        for (name, t) in &self.tensors {
            let p = t.precision();
            if p != Precision::Fp32 && p != self.lineage.precision_bits {
                return Err(BundleError::Invalid(format!(
                    "tensor `{name}` stored at {p} but lineage says {}",
                    self.lineage.precision_bits
                )));
            }
        }
        Ok(())
    }
}

fn check_unique(tensors: &[(String, StoredTensor)]) -> Result<(), BundleError> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(BundleError::DuplicateName(name.clone()));
        }
    }
    Ok(())
}

/// Total stored payload size in bytes (codes plus scales for quantized
/// tensors; metadata excluded).
pub fn payload_bytes(bundle: &ModelBundle) -> u64 {
    bundle.tensors.iter().map(|(_, t)| t.payload_bytes()).sum()
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: LmConfig,
    lineage: Lineage,
    #[serde(default)]
    layouts: BTreeMap<String, Granularity>,
}

/// Serializes a bundle to the container byte layout.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>, BundleError> {
    check_unique(&bundle.tensors)?;
    let count = u32::try_from(bundle.tensors.len())
        .map_err(|_| BundleError::Invalid("too many tensors".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());

    let mut layouts = BTreeMap::new();
    for (name, tensor) in &bundle.tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| BundleError::Invalid(format!("tensor name too long: {name}")))?;
        let shape = tensor.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| BundleError::Invalid(format!("rank too large for `{name}`")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dtype() as u8);
        out.push(rank);
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let payload = tensor.encode_payload();
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        if let Some(layout) = tensor.layout() {
            layouts.insert(name.clone(), layout);
        }
    }

    let meta = Metadata {
        config: bundle.config.clone(),
        lineage: bundle.lineage.clone(),
        layouts,
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| BundleError::Invalid(format!("metadata: {e}")))?;
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|source| BundleError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle, BundleError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| BundleError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_bundle(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle, BundleError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur
        .take(4)
        .ok_or_else(|| BundleError::Format("file shorter than header".into()))?;
    if magic != MAGIC {
        return Err(BundleError::Format(format!("bad magic {magic:02x?}")));
    }
    let version = cur
        .u16()
        .ok_or_else(|| BundleError::Format("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(BundleError::Format(format!("unsupported version {version}")));
    }
    let count = cur
        .u32()
        .ok_or_else(|| BundleError::Format("missing tensor count".into()))?;

    struct Raw<'a> {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        payload: &'a [u8],
    }

    let mut raws = Vec::new();
    for i in 0..count {
        let unnamed = || format!("#{i}");
        let corrupt = |tensor: String, detail: &str| BundleError::Corrupt {
            tensor,
            detail: detail.to_string(),
        };
        let name_len = cur.u16().ok_or_else(|| corrupt(unnamed(), "truncated header"))?;
        let name = cur
            .take(name_len as usize)
            .ok_or_else(|| corrupt(unnamed(), "truncated name"))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| corrupt(unnamed(), "name is not UTF-8"))?;
        let code = cur.u8().ok_or_else(|| corrupt(name.clone(), "truncated header"))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| corrupt(name.clone(), &format!("unknown dtype code {code}")))?;
        let rank = cur.u8().ok_or_else(|| corrupt(name.clone(), "truncated header"))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = cur.u64().ok_or_else(|| corrupt(name.clone(), "truncated dims"))?;
            shape.push(
                usize::try_from(d).map_err(|_| corrupt(name.clone(), "dimension overflow"))?,
            );
        }
        let len = cur
            .u64()
            .ok_or_else(|| corrupt(name.clone(), "truncated payload length"))?;
        let payload = usize::try_from(len)
            .ok()
            .and_then(|len| cur.take(len))
            .ok_or_else(|| corrupt(name.clone(), "payload truncated"))?;
        raws.push(Raw {
            name,
            dtype,
            shape,
            payload,
        });
    }

    let meta_len = cur
        .u64()
        .ok_or_else(|| BundleError::Format("missing metadata block".into()))?;
    let meta = usize::try_from(meta_len)
        .ok()
        .and_then(|n| cur.take(n))
        .ok_or_else(|| BundleError::Format("metadata block truncated".into()))?;
    if cur.pos != bytes.len() {
        return Err(BundleError::Format("trailing bytes after metadata".into()));
    }
    let meta: Metadata = serde_json::from_slice(meta)
        .map_err(|e| BundleError::Format(format!("metadata: {e}")))?;

    let mut tensors = Vec::with_capacity(raws.len());
    for raw in raws {
        let layout = meta.layouts.get(&raw.name).copied();
        let t = decode_tensor(raw.dtype, raw.shape, raw.payload, layout).map_err(|detail| {
            BundleError::Corrupt {
                tensor: raw.name.clone(),
                detail,
            }
        })?;
        tensors.push((raw.name, t));
    }
    ModelBundle::new(meta.config, meta.lineage, tensors)
}

fn decode_tensor(
    dtype: DType,
    shape: Vec<usize>,
    payload: &[u8],
    layout: Option<Granularity>,
) -> Result<StoredTensor, String> {
    let numel = checked_numel(&shape).map_err(|e| e.to_string())?;
    match dtype {
        DType::F32 => {
            if payload.len() != 4 * numel {
                return Err(format!("expected {} bytes, found {}", 4 * numel, payload.len()));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
                .map(StoredTensor::F32)
                .map_err(|e| e.to_string())
        }
        DType::F16 => {
            if payload.len() != 2 * numel {
                return Err(format!("expected {} bytes, found {}", 2 * numel, payload.len()));
            }
            let bits = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            HalfTensor::from_bits(shape, bits)
                .map(StoredTensor::F16)
                .map_err(|e| e.to_string())
        }
        DType::I8Sym | DType::I4SymPacked => {
            let precision = dtype.precision();
            let code_len = match precision {
                Precision::Int8 => numel,
                _ => numel.div_ceil(2),
            };
            let scale_bytes = payload
                .len()
                .checked_sub(code_len)
                .ok_or_else(|| format!("payload shorter than {code_len} code bytes"))?;
            if scale_bytes == 0 || scale_bytes % 4 != 0 {
                return Err(format!("scale block of {scale_bytes} bytes is malformed"));
            }
            let scales: Vec<f32> = payload[code_len..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let granularity = layout.unwrap_or(if scales.len() == 1 {
                Granularity::PerTensor
            } else {
                Granularity::PerRow
            });
            QuantizedTensor::from_parts(
                shape,
                precision,
                granularity,
                payload[..code_len].to_vec(),
                scales,
            )
            .map(StoredTensor::Quantized)
            .map_err(|e| e.to_string())
        }
    }
}
