//! Magnitude (unstructured) and N:M (structured) pruning masks.
//!
//! Pruned tensors keep their dense storage; masked elements are set to an
//! exact zero (zero codes for quantized tensors).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensors::{ModelBundle, StoredTensor, TargetFilter, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("pruning ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("N:M pattern {n}:{m} requires 0 < n < m")]
    Pattern { n: usize, m: usize },
    #[error("N:M pruning needs a matrix, `{name}` has shape {shape:?}")]
    NotMatrix { name: String, shape: Vec<usize> },
    #[error("mask for `{name}`: {detail}")]
    Mask { name: String, detail: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    PerTensor,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum PruneMethod {
    UnstructuredMagnitude { ratio: f64, scope: Scope },
    StructuredNm { n: usize, m: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    #[serde(flatten)]
    pub method: PruneMethod,
    #[serde(default)]
    pub target_filter: TargetFilter,
}

impl PruneSpec {
    pub fn magnitude(ratio: f64) -> Self {
        Self {
            method: PruneMethod::UnstructuredMagnitude {
                ratio,
                scope: Scope::PerTensor,
            },
            target_filter: TargetFilter::Projections,
        }
    }

    pub fn nm(n: usize, m: usize) -> Self {
        Self {
            method: PruneMethod::StructuredNm { n, m },
            target_filter: TargetFilter::Projections,
        }
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        match self.method {
            PruneMethod::UnstructuredMagnitude { ratio, .. } => check_ratio(ratio),
            PruneMethod::StructuredNm { n, m } => check_pattern(n, m),
        }
    }

    /// Short label such as `mag0.3` or `nm2:4`.
    pub fn label(&self) -> String {
        match self.method {
            PruneMethod::UnstructuredMagnitude { ratio, scope } => match scope {
                Scope::PerTensor => format!("mag{ratio}"),
                Scope::Global => format!("gmag{ratio}"),
            },
            PruneMethod::StructuredNm { n, m } => format!("nm{n}:{m}"),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<(), PruneError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(PruneError::Ratio(ratio))
    }
}

fn check_pattern(n: usize, m: usize) -> Result<(), PruneError> {
    if n > 0 && n < m {
        Ok(())
    } else {
        Err(PruneError::Pattern { n, m })
    }
}

/// Keep-flags for one tensor (`true` = keep).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMask {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl TensorMask {
    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub spec: PruneSpec,
    pub tensors: Vec<TensorMask>,
}

impl SparsityMask {
    /// Removed elements over all masked elements.
    pub fn pruned_fraction(&self) -> f64 {
        let (removed, total) = self.tensors.iter().fold((0usize, 0usize), |(r, n), t| {
            (r + t.keep.iter().filter(|k| !**k).count(), n + t.keep.len())
        });
        if total == 0 {
            0.0
        } else {
            removed as f64 / total as f64
        }
    }
}

/// Number of elements to remove for a ratio. The tiny nudge keeps products
/// such as `0.3 * 10` from landing just below an integer.
fn prune_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64) + 1e-9).floor() as usize
}

/// Keep-flags zeroing the `floor(ratio * n)` smallest magnitudes. Among
/// equal magnitudes the higher index is removed first.
fn bottom_magnitude(values: &[f32], ratio: f64) -> Vec<bool> {
    let k = prune_count(ratio, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .abs()
            .total_cmp(&values[b].abs())
            .then_with(|| b.cmp(&a))
    });
    let mut keep = vec![true; values.len()];
    for &i in &order[..k] {
        keep[i] = false;
    }
    keep
}

/// Magnitude mask for a single tensor.
pub fn magnitude_mask(t: &Tensor, ratio: f64) -> Result<Vec<bool>, PruneError> {
    check_ratio(ratio)?;
    Ok(bottom_magnitude(t.data(), ratio))
}

/// Magnitude masks for several tensors. With `Scope::Global` the ranking
/// runs over the concatenation of all tensors in the given order.
pub fn magnitude_masks(
    tensors: &[(&str, &Tensor)],
    ratio: f64,
    scope: Scope,
) -> Result<Vec<TensorMask>, PruneError> {
    check_ratio(ratio)?;
    match scope {
        Scope::PerTensor => Ok(tensors
            .iter()
            .map(|(name, t)| TensorMask {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                keep: bottom_magnitude(t.data(), ratio),
            })
            .collect()),
        Scope::Global => {
            let all: Vec<f32> = tensors
                .iter()
                .flat_map(|(_, t)| t.data().iter().copied())
                .collect();
            let keep = bottom_magnitude(&all, ratio);
            let mut offset = 0;
            Ok(tensors
                .iter()
                .map(|(name, t)| {
                    let m = TensorMask {
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                        keep: keep[offset..offset + t.numel()].to_vec(),
                    };
                    offset += t.numel();
                    m
                })
                .collect())
        }
    }
}

/// N:M mask along each row of a matrix: within every run of `m`
/// consecutive elements the `n` largest magnitudes are kept (lower in-group
/// index wins ties). A trailing partial group of `g` keeps `min(n, g)`.
pub fn nm_mask(t: &Tensor, n: usize, m: usize) -> Result<Vec<bool>, PruneError> {
    check_pattern(n, m)?;
    if !t.is_matrix() {
        return Err(PruneError::NotMatrix {
            name: String::new(),
            shape: t.shape().to_vec(),
        });
    }
    let mut keep = vec![false; t.numel()];
    let cols = t.cols();
    for (r, row) in t.data().chunks(cols).enumerate() {
        for (g, group) in row.chunks(m).enumerate() {
            let mut idx: Vec<usize> = (0..group.len()).collect();
            idx.sort_by(|&a, &b| {
                group[b]
                    .abs()
                    .total_cmp(&group[a].abs())
                    .then_with(|| a.cmp(&b))
            });
            for &i in idx.iter().take(n) {
                keep[r * cols + g * m + i] = true;
            }
        }
    }
    Ok(keep)
}

/// Builds the mask a spec implies for the targeted tensors of a bundle.
/// Quantized tensors are ranked by their dequantized values.
pub fn build_mask(b: &ModelBundle, spec: &PruneSpec) -> Result<SparsityMask, PruneError> {
    spec.validate()?;
    let dense: Vec<(String, Tensor)> = b
        .tensors()
        .iter()
        .filter(|(name, _)| spec.target_filter.matches(name))
        .map(|(name, t)| (name.clone(), t.to_dense()))
        .collect();
    let tensors = match spec.method {
        PruneMethod::UnstructuredMagnitude { ratio, scope } => {
            let refs: Vec<(&str, &Tensor)> = dense.iter().map(|(n, t)| (n.as_str(), t)).collect();
            magnitude_masks(&refs, ratio, scope)?
        }
        PruneMethod::StructuredNm { n, m } => dense
            .iter()
            .map(|(name, t)| {
                let keep = nm_mask(t, n, m).map_err(|e| match e {
                    PruneError::NotMatrix { shape, .. } => PruneError::NotMatrix {
                        name: name.clone(),
                        shape,
                    },
                    other => other,
                })?;
                Ok(TensorMask {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    keep,
                })
            })
            .collect::<Result<Vec<_>, PruneError>>()?,
    };
    Ok(SparsityMask {
        spec: spec.clone(),
        tensors,
    })
}

/// Zeroes masked elements and records the prune spec in the lineage.
pub fn apply_mask(b: &ModelBundle, mask: &SparsityMask) -> Result<ModelBundle, PruneError> {
    for tm in &mask.tensors {
        if !mask.spec.target_filter.matches(&tm.name) {
            return Err(PruneError::Mask {
                name: tm.name.clone(),
                detail: "tensor is not selected by the spec's target filter".into(),
            });
        }
        let t = b.get(&tm.name).ok_or_else(|| PruneError::Mask {
            name: tm.name.clone(),
            detail: "no such tensor in bundle".into(),
        })?;
        if t.shape() != tm.shape.as_slice() || tm.keep.len() != t.numel() {
            return Err(PruneError::Mask {
                name: tm.name.clone(),
                detail: format!("mask shape {:?} vs tensor shape {:?}", tm.shape, t.shape()),
            });
        }
    }
    let mut out = b.map_tensors(|name, t| {
        let Some(tm) = mask.tensors.iter().find(|m| m.name == name) else {
            return Ok::<_, PruneError>(t.clone());
        };
        let mut t = t.clone();
        match &mut t {
            StoredTensor::F32(d) => {
                for (v, k) in d.data_mut().iter_mut().zip(&tm.keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
            StoredTensor::F16(h) => {
                for (v, k) in h.bits_mut().iter_mut().zip(&tm.keep) {
                    if !k {
                        *v = 0;
                    }
                }
            }
            StoredTensor::Quantized(q) => q.mask_codes(&tm.keep),
        }
        Ok(t)
    })?;
    out.lineage.prune_spec = Some(mask.spec.clone());
    out.lineage.sparsity = Some(mask.pruned_fraction());
    Ok(out)
}

/// Builds and applies the mask for a spec.
pub fn prune_bundle(b: &ModelBundle, spec: &PruneSpec) -> Result<ModelBundle, PruneError> {
    let mask = build_mask(b, spec)?;
    apply_mask(b, &mask)
}

/// Fraction of exactly-zero weights among the tensors the filter selects.
pub fn sparsity(b: &ModelBundle, filter: &TargetFilter) -> f64 {
    let (zeros, total) = b
        .tensors()
        .iter()
        .filter(|(name, _)| filter.matches(name))
        .fold((0usize, 0usize), |(z, n), (_, t)| {
            let flags = t.zero_flags();
            (z + flags.iter().filter(|f| **f).count(), n + flags.len())
        });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
