use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LmConfig, LmError};
use crate::tensors::{
    load_bundle, save_bundle, Lineage, ModelBundle, Precision, StoredTensor, TargetFilter, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub lr: f32,
    /// Examples per gradient step; `0` means one full-batch step per epoch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            lr: 0.05,
            batch_size: 0,
            seed: 0,
        }
    }
}

/// Low-rank factors for one weight matrix `W` (`out x in`):
/// `A` is `out x r`, `B` is `r x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f32,
    pub pairs: Vec<LoraPair>,
}

impl LoraAdapters {
    /// One pair per projection matrix of the bundle. `A ~ N(0, 1) / sqrt(r)`
    /// from a seeded stream, `B = 0`.
    pub fn init(bundle: &ModelBundle, config: &LoraConfig) -> Result<Self, LmError> {
        if config.rank == 0 || config.alpha <= 0.0 || !config.alpha.is_finite() {
            return Err(LmError::Config(format!(
                "LoRA rank {} / alpha {} must be positive",
                config.rank, config.alpha
            )));
        }
        let r = config.rank;
        let scale = 1.0 / (r as f32).sqrt();
        let filter = TargetFilter::Projections;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pairs = bundle
            .tensors()
            .iter()
            .filter(|(name, _)| filter.matches(name))
            .map(|(name, t)| {
                let (out, inp) = (t.shape()[0], t.shape()[1]);
                let a = (0..out * r)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect();
                LoraPair {
                    target: name.clone(),
                    a: Tensor::from_raw(vec![out, r], a),
                    b: Tensor::from_raw(vec![r, inp], vec![0.0; r * inp]),
                }
            })
            .collect();
        Ok(Self {
            rank: r,
            alpha: config.alpha,
            pairs,
        })
    }

    /// `alpha / r`
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn get(&self, target: &str) -> Option<&LoraPair> {
        self.pairs.iter().find(|p| p.target == target)
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    pub fn payload_bytes(&self) -> u64 {
        4 * self.param_count() as u64
    }

    /// Checks shapes against the bundle's matrices.
    pub fn check(&self, bundle: &ModelBundle) -> Result<(), LmError> {
        for p in &self.pairs {
            let t = bundle
                .get(&p.target)
                .ok_or_else(|| LmError::Adapters(format!("no base tensor `{}`", p.target)))?;
            let shape = t.shape();
            if shape.len() != 2
                || p.a.shape() != [shape[0], self.rank]
                || p.b.shape() != [self.rank, shape[1]]
            {
                return Err(LmError::Adapters(format!(
                    "`{}`: A {:?}, B {:?} do not fit {shape:?} at rank {}",
                    p.target,
                    p.a.shape(),
                    p.b.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// `(alpha / r) * A * B`, computed in `f32` in a fixed order.
pub(crate) fn low_rank_delta(pair: &LoraPair, scaling: f32) -> Vec<f32> {
    let (out, r) = (pair.a.shape()[0], pair.a.shape()[1]);
    let inp = pair.b.shape()[1];
    let a = pair.a.data();
    let b = pair.b.data();
    let mut delta = vec![0.0f32; out * inp];
    for o in 0..out {
        let row = &mut delta[o * inp..(o + 1) * inp];
        for k in 0..r {
            let aok = a[o * r + k];
            if aok == 0.0 {
                continue;
            }
            let brow = &b[k * inp..(k + 1) * inp];
            for (d, bv) in row.iter_mut().zip(brow) {
                *d += aok * bv;
            }
        }
        for d in row.iter_mut() {
            *d *= scaling;
        }
    }
    delta
}

/// Folds the adapters into a 32-bit base: `W <- W + (alpha / r) * A * B`.
pub fn merge_adapters(b: &ModelBundle, adapters: &LoraAdapters) -> Result<ModelBundle, LmError> {
    if b.lineage.precision_bits != Precision::Fp32 {
        return Err(LmError::Precision(b.lineage.precision_bits));
    }
    adapters.check(b)?;
    let scaling = adapters.scaling();
    b.map_tensors(|name, t| {
        let Some(pair) = adapters.get(name) else {
            return Ok(t.clone());
        };
        let StoredTensor::F32(w) = t else {
            return Err(LmError::Precision(t.precision()));
        };
        let delta = low_rank_delta(pair, scaling);
        let data = w.data().iter().zip(&delta).map(|(w, d)| w + d).collect();
        Ok(StoredTensor::F32(Tensor::from_raw(w.shape().to_vec(), data)))
    })
}

/// Stores adapters in the bundle container, tensors named
/// `<target>.lora_a` / `<target>.lora_b`. The rank rides in
/// `config.d_model` and alpha in a one-element `lora.alpha` tensor.
pub fn save_adapters(adapters: &LoraAdapters, path: impl AsRef<Path>) -> Result<(), LmError> {
    let mut tensors = Vec::with_capacity(2 * adapters.pairs.len());
    for p in &adapters.pairs {
        tensors.push((format!("{}.lora_a", p.target), StoredTensor::F32(p.a.clone())));
        tensors.push((format!("{}.lora_b", p.target), StoredTensor::F32(p.b.clone())));
    }
    let alpha = StoredTensor::F32(Tensor::from_raw(vec![1], vec![adapters.alpha]));
    tensors.push(("lora.alpha".to_string(), alpha));
    let config = LmConfig {
        d_model: adapters.rank,
        ..LmConfig::default()
    };
    let bundle = ModelBundle::new(config, Lineage::default(), tensors)?;
    save_bundle(&bundle, path)?;
    Ok(())
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<LoraAdapters, LmError> {
    let bundle = load_bundle(path)?;
    let rank = bundle.config.d_model;
    let alpha = match bundle.get("lora.alpha") {
        Some(StoredTensor::F32(t)) if t.numel() == 1 => t.data()[0],
        _ => return Err(LmError::Adapters("missing lora.alpha".into())),
    };
    let mut pairs = Vec::new();
    for (name, t) in bundle.tensors() {
        let Some(target) = name.strip_suffix(".lora_a") else {
            continue;
        };
        let b_name = format!("{target}.lora_b");
        let (StoredTensor::F32(a), Some(StoredTensor::F32(b))) = (t, bundle.get(&b_name)) else {
            return Err(LmError::Adapters(format!("incomplete pair for `{target}`")));
        };
        pairs.push(LoraPair {
            target: target.to_string(),
            a: a.clone(),
            b: b.clone(),
        });
    }
    Ok(LoraAdapters { rank, alpha, pairs })
}
