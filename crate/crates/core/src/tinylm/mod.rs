//! A small pre-norm decoder-only transformer over bytes, with low-rank
//! adapters trained on top of frozen (possibly quantized) base weights.

mod decode;
mod flops;
mod lora;
mod model;
pub mod tokenizer;
mod train;

pub use decode::greedy_decode;
pub use flops::{count_flops_and_skipped, MacCount};
pub use lora::{load_adapters, merge_adapters, save_adapters, LoraAdapters, LoraConfig, LoraPair};
pub use model::{forward, forward_batch, Model};
pub use train::{evaluate_loss, loss_and_gradients, train_epoch, Example, TrainRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meter::MeterError;
use crate::tensors::{BundleError, Lineage, ModelBundle, StoredTensor, Tensor};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    Length { len: usize, max_seq: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: u32, vocab: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("bundle does not match the architecture: {0}")]
    Architecture(String),
    #[error("adapters do not match the bundle: {0}")]
    Adapters(String),
    #[error("cannot merge adapters into a {0} base; merge requires 32-bit weights")]
    Precision(crate::tensors::Precision),
    #[error("training diverged (non-finite loss) at lr {lr}")]
    Divergence { lr: f32 },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Meter(#[from] MeterError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub init_seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 128,
            init_seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(LmError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < tokenizer::VOCAB_SIZE {
            return Err(LmError::Config(format!(
                "vocab_size {} cannot hold the byte tokenizer ({})",
                self.vocab_size,
                tokenizer::VOCAB_SIZE
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every tensor the architecture needs, with its shape, in bundle order.
    /// Weight matrices are `[out, in]`.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w_up"), vec![self.d_ff, d]),
                (p("mlp.w_down"), vec![d, self.d_ff]),
            ]);
        }
        specs.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
            ("lm_head".to_string(), vec![self.vocab_size, d]),
        ]);
        specs
    }

    /// Checks that a bundle carries every required tensor at the right shape.
    pub fn check_bundle(&self, b: &ModelBundle) -> Result<(), LmError> {
        for (name, shape) in self.tensor_specs() {
            let t = b
                .get(&name)
                .ok_or_else(|| LmError::Architecture(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(LmError::Architecture(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Seeded initialization. Matrices and embeddings are uniform in
/// `[-1/sqrt(d_model), 1/sqrt(d_model)]`, norm gains are 1 and biases 0.
/// Each tensor draws from its own ChaCha8 stream keyed by its position.
pub fn init_model(config: &LmConfig) -> Result<ModelBundle, LmError> {
    config.validate()?;
    let s = 1.0 / (config.d_model as f32).sqrt();
    let tensors = config
        .tensor_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
                rng.set_stream(i as u64);
                (0..n).map(|_| rng.random_range(-s..=s)).collect()
            };
            (name, StoredTensor::F32(Tensor::from_raw(shape, data)))
        })
        .collect();
    Ok(ModelBundle::new(config.clone(), Lineage::default(), tensors)?)
}
