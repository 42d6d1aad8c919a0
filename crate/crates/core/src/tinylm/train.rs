use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::flops::MacCount;
use super::model::softmax_in_place;
use super::tokenizer;
use super::{LmError, LoraAdapters, LoraPair, Model};
use crate::meter::{EnergyReport, Meter, Work};
use crate::tensors::{payload_bytes, ModelBundle, Tensor};

/// A token sequence whose loss covers only the completion: positions
/// predicting `tokens[prompt_len..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl Example {
    /// `[BOS] prompt SEP reference [EOS]`
    pub fn from_text(prompt: &str, reference: &str) -> Self {
        let mut tokens = tokenizer::encode_prompt(prompt);
        let prompt_len = tokens.len();
        tokens.extend(tokenizer::encode_completion(reference));
        Self { tokens, prompt_len }
    }

    fn targets(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: u32,
    /// Mean next-token cross-entropy over completion tokens, in nats.
    pub mean_loss: f64,
    pub energy: EnergyReport,
}

struct ExampleGrad {
    loss_sum: f64,
    grads: Vec<[Vec<f32>; 6]>,
    macs: MacCount,
}

/// Cross-entropy summed over the example's targets, and `dL/dlogits`
/// scaled by `weight`.
fn loss_and_dlogits(logits: &[f32], ex: &Example, vocab: usize, weight: f32) -> (f64, Vec<f32>) {
    let mut dlogits = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for pos in ex.prompt_len - 1..ex.tokens.len() - 1 {
        let target = ex.tokens[pos + 1] as usize;
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let lse = f64::from(max)
            + row
                .iter()
                .map(|v| f64::from(v - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - f64::from(row[target]);
        let d = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        d.copy_from_slice(row);
        softmax_in_place(d);
        d[target] -= 1.0;
        for v in d.iter_mut() {
            *v *= weight;
        }
    }
    (loss, dlogits)
}

fn check_examples(model: &Model, data: &[Example]) -> Result<(), LmError> {
    if data.is_empty() {
        return Err(LmError::Empty("training set"));
    }
    for ex in data {
        model.check_tokens(&ex.tokens)?;
        if ex.prompt_len == 0 || ex.prompt_len >= ex.tokens.len() {
            return Err(LmError::Empty("completion"));
        }
    }
    Ok(())
}

/// Mean completion-token cross-entropy.
pub fn evaluate_loss(
    b: &ModelBundle,
    adapters: Option<&LoraAdapters>,
    data: &[Example],
) -> Result<f64, LmError> {
    let model = Model::new(b, adapters)?;
    check_examples(&model, data)?;
    let vocab = model.config().vocab_size;
    let total: usize = data.iter().map(Example::targets).sum();
    let losses: Vec<f64> = data
        .par_iter()
        .map(|ex| {
            let logits = model.logits(&ex.tokens).expect("checked");
            loss_and_dlogits(logits.data(), ex, vocab, 0.0).0
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / total as f64)
}

fn batch_gradients(model: &Model, batch: &[Example], weight: f32) -> Vec<ExampleGrad> {
    let vocab = model.config().vocab_size;
    batch
        .par_iter()
        .map(|ex| {
            let mut macs = MacCount::default();
            let (logits, cache) = model.forward_cached(&ex.tokens, &mut macs);
            let (loss_sum, dlogits) = loss_and_dlogits(&logits, ex, vocab, weight);
            let grads = model.backward(&cache, &dlogits);
            ExampleGrad {
                loss_sum,
                grads,
                macs,
            }
        })
        .collect()
}

/// Chain rule from `dL/dW_eff` to the factors:
/// `dA = s G B^T`, `dB = s A^T G`.
fn factor_grads(pair: &LoraPair, g: &[f32], scaling: f32) -> (Vec<f32>, Vec<f32>) {
    let (out, r) = (pair.a.shape()[0], pair.a.shape()[1]);
    let inp = pair.b.shape()[1];
    let (a, b) = (pair.a.data(), pair.b.data());
    let mut da = vec![0.0f32; out * r];
    let mut db = vec![0.0f32; r * inp];
    for o in 0..out {
        let grow = &g[o * inp..(o + 1) * inp];
        for k in 0..r {
            let brow = &b[k * inp..(k + 1) * inp];
            da[o * r + k] = scaling * grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
            let aok = scaling * a[o * r + k];
            for (d, gv) in db[k * inp..(k + 1) * inp].iter_mut().zip(grow) {
                *d += aok * gv;
            }
        }
    }
    (da, db)
}

/// Sums per-example projection gradients (in order) and maps them onto
/// the adapter factors.
fn adapter_grads(model: &Model, adapters: &LoraAdapters, per_example: &[ExampleGrad]) -> Vec<(Vec<f32>, Vec<f32>)> {
    let names: Vec<&str> = model.linears().map(|l| l.name.as_str()).collect();
    let mut sums: Vec<Vec<f32>> = model.linears().map(|l| vec![0.0f32; l.out * l.inp]).collect();
    for ex in per_example {
        for (acc, g) in sums.iter_mut().zip(ex.grads.iter().flat_map(|layer| layer.iter())) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let scaling = adapters.scaling();
    adapters
        .pairs
        .iter()
        .map(|pair| {
            let idx = names
                .iter()
                .position(|n| *n == pair.target)
                .expect("adapters checked against bundle");
            factor_grads(pair, &sums[idx], scaling)
        })
        .collect()
}

/// Mean completion loss and its gradient with respect to every adapter
/// factor, returned in the adapters' own layout.
pub fn loss_and_gradients(
    b: &ModelBundle,
    adapters: &LoraAdapters,
    data: &[Example],
) -> Result<(f64, LoraAdapters), LmError> {
    let model = Model::new(b, Some(adapters))?;
    check_examples(&model, data)?;
    let total: usize = data.iter().map(Example::targets).sum();
    let per_example = batch_gradients(&model, data, 1.0 / total as f32);
    let loss = per_example.iter().map(|e| e.loss_sum).sum::<f64>() / total as f64;
    let grads = adapter_grads(&model, adapters, &per_example);
    let pairs = adapters
        .pairs
        .iter()
        .zip(grads)
        .map(|(p, (da, db))| LoraPair {
            target: p.target.clone(),
            a: Tensor::from_raw(p.a.shape().to_vec(), da),
            b: Tensor::from_raw(p.b.shape().to_vec(), db),
        })
        .collect();
    Ok((
        loss,
        LoraAdapters {
            rank: adapters.rank,
            alpha: adapters.alpha,
            pairs,
        },
    ))
}

/// One pass of plain gradient descent over `data`, updating only the
/// adapter factors. `batch_size == 0` takes a single full-batch step.
/// The pass runs inside one meter span.
pub fn train_epoch(
    b: &ModelBundle,
    adapters: &LoraAdapters,
    data: &[Example],
    lr: f32,
    batch_size: usize,
    epoch: u32,
    meter: &mut Meter,
) -> Result<(LoraAdapters, TrainRecord), LmError> {
    let mut model = Model::new(b, Some(adapters))?;
    check_examples(&model, data)?;
    let total: usize = data.iter().map(Example::targets).sum();
    let step = if batch_size == 0 { data.len() } else { batch_size };
    let weight_bytes = payload_bytes(b) + adapters.payload_bytes();

    let span = meter.start_span()?;
    let mut current = adapters.clone();
    let mut loss_sum = 0.0f64;
    let mut work = Work::default();
    for batch in data.chunks(step) {
        model.set_adapters(Some(&current));
        let batch_tokens: usize = batch.iter().map(Example::targets).sum();
        let per_example = batch_gradients(&model, batch, 1.0 / batch_tokens as f32);
        loss_sum += per_example.iter().map(|e| e.loss_sum).sum::<f64>();
        for ex in &per_example {
            // backward costs about twice the forward
            work += Work {
                macs: 3 * ex.macs.macs(),
                skipped_macs: 3 * ex.macs.skipped,
                weight_bytes: 2 * weight_bytes,
            };
        }
        work.macs += model.adapter_build_macs();
        if lr != 0.0 {
            let grads = adapter_grads(&model, &current, &per_example);
            for (pair, (da, db)) in current.pairs.iter_mut().zip(grads) {
                for (w, g) in pair.a.data_mut().iter_mut().zip(&da) {
                    *w -= lr * g;
                }
                for (w, g) in pair.b.data_mut().iter_mut().zip(&db) {
                    *w -= lr * g;
                }
            }
        }
    }
    meter.charge(&work);
    let energy = meter.stop_span(span)?;

    let mean_loss = loss_sum / total as f64;
    let finite = current
        .pairs
        .iter()
        .all(|p| p.a.data().iter().chain(p.b.data()).all(|v| v.is_finite()));
    if !mean_loss.is_finite() || !finite {
        return Err(LmError::Divergence { lr });
    }
    Ok((
        current,
        TrainRecord {
            epoch,
            mean_loss,
            energy,
        },
    ))
}
