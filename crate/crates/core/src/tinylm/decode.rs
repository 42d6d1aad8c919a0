use super::flops::MacCount;
use super::tokenizer::EOS;
use super::{LmError, LoraAdapters, Model};
use crate::tensors::ModelBundle;

impl Model {
    /// Greedy continuation of `prompt`. Appends the arg-max token (lowest
    /// id on ties) until EOS, `max_new` tokens, or the context is full.
    /// Returns the prompt followed by the generated ids, EOS included.
    pub fn greedy(&self, prompt: &[u32], max_new: usize, macs: &mut MacCount) -> Result<Vec<u32>, LmError> {
        if prompt.is_empty() {
            return Err(LmError::Empty("prompt"));
        }
        self.check_tokens(prompt)?;
        let vocab = self.config().vocab_size;
        let max_seq = self.config().max_seq;
        let mut ids = prompt.to_vec();
        for _ in 0..max_new {
            if ids.len() >= max_seq {
                break;
            }
            let (logits, m) = self.logits_counted(&ids)?;
            *macs += m;
            let last = &logits.data()[(ids.len() - 1) * vocab..];
            let next = argmax(last);
            ids.push(next as u32);
            if next as u32 == EOS {
                break;
            }
        }
        Ok(ids)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(
    b: &ModelBundle,
    adapters: Option<&LoraAdapters>,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>, LmError> {
    let model = Model::new(b, adapters)?;
    model.greedy(prompt, max_new, &mut MacCount::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, LmConfig};

    fn bundle() -> ModelBundle {
        init_model(&LmConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_seq: 20,
            ..LmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_new_tokens_returns_prompt() {
        let b = bundle();
        assert_eq!(greedy_decode(&b, None, &[257, 65], 0).unwrap(), vec![257, 65]);
    }

    #[test]
    fn deterministic_and_bounded() {
        let b = bundle();
        let a = greedy_decode(&b, None, &[257, 65, 66], 30).unwrap();
        let c = greedy_decode(&b, None, &[257, 65, 66], 30).unwrap();
        assert_eq!(a, c);
        assert!(a.len() <= 20);
    }

    #[test]
    fn errors() {
        let b = bundle();
        assert!(matches!(greedy_decode(&b, None, &[], 3), Err(LmError::Empty(_))));
        assert!(matches!(
            greedy_decode(&b, None, &[1; 21], 3),
            Err(LmError::Length { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
    }
}
