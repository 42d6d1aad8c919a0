use serde::{Deserialize, Serialize};

use super::{LmError, LoraAdapters, Model};
use crate::tensors::ModelBundle;

/// Multiply-accumulates counted while a forward pass runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// Projection matrices (attention and MLP).
    pub linear: u64,
    /// Score and value mixing inside attention.
    pub attention: u64,
    /// Output projection.
    pub head: u64,
    /// MACs whose weight operand is exactly zero.
    pub skipped: u64,
}

impl MacCount {
    pub fn macs(&self) -> u64 {
        self.linear + self.attention + self.head
    }

    pub fn skipped_macs(&self) -> u64 {
        self.skipped
    }
}

impl std::ops::AddAssign for MacCount {
    fn add_assign(&mut self, rhs: Self) {
        self.linear += rhs.linear;
        self.attention += rhs.attention;
        self.head += rhs.head;
        self.skipped += rhs.skipped;
    }
}

/// Runs an instrumented forward pass and returns its MAC tally.
pub fn count_flops_and_skipped(
    b: &ModelBundle,
    adapters: Option<&LoraAdapters>,
    tokens: &[u32],
) -> Result<MacCount, LmError> {
    let model = Model::new(b, adapters)?;
    Ok(model.logits_counted(tokens)?.1)
}
