//! Compression experiments for small byte-level language models.
//!
//! Quantize and prune a tiny transformer, fine-tune low-rank adapters on
//! top, meter the energy each step costs, score the generated text and
//! rank every candidate by a weighted blend of quality and energy saved.

pub mod meter;
pub mod metrics;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod rank;
pub mod tensors;
pub mod tinylm;
