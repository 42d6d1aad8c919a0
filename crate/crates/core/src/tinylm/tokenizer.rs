//! Byte-level tokenizer: ids 0..=255 are raw bytes, then pad/bos/eos.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte separating a prompt from its completion.
pub const SEPARATOR: u8 = b'\n';

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte ids, dropping special tokens. Invalid UTF-8 is replaced.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|i| **i < 256).map(|i| *i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `[BOS] prompt SEPARATOR`
pub fn encode_prompt(prompt: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(prompt.len() + 2);
    ids.push(BOS);
    ids.extend(encode(prompt));
    ids.push(u32::from(SEPARATOR));
    ids
}

/// `reference [EOS]`
pub fn encode_completion(reference: &str) -> Vec<u32> {
    let mut ids = encode(reference);
    ids.push(EOS);
    ids
}

/// Token count of a record as fed to the model.
pub fn record_len(prompt: &str, reference: &str) -> usize {
    prompt.len() + reference.len() + 3
}
