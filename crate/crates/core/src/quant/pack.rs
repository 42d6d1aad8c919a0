//! Two's-complement nibble packing for 4-bit codes. The even index goes in
//! the low nibble.

use super::QuantizeError;

pub fn pack4(codes: &[i8]) -> Result<Vec<u8>, QuantizeError> {
    if let Some((i, &c)) = codes.iter().enumerate().find(|(_, c)| !(-7..=7).contains(*c)) {
        return Err(QuantizeError::CodeOutOfRange { index: i, code: c });
    }
    Ok(codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 0x0f;
            let hi = pair.get(1).map_or(0, |c| *c as u8 & 0x0f);
            lo | (hi << 4)
        })
        .collect())
}

/// Unpacks `len` codes; a trailing pad nibble is ignored.
pub fn unpack4(bytes: &[u8], len: usize) -> Vec<i8> {
    bytes
        .iter()
        .flat_map(|b| [sign_extend(b & 0x0f), sign_extend(b >> 4)])
        .take(len)
        .collect()
}

fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}
