//! Byte-level vocabulary: three special tokens followed by the 256 byte
//! values.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const N_SPECIAL: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + N_SPECIAL as usize;

pub const NEWLINE: u32 = b'\n' as u32 + N_SPECIAL;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(|b| b as u32 + N_SPECIAL).collect()
}

pub fn is_special(token: u32) -> bool {
    token < N_SPECIAL
}

/// Raw bytes of a token sequence, dropping special tokens.
pub fn detokenize_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| !is_special(t) && (t as usize) < VOCAB_SIZE)
        .map(|&t| (t - N_SPECIAL) as u8)
        .collect()
}

/// Decodes to text; invalid UTF-8 (possible in generated output) is
/// replaced with U+FFFD.
pub fn detokenize(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned()
}
