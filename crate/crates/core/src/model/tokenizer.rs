/// 256 byte values plus one padding id.
pub const VOCAB_SIZE: usize = 257;
pub const PAD_ID: usize = 256;

pub fn byte_tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`byte_tokenize`]; padding and out-of-range ids are dropped.
pub fn byte_detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}
