/// FNV-1a, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashes whitespace-split words into `0..vocab`, keeping at most `max_len`
/// tokens. Empty text yields a single id so every segment is non-empty.
pub fn tokenize(text: &str, vocab: usize, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .take(max_len)
        .map(|w| (fnv1a(w.as_bytes()) % vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        ids.push((fnv1a(b"") % vocab as u64) as usize);
    }
    ids
}
