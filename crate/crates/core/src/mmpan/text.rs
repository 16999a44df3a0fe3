//! Deterministic character-trigram word embeddings.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing of the character trigrams of `<word>`, L2
/// normalised. Words shorter than one trigram after padding map to zero.
pub fn embed_word(word: &str, dim: usize) -> Vec<f32> {
    let mut acc = vec![0f64; dim];
    if dim == 0 || word.is_empty() {
        return vec![0.0; dim];
    }
    let padded: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut buf = String::new();
    for tri in padded.windows(3) {
        buf.clear();
        buf.extend(tri);
        let h = fnv1a(buf.as_bytes());
        let sign = if h.is_multiple_of(2) { 1.0 } else { -1.0 };
        acc[(h % dim as u64) as usize] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter().map(|v| (v / norm) as f32).collect()
    } else {
        vec![0.0; dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_word_is_zero() {
        assert_eq!(embed_word("", 16), vec![0.0; 16]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), FNV_OFFSET);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn single_char_word_has_one_trigram() {
        let v = embed_word("a", 8);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        let h = fnv1a(b"<a>");
        let expected = if h % 2 == 0 { 1.0 } else { -1.0 };
        assert_eq!(v[(h % 8) as usize], expected);
    }
}
