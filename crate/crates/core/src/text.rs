//! Token normalization shared by search, TTR, the hash embedder and the bigram scorer.

/// Lowercases `text` and splits it on every non-alphanumeric character.
///
/// No stemming, no stop words. Empty fragments are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a. Stable across platforms and toolchain versions, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Men's Low-height BOOTS, size 10"),
            vec!["men", "s", "low", "height", "boots", "size", "10"]
        );
    }

    #[test]
    fn whitespace_only_yields_nothing() {
        assert!(tokenize("  \t -- ").is_empty());
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
