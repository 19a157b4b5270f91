//! Trainable desk-scale text encoders.
//!
//! Text is lowercased, split on runs of non-alphanumeric characters and each
//! token is hashed into one of `V` buckets. A bi-encoder embeds text as the
//! mean of its bucket rows; the cross-encoder applies a dropout-regularised
//! two-layer linear head to a joint query/document encoding.

mod checkpoint;
mod cross;
mod model;

pub use checkpoint::{
    read_cross_checkpoint, read_encoder_checkpoint, write_cross_checkpoint,
    write_encoder_checkpoint, CROSS_MAGIC, ENCODER_MAGIC,
};
pub use cross::{CrossEncoderModel, CrossForward, ScoreMode};
pub use model::{EncoderConfig, EncoderModel, Vector};
pub(crate) use model::l2_distance as l2;

use crate::hashing::fnv1a64;
use serde::{Deserialize, Serialize};

/// Maximum number of tokens kept per side of a cross-encoder input.
pub const MAX_SIDE_TOKENS: usize = 512;

/// Hash bucket of a token. Bucket 0 is reserved for the query/document separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

/// Separator between query and document in the joint cross-encoder input.
pub const SEPARATOR: TokenId = TokenId(0);

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Lowercased alphanumeric word tokens. Shared by every lexical scorer in the crate.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Maps a single normalized word to its bucket in `[1, buckets)`.
pub fn hash_word(word: &str, buckets: u32, seed: u64) -> TokenId {
    debug_assert!(buckets >= 2);
    let h = fnv1a64(word.as_bytes(), seed);
    TokenId(1 + (h % u64::from(buckets - 1)) as u32)
}

/// Tokenize `text` into hashed bucket ids.
pub fn tokenize(text: &str, buckets: u32, seed: u64) -> Vec<TokenId> {
    words(text)
        .iter()
        .map(|w| hash_word(w, buckets, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_and_case_normalize() {
        let ids = tokenize("Tacos, tacos!", 1024, 0);
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("", 1024, 0).is_empty());
        assert!(tokenize("  ,.;! ", 1024, 0).is_empty());
    }

    #[test]
    fn fixture_sentence_token_count() {
        // Hand segmentation: we | loved | the | al | pastor | 2 | nights | in | a | row
        let w = words("We loved the al-pastor... 2 nights in a row!");
        assert_eq!(
            w,
            ["we", "loved", "the", "al", "pastor", "2", "nights", "in", "a", "row"]
        );
        assert_eq!(tokenize("We loved the al-pastor... 2 nights in a row!", 4096, 3).len(), 10);
    }

    #[test]
    fn separator_bucket_never_produced() {
        for i in 0..5000 {
            let id = hash_word(&format!("w{i}"), 1024, 11);
            assert_ne!(id, SEPARATOR);
            assert!(id.0 < 1024);
        }
    }

    #[test]
    fn unicode_words_lowercase() {
        assert_eq!(words("Crème BRÛLÉE"), ["crème", "brûlée"]);
    }

    /// Golden values computed independently with a Python FNV-1a implementation
    /// (offset basis XOR seed, bucket = 1 + h mod (V - 1)).
    #[test]
    fn hashing_is_stable_golden() {
        let toks: Vec<String> = (0..100).map(|i| format!("tok{i}")).collect();
        let ids: Vec<u32> = toks.iter().map(|t| hash_word(t, 262_144, 42).0).collect();
        let checksum: u64 = ids
            .iter()
            .enumerate()
            .map(|(i, &b)| (i as u64 + 1) * u64::from(b))
            .sum();
        assert_eq!(&ids[..5], &GOLDEN_FIRST5);
        assert_eq!(checksum, GOLDEN_CHECKSUM);
    }

    const GOLDEN_FIRST5: [u32; 5] = [66820, 66369, 65918, 65467, 68624];
    const GOLDEN_CHECKSUM: u64 = 665_474_275;
}
