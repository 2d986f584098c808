//! Hashing word tokenizer for the collaborative-branch training targets.

use crate::digest::derive_seed;
use crate::mock::words;

/// Maps lowercased words to ids in `1..vocab`; id 0 is never produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    pub vocab: usize,
    pub max_tokens: usize,
}

impl HashTokenizer {
    pub fn new(vocab: usize, max_tokens: usize) -> Self {
        assert!(vocab >= 2, "vocabulary needs at least two ids");
        Self { vocab, max_tokens }
    }

    pub fn token(&self, word: &str) -> u32 {
        (1 + derive_seed(0, word) % (self.vocab as u64 - 1)) as u32
    }

    /// At most `max_tokens` ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).iter().take(self.max_tokens).map(|w| self.token(w)).collect()
    }
}
