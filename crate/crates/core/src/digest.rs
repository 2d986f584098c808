//! Content digests used for stage caching and provenance.
//!
//! A digest pairs a 64-bit FNV-1a fingerprint (cheap first-pass comparison)
//! with a SHA-256 hash (the authoritative identity).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentDigest {
    pub fast: u64,
    #[serde(with = "hex_bytes")]
    pub strong: [u8; 32],
}

impl ContentDigest {
    pub fn of(bytes: &[u8]) -> Self {
        let mut h = Hasher::new();
        h.update(bytes);
        h.finish()
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::of(&bytes))
    }

    /// Hex of the strong half only.
    pub fn hex(&self) -> String {
        hex::encode(self.strong)
    }

    /// Two-stage comparison: the fingerprint short-circuits mismatches.
    pub fn matches(&self, other: &ContentDigest) -> bool {
        self.fast == other.fast && self.strong == other.strong
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}:{}", self.fast, self.hex())
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({self})")
    }
}

/// Incremental hybrid hasher.
pub struct Hasher {
    fnv: u64,
    sha: Sha256,
}

impl Hasher {
    pub fn new() -> Self {
        Self {
            fnv: FNV_OFFSET,
            sha: Sha256::new(),
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.fnv ^= u64::from(b);
            self.fnv = self.fnv.wrapping_mul(FNV_PRIME);
        }
        self.sha.update(bytes);
    }

    /// Length-prefixed field, so that ("ab","c") and ("a","bc") differ.
    pub fn field(&mut self, bytes: &[u8]) {
        self.update(&(bytes.len() as u64).to_le_bytes());
        self.update(bytes);
    }

    pub fn str(&mut self, s: &str) {
        self.field(s.as_bytes());
    }

    pub fn finish(self) -> ContentDigest {
        ContentDigest {
            fast: self.fnv,
            strong: self.sha.finalize().into(),
        }
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic 64-bit seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Hasher::new();
    h.update(&base.to_le_bytes());
    h.str(label);
    let d = h.finish();
    u64::from_le_bytes(d.strong[..8].try_into().unwrap())
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_value() {
        // FNV-1a 64 of "a"
        assert_eq!(ContentDigest::of(b"a").fast, 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn fields_are_length_prefixed() {
        let mut a = Hasher::new();
        a.str("ab");
        a.str("c");
        let mut b = Hasher::new();
        b.str("a");
        b.str("bc");
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "user:a"), derive_seed(1, "item:a"));
        assert_eq!(derive_seed(1, "x"), derive_seed(1, "x"));
    }
}
