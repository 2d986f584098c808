//! Deterministic in-process implementations of every external port.
//!
//! They stand in for hosted models in tests, fixtures, and offline runs.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::digest::derive_seed;
use crate::error::PortError;
use crate::evalkit::{JudgePort, TokenEmbedderPort};
use crate::pipeline::{GeneratorPort, PromptBundle};
use crate::profiler::SummarizerPort;
use crate::retrieval::EmbedderPort;

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Text up to and including the first `.`, `!` or `?`; the whole trimmed
/// text when there is no terminator.
pub fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    match t.find(['.', '!', '?']) {
        Some(end) => &t[..=end],
        None => t,
    }
}

/// Summarizer returning the first sentence of each input joined by `"; "`.
#[derive(Debug, Clone)]
pub struct FirstSentenceSummarizer {
    pub budget_chars: usize,
}

impl Default for FirstSentenceSummarizer {
    fn default() -> Self {
        Self {
            budget_chars: 100_000,
        }
    }
}

impl SummarizerPort for FirstSentenceSummarizer {
    fn summarize(&self, _instruction: &str, inputs: &[String]) -> Result<String, PortError> {
        Ok(inputs
            .iter()
            .map(|t| first_sentence(t))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; "))
    }

    fn budget_chars(&self) -> usize {
        self.budget_chars
    }

    fn identity(&self) -> String {
        "mock/first-sentence".into()
    }
}

/// Summarizer keeping the `keep` most frequent words (ties by first
/// appearance), so repeated themes dominate the summary.
#[derive(Debug, Clone)]
pub struct FrequencySummarizer {
    pub keep: usize,
    pub budget_chars: usize,
}

impl Default for FrequencySummarizer {
    fn default() -> Self {
        Self {
            keep: 12,
            budget_chars: 100_000,
        }
    }
}

impl SummarizerPort for FrequencySummarizer {
    fn summarize(&self, _instruction: &str, inputs: &[String]) -> Result<String, PortError> {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for (pos, w) in inputs.iter().flat_map(|t| words(t)).enumerate() {
            counts.entry(w).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let mut kept: Vec<(String, (usize, usize))> = ranked.into_iter().take(self.keep).collect();
        // Repeat each kept word by its count so downstream embeddings keep
        // the frequency weighting.
        kept.sort_by_key(|(_, (_, first))| *first);
        Ok(kept
            .iter()
            .flat_map(|(w, (n, _))| std::iter::repeat_n(w.as_str(), *n))
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn budget_chars(&self) -> usize {
        self.budget_chars
    }

    fn identity(&self) -> String {
        format!("mock/frequency-{}", self.keep)
    }
}

/// Wraps a port and counts calls.
#[derive(Debug, Default)]
pub struct CallCounter<P> {
    pub inner: P,
    calls: AtomicUsize,
}

impl<P> CallCounter<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: SummarizerPort> SummarizerPort for CallCounter<P> {
    fn summarize(&self, instruction: &str, inputs: &[String]) -> Result<String, PortError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.summarize(instruction, inputs)
    }

    fn budget_chars(&self) -> usize {
        self.inner.budget_chars()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<P: EmbedderPort> EmbedderPort for CallCounter<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(texts)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

fn seeded_gaussian(seed: u64, label: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Bag-of-words embedder: the sum of a fixed pseudo-random Gaussian vector
/// per word. Texts sharing words land close together.
#[derive(Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    cache: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(word.to_string())
            .or_insert_with(|| seeded_gaussian(self.seed, word, self.dim))
            .clone()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            for (a, b) in v.iter_mut().zip(self.word_vector(&w)) {
                *a += b;
            }
        }
        v
    }
}

impl EmbedderPort for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("mock/hash-bow-{}-{}", self.dim, self.seed)
    }
}

/// Token embedder mapping each word to a fixed pseudo-random unit vector.
#[derive(Debug, Clone)]
pub struct HashTokenEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTokenEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TokenEmbedderPort for HashTokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>, PortError> {
        Ok(words(text)
            .iter()
            .map(|w| {
                let v = seeded_gaussian(self.seed, w, self.dim);
                let n = crate::linalg::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect())
    }

    fn identity(&self) -> String {
        format!("mock/hash-tokens-{}-{}", self.dim, self.seed)
    }
}

/// Judge scoring `min(|candidate| / |reference|, 1) · 100` in characters.
#[derive(Debug, Clone, Default)]
pub struct LengthRatioJudge;

impl JudgePort for LengthRatioJudge {
    fn judge(&self, _instruction: &str, reference: &str, candidate: &str) -> Result<f64, PortError> {
        let r = reference.chars().count().max(1) as f64;
        let c = candidate.chars().count() as f64;
        Ok((c / r).min(1.0) * 100.0)
    }

    fn identity(&self) -> String {
        "mock/length-ratio".into()
    }
}

/// Judge returning 100 for an exact match and the word-set Jaccard overlap
/// (×100) otherwise.
#[derive(Debug, Clone, Default)]
pub struct EchoJudge;

impl JudgePort for EchoJudge {
    fn judge(&self, _instruction: &str, reference: &str, candidate: &str) -> Result<f64, PortError> {
        if reference == candidate {
            return Ok(100.0);
        }
        let a: std::collections::BTreeSet<_> = words(reference).into_iter().collect();
        let b: std::collections::BTreeSet<_> = words(candidate).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(100.0 * a.intersection(&b).count() as f64 / union as f64)
    }

    fn identity(&self) -> String {
        "mock/echo-jaccard".into()
    }
}

/// Generator echoing the first retrieved opinion, or the item profile when
/// nothing was retrieved.
#[derive(Debug, Clone, Default)]
pub struct EchoGenerator;

impl GeneratorPort for EchoGenerator {
    fn generate(&self, bundle: &PromptBundle, _settings: &crate::pipeline::GeneratorSettings) -> Result<String, PortError> {
        Ok(bundle
            .retrieved
            .first()
            .map(|h| h.text.clone())
            .unwrap_or_else(|| bundle.item_profile.clone()))
    }

    fn identity(&self) -> String {
        "mock/echo-first-opinion".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_sentence_mock_example() {
        let s = FirstSentenceSummarizer::default()
            .summarize("", &["A good book. Long.".into(), "Fast shipping. Cheap.".into()])
            .unwrap();
        assert_eq!(s, "A good book.; Fast shipping.");
    }

    #[test]
    fn frequency_mock_keeps_dominant_words() {
        let s = FrequencySummarizer { keep: 1, budget_chars: 100 }
            .summarize("", &["beer beer food".into(), "beer view".into()])
            .unwrap();
        assert_eq!(s, "beer beer beer");
    }

    #[test]
    fn hash_embedder_is_deterministic_and_additive() {
        let e = HashEmbedder::new(8, 3);
        let a = e.embed_one("red apple");
        let b = HashEmbedder::new(8, 3).embed_one("apple red");
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(e.embed_one(""), vec![0.0; 8]);
    }

    #[test]
    fn token_embedder_yields_unit_vectors() {
        let toks = HashTokenEmbedder::new(16, 1).embed_tokens("one two, three").unwrap();
        assert_eq!(toks.len(), 3);
        for t in toks {
            assert!((crate::linalg::norm(&t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn judges() {
        assert_eq!(EchoJudge.judge("", "same text", "same text").unwrap(), 100.0);
        assert_eq!(LengthRatioJudge.judge("", "abcd", "ab").unwrap(), 50.0);
        assert_eq!(LengthRatioJudge.judge("", "ab", "abcdef").unwrap(), 100.0);
    }
}
