//! Deterministic synthetic corpora for tests, demos, and the acceptance run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DuplicatePolicy, Dataset, Review};
use crate::error::Result;

const ASPECTS: [&str; 10] = [
    "service", "price", "location", "breakfast", "staff", "noise", "portions", "decor", "coffee", "parking",
];
const QUALITIES: [&str; 8] = ["excellent", "friendly", "slow", "generous", "cramped", "spotless", "pricey", "cozy"];
const CATEGORIES: [&str; 5] = ["cafe", "hotel", "bistro", "bakery", "inn"];

/// Reviews of a small marketplace: `users` users each reviewing
/// `per_user` distinct items, every item reviewed equally often when
/// `users == items`. Texts and explanations are unique.
pub fn toy_reviews(users: usize, items: usize, per_user: usize, seed: u64) -> Vec<Review> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = (items / per_user.max(1)).max(1) | 1;
    let mut reviews = Vec::with_capacity(users * per_user);
    for u in 0..users {
        let taste = ASPECTS[u % ASPECTS.len()];
        for k in 0..per_user {
            let i = (u + k * stride) % items;
            let category = CATEGORIES[i % CATEGORIES.len()];
            let aspect = ASPECTS[rng.gen_range(0..ASPECTS.len())];
            let quality = QUALITIES[rng.gen_range(0..QUALITIES.len())];
            let id = reviews.len() as u64 + 1;
            reviews.push(Review {
                review_id: id,
                user_id: format!("user{u:02}"),
                item_id: format!("item{i:02}"),
                text: format!(
                    "The {taste} at this {category} was {quality}. Also the {aspect} felt {quality} on visit {id}."
                ),
                explanation: Some(format!(
                    "user{u:02} would enjoy item{i:02} for its {quality} {taste} and {aspect}"
                )),
            });
        }
    }
    reviews
}

/// The 50-user, 50-item, 200-review toy corpus.
pub fn toy_corpus() -> Dataset {
    Dataset::from_reviews(toy_reviews(50, 50, 4, 11), DuplicatePolicy::Reject).expect("toy corpus is valid")
}

pub fn write_toy_corpus(path: &Path) -> Result<()> {
    toy_corpus().write_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteredOpinion {
    pub id: String,
    pub user_id: String,
    pub item_id: String,
    pub cluster: usize,
    pub text: String,
}

/// A user-item pair whose profiles describe one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteredPair {
    pub user_id: String,
    pub item_id: String,
    pub cluster: usize,
    pub user_profile: String,
    pub item_profile: String,
    /// Text of an opinion from the same cluster.
    pub positive: String,
}

/// Opinions drawn from labeled topic clusters. Profiles use a vocabulary
/// disjoint from the opinions', so a bag-of-words embedder alone cannot
/// match a profile to its cluster; users and items hold opinions from
/// every cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteredCorpus {
    pub clusters: usize,
    pub opinions: Vec<ClusteredOpinion>,
    /// `per_cluster_pairs` pairs per cluster, cluster-major.
    pub pairs: Vec<ClusteredPair>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub opinions_per_cluster: usize,
    pub pairs_per_cluster: usize,
    pub users: usize,
    pub items: usize,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            opinions_per_cluster: 24,
            pairs_per_cluster: 8,
            users: 32,
            items: 32,
            seed: 5,
        }
    }
}

fn pick_words(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> Vec<String> {
    vocab.choose_multiple(rng, n).cloned().collect()
}

pub fn clustered_corpus(spec: ClusterSpec) -> ClusteredCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let opinion_vocab = |c: usize| (0..8).map(|j| format!("topic{c}word{j}")).collect::<Vec<_>>();
    let profile_vocab = |c: usize| (0..8).map(|j| format!("theme{c}term{j}")).collect::<Vec<_>>();
    let filler: Vec<String> = (0..24).map(|j| format!("filler{j}")).collect();

    let mut opinions = Vec::new();
    let mut by_cluster: Vec<Vec<String>> = vec![Vec::new(); spec.clusters];
    for (c, texts) in by_cluster.iter_mut().enumerate() {
        let vocab = opinion_vocab(c);
        for _ in 0..spec.opinions_per_cluster {
            let mut words = pick_words(&mut rng, &vocab, 4);
            words.extend(pick_words(&mut rng, &filler, 3));
            words.shuffle(&mut rng);
            let text = words.join(" ");
            texts.push(text.clone());
            opinions.push(ClusteredOpinion {
                id: format!("op{:04}", opinions.len()),
                user_id: format!("cu{}", rng.gen_range(0..spec.users)),
                item_id: format!("ci{}", rng.gen_range(0..spec.items)),
                cluster: c,
                text,
            });
        }
    }

    let mut pairs = Vec::new();
    for (c, texts) in by_cluster.iter().enumerate() {
        let vocab = profile_vocab(c);
        for _ in 0..spec.pairs_per_cluster {
            let mut user = pick_words(&mut rng, &vocab, 4);
            user.extend(pick_words(&mut rng, &filler, 2));
            let mut item = pick_words(&mut rng, &vocab, 4);
            item.extend(pick_words(&mut rng, &filler, 2));
            pairs.push(ClusteredPair {
                user_id: format!("cu{}", rng.gen_range(0..spec.users)),
                item_id: format!("ci{}", rng.gen_range(0..spec.items)),
                cluster: c,
                user_profile: user.join(" "),
                item_profile: item.join(" "),
                positive: texts.choose(&mut rng).expect("cluster has opinions").clone(),
            });
        }
    }
    ClusteredCorpus {
        clusters: spec.clusters,
        opinions,
        pairs,
    }
}
