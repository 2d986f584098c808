//! User and item profiling by hierarchical aggregation of reviews.
//!
//! Reviews of one subject are shuffled into the leaves of a k-ary tree.
//! Every group of `k` consecutive leaves is summarized once; summaries are
//! then grouped and summarized again, level by level, until one root text
//! remains. That root is the subject's profile.

mod tree;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tree::{AggregationTree, TreeNode};

use crate::corpus::{Dataset, Review};
use crate::digest::{derive_seed, Hasher};
use crate::error::{Error, PortError, Result};
use crate::retry::RetryPolicy;
use crate::template::{defaults, PromptTemplate};

/// A text summarizer, usually an LLM endpoint.
pub trait SummarizerPort: Send + Sync {
    fn summarize(&self, instruction: &str, inputs: &[String]) -> Result<String, PortError>;

    /// Maximum total input size per call, in characters.
    fn budget_chars(&self) -> usize;

    /// Model name and version, recorded in provenance digests.
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    User,
    Item,
}

impl SubjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubjectKind::User => "user",
            SubjectKind::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileMode {
    Hierarchical,
    /// One call over `n` seed-sampled reviews.
    RandomSample { n: usize },
    /// One call over every review; fails if they exceed the budget.
    Direct,
    /// The root's children, concatenated, without the final merge.
    SecondLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    pub arity: usize,
    pub seed: u64,
    pub mode: ProfileMode,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    /// Append the item's profile to each review when building user profiles.
    pub include_item_profiles: bool,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            arity: 4,
            seed: 0,
            mode: ProfileMode::Hierarchical,
            max_concurrency: 4,
            retry: RetryPolicy::default(),
            include_item_profiles: false,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arity < 2 {
            return Err(Error::Config(format!("arity must be at least 2, got {}", self.arity)));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        if let ProfileMode::RandomSample { n: 0 } = self.mode {
            return Err(Error::Config("random_sample needs n >= 1".into()));
        }
        Ok(())
    }
}

/// Instruction prompts sent with each summarizer call.
#[derive(Debug, Clone, PartialEq)]
pub struct Instructions {
    /// Raw reviews to opinions (tree level 0 and per-review opinions).
    pub summarize: PromptTemplate,
    pub aggregate_user: PromptTemplate,
    pub aggregate_item: PromptTemplate,
}

impl Default for Instructions {
    fn default() -> Self {
        Self {
            summarize: PromptTemplate::parse("summarize_reviews", defaults::SUMMARIZE_REVIEWS),
            aggregate_user: PromptTemplate::parse("aggregate_user", defaults::AGGREGATE_USER),
            aggregate_item: PromptTemplate::parse("aggregate_item", defaults::AGGREGATE_ITEM),
        }
    }
}

impl Instructions {
    /// Renders the template for a tree level; `{subject_kind}` and
    /// `{subject_id}` are available as placeholders.
    fn render(&self, level: usize, kind: SubjectKind, subject_id: &str) -> Result<String> {
        let template = match (level, kind) {
            (0, _) => &self.summarize,
            (_, SubjectKind::User) => &self.aggregate_user,
            (_, SubjectKind::Item) => &self.aggregate_item,
        };
        let vars = BTreeMap::from([
            ("subject_kind", kind.as_str().to_string()),
            ("subject_id", subject_id.to_string()),
        ]);
        template.render(&vars)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSummary {
    pub text: String,
    /// False when a singleton was promoted without a call.
    pub called: bool,
}

fn clip_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((end, _)) => text[..end].to_string(),
        None => text.to_string(),
    }
}

/// Summarizes one group of texts. Each input is clipped to
/// `budget / |texts|` characters first. A singleton is returned unchanged
/// when `promote_singleton` is set.
pub fn summarize_group(
    summarizer: &dyn SummarizerPort,
    texts: &[String],
    instruction: &str,
    promote_singleton: bool,
    retry: &RetryPolicy,
) -> Result<GroupSummary> {
    if texts.is_empty() {
        return Err(Error::Config("cannot summarize an empty group".into()));
    }
    if promote_singleton && texts.len() == 1 {
        return Ok(GroupSummary {
            text: texts[0].clone(),
            called: false,
        });
    }
    let share = summarizer.budget_chars() / texts.len();
    let inputs: Vec<String> = texts.iter().map(|t| clip_chars(t, share)).collect();

    let mut attempts = 0;
    loop {
        attempts += 1;
        let retry_left = attempts <= retry.max_retries;
        match summarizer.summarize(instruction, &inputs) {
            Ok(s) if !s.trim().is_empty() => {
                return Ok(GroupSummary {
                    text: s,
                    called: true,
                })
            }
            Ok(_) if !retry_left => return Err(Error::EmptySummary),
            Err(e) if !(e.is_retryable() && retry_left) => {
                return Err(Error::Port {
                    port: "summarizer",
                    attempts,
                    source: e,
                })
            }
            _ => {
                let delay = retry.delay_for(attempts - 1);
                log::warn!("summarizer attempt {attempts} failed; retrying in {delay:?}");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
            }
        }
    }
}

/// Runs `jobs` on up to `workers` threads. Output order follows job order,
/// and the first failing job (by index) determines the error.
pub(crate) fn run_parallel<T: Send>(
    jobs: usize,
    workers: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, jobs.max(1));
    if workers == 1 {
        return (0..jobs).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..jobs).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if k >= jobs {
                    break;
                }
                let r = job(k);
                results.lock().unwrap()[k] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

/// A raw review placed in a tree leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    pub review_id: u64,
    pub text: String,
}

impl From<&Review> for Leaf {
    fn from(r: &Review) -> Self {
        Self {
            review_id: r.review_id,
            text: r.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: SubjectKind,
    pub id: String,
    pub text: String,
    /// Hex SHA-256 over the tree (or sample) and the summarizer identity.
    pub tree_digest: String,
    pub calls: u32,
}

/// Level-0 summary of a single review; the unit indexed for retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opinion {
    pub review_id: u64,
    pub opinion: String,
}

pub struct Profiler<'a> {
    summarizer: &'a dyn SummarizerPort,
    config: ProfilerConfig,
    instructions: Instructions,
}

impl<'a> Profiler<'a> {
    pub fn new(summarizer: &'a dyn SummarizerPort, config: ProfilerConfig) -> Result<Self> {
        Self::with_instructions(summarizer, config, Instructions::default())
    }

    pub fn with_instructions(
        summarizer: &'a dyn SummarizerPort,
        config: ProfilerConfig,
        instructions: Instructions,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            summarizer,
            config,
            instructions,
        })
    }

    pub fn config(&self) -> &ProfilerConfig {
        &self.config
    }

    fn subject_seed(&self, kind: SubjectKind, id: &str) -> u64 {
        derive_seed(self.config.seed, &format!("{}:{id}", kind.as_str()))
    }

    /// Builds the full tree over `leaves`, shuffled once with `seed`.
    pub fn build_tree(&self, leaves: &[Leaf], kind: SubjectKind, subject_id: &str, seed: u64) -> Result<AggregationTree> {
        self.build_levels(leaves, kind, subject_id, seed, false)
    }

    fn build_levels(
        &self,
        leaves: &[Leaf],
        kind: SubjectKind,
        subject_id: &str,
        seed: u64,
        stop_below_root: bool,
    ) -> Result<AggregationTree> {
        if leaves.is_empty() {
            return Err(Error::Config(format!("{} {subject_id} has no reviews", kind.as_str())));
        }
        let k = self.config.arity;
        let mut shuffled = leaves.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let mut levels = vec![shuffled
            .into_iter()
            .map(|l| TreeNode {
                children: Vec::new(),
                text: l.text,
                review_id: Some(l.review_id),
                called: false,
            })
            .collect::<Vec<_>>()];
        let mut calls = 0u32;
        loop {
            let below = levels.len() - 1;
            let current = &levels[below];
            if below > 0 && (current.len() == 1 || (stop_below_root && current.len() <= k)) {
                break;
            }
            let instruction = self.instructions.render(below, kind, subject_id)?;
            let groups = current.len().div_ceil(k);
            let promote = below > 0;
            let nodes = run_parallel(groups, self.config.max_concurrency, |g| {
                let children: Vec<usize> = (g * k..((g + 1) * k).min(current.len())).collect();
                let texts: Vec<String> = children.iter().map(|&c| current[c].text.clone()).collect();
                let summary = summarize_group(self.summarizer, &texts, &instruction, promote, &self.config.retry)?;
                Ok(TreeNode {
                    children,
                    text: summary.text,
                    review_id: None,
                    called: summary.called,
                })
            })?;
            calls += nodes.iter().filter(|n| n.called).count() as u32;
            levels.push(nodes);
        }
        Ok(AggregationTree {
            arity: k,
            levels,
            calls,
        })
    }

    fn finish(&self, kind: SubjectKind, id: &str, text: String, digest: String, calls: u32) -> Profile {
        Profile {
            kind,
            id: id.to_string(),
            text,
            tree_digest: digest,
            calls,
        }
    }

    fn profile_from_leaves(&self, kind: SubjectKind, id: &str, leaves: &[Leaf]) -> Result<Profile> {
        let seed = self.subject_seed(kind, id);
        let identity = self.summarizer.identity();
        match self.config.mode {
            ProfileMode::Hierarchical => {
                let tree = self.build_tree(leaves, kind, id, seed)?;
                let digest = tree.digest(&identity);
                Ok(self.finish(kind, id, tree.root().text.clone(), digest, tree.calls))
            }
            ProfileMode::SecondLayer => {
                let tree = self.build_levels(leaves, kind, id, seed, true)?;
                let text = tree
                    .levels
                    .last()
                    .unwrap()
                    .iter()
                    .map(|n| n.text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
                let digest = tree.digest(&identity);
                Ok(self.finish(kind, id, text, digest, tree.calls))
            }
            ProfileMode::RandomSample { n } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sample: Vec<&Leaf> = leaves.choose_multiple(&mut rng, n.min(leaves.len())).collect();
                let texts: Vec<String> = sample.iter().map(|l| l.text.clone()).collect();
                let instruction = self.instructions.render(1, kind, id)?;
                let s = summarize_group(self.summarizer, &texts, &instruction, false, &self.config.retry)?;
                let digest = flat_digest("random_sample", &identity, &sample, &s.text);
                Ok(self.finish(kind, id, s.text, digest, 1))
            }
            ProfileMode::Direct => {
                let needed: usize = leaves.iter().map(|l| l.text.chars().count()).sum();
                let budget = self.summarizer.budget_chars();
                if needed > budget {
                    return Err(Error::BudgetOverflow { needed, budget });
                }
                let texts: Vec<String> = leaves.iter().map(|l| l.text.clone()).collect();
                let instruction = self.instructions.render(1, kind, id)?;
                let s = summarize_group(self.summarizer, &texts, &instruction, false, &self.config.retry)?;
                let all: Vec<&Leaf> = leaves.iter().collect();
                let digest = flat_digest("direct", &identity, &all, &s.text);
                Ok(self.finish(kind, id, s.text, digest, 1))
            }
        }
    }

    pub fn user_profile(&self, dataset: &Dataset, user_id: &str) -> Result<Profile> {
        let leaves: Vec<Leaf> = dataset
            .user_reviews(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?
            .map(Leaf::from)
            .collect();
        self.profile_from_leaves(SubjectKind::User, user_id, &leaves)
    }

    /// User profile whose leaves also carry the profile of the reviewed item.
    pub fn user_profile_with_items(
        &self,
        dataset: &Dataset,
        user_id: &str,
        item_profiles: &BTreeMap<String, String>,
    ) -> Result<Profile> {
        let leaves: Vec<Leaf> = dataset
            .user_reviews(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?
            .map(|r| {
                let mut leaf = Leaf::from(r);
                if let Some(p) = item_profiles.get(&r.item_id) {
                    leaf.text = format!("{}\nItem description: {p}", leaf.text);
                }
                leaf
            })
            .collect();
        self.profile_from_leaves(SubjectKind::User, user_id, &leaves)
    }

    pub fn item_profile(&self, dataset: &Dataset, item_id: &str) -> Result<Profile> {
        let leaves: Vec<Leaf> = dataset
            .item_reviews(item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?
            .map(Leaf::from)
            .collect();
        self.profile_from_leaves(SubjectKind::Item, item_id, &leaves)
    }

    /// One summarizer call per review, run concurrently.
    pub fn extract_opinions(&self, reviews: &[Review]) -> Result<Vec<Opinion>> {
        let instruction = self.instructions.render(0, SubjectKind::Item, "")?;
        run_parallel(reviews.len(), self.config.max_concurrency, |k| {
            let r = &reviews[k];
            let s = summarize_group(
                self.summarizer,
                std::slice::from_ref(&r.text),
                &instruction,
                false,
                &self.config.retry,
            )?;
            Ok(Opinion {
                review_id: r.review_id,
                opinion: s.text,
            })
        })
    }
}

fn flat_digest(mode: &str, identity: &str, leaves: &[&Leaf], text: &str) -> String {
    let mut h = Hasher::new();
    h.str(mode);
    h.str(identity);
    for l in leaves {
        h.update(&l.review_id.to_le_bytes());
        h.str(&l.text);
    }
    h.str(text);
    h.finish().hex()
}

pub fn build_user_profile(
    dataset: &Dataset,
    user_id: &str,
    summarizer: &dyn SummarizerPort,
    config: &ProfilerConfig,
) -> Result<Profile> {
    Profiler::new(summarizer, config.clone())?.user_profile(dataset, user_id)
}

pub fn build_item_profile(
    dataset: &Dataset,
    item_id: &str,
    summarizer: &dyn SummarizerPort,
    config: &ProfilerConfig,
) -> Result<Profile> {
    Profiler::new(summarizer, config.clone())?.item_profile(dataset, item_id)
}

/// Baseline profiling modes; `config.mode` must not be hierarchical.
pub fn profile_ablation(
    dataset: &Dataset,
    kind: SubjectKind,
    subject_id: &str,
    summarizer: &dyn SummarizerPort,
    config: &ProfilerConfig,
) -> Result<Profile> {
    if config.mode == ProfileMode::Hierarchical {
        return Err(Error::Config("profile_ablation needs a non-hierarchical mode".into()));
    }
    let p = Profiler::new(summarizer, config.clone())?;
    match kind {
        SubjectKind::User => p.user_profile(dataset, subject_id),
        SubjectKind::Item => p.item_profile(dataset, subject_id),
    }
}

/// Summarizer behind an HTTP endpoint: `{"instruction","inputs"}` in,
/// `{"summary": string}` out.
#[derive(Debug, Clone)]
pub struct HttpSummarizer {
    endpoint: crate::http::HttpEndpoint,
    model: String,
    budget_chars: usize,
}

impl HttpSummarizer {
    pub fn new(url: &str, model: &str, budget_chars: usize, timeout: std::time::Duration) -> Result<Self, PortError> {
        Ok(Self {
            endpoint: crate::http::HttpEndpoint::new(url, timeout)?,
            model: model.to_string(),
            budget_chars,
        })
    }
}

impl SummarizerPort for HttpSummarizer {
    fn summarize(&self, instruction: &str, inputs: &[String]) -> Result<String, PortError> {
        let resp = self.endpoint.post(&serde_json::json!({
            "instruction": instruction,
            "inputs": inputs,
        }))?;
        crate::http::string_field(&resp, "summary")
    }

    fn budget_chars(&self) -> usize {
        self.budget_chars
    }

    fn identity(&self) -> String {
        format!("http/{}@{}", self.model, self.endpoint.url())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_profiles(path: &Path, profiles: &[Profile]) -> Result<()> {
    write_jsonl(path, profiles)
}

pub fn read_profiles(path: &Path) -> Result<Vec<Profile>> {
    read_jsonl(path)
}

pub fn write_opinions(path: &Path, opinions: &[Opinion]) -> Result<()> {
    write_jsonl(path, opinions)
}

pub fn read_opinions(path: &Path) -> Result<Vec<Opinion>> {
    read_jsonl(path)
}
