use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::DuplicatePolicy;
use crate::error::{Error, Result};
use crate::evalkit::BertScoreOptions;
use crate::gcn::GcnConfig;
use crate::profiler::{Instructions, ProfilerConfig};
use crate::retrieval::ContrastiveConfig;
use crate::retry::RetryPolicy;
use crate::template::{defaults, PromptTemplate};

use super::{check_generation_template, GeneratorSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub reviews: PathBuf,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub duplicates: DuplicatePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            reviews: PathBuf::from("reviews.jsonl"),
            train_fraction: 0.8,
            split_seed: 0,
            duplicates: DuplicatePolicy::Reject,
        }
    }
}

/// Template files; unset entries use the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatesConfig {
    pub summarize: Option<PathBuf>,
    pub aggregate_user: Option<PathBuf>,
    pub aggregate_item: Option<PathBuf>,
    pub generation: Option<PathBuf>,
    pub judge: Option<PathBuf>,
}

/// Loaded templates.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub instructions: Instructions,
    pub generation: PromptTemplate,
    pub judge: PromptTemplate,
}

fn load_or(path: &Option<PathBuf>, name: &str, builtin: &str) -> Result<PromptTemplate> {
    match path {
        Some(p) => PromptTemplate::load(p),
        None => Ok(PromptTemplate::parse(name, builtin)),
    }
}

impl TemplatesConfig {
    pub fn load(&self) -> Result<Templates> {
        let t = Templates {
            instructions: Instructions {
                summarize: load_or(&self.summarize, "summarize_reviews", defaults::SUMMARIZE_REVIEWS)?,
                aggregate_user: load_or(&self.aggregate_user, "aggregate_user", defaults::AGGREGATE_USER)?,
                aggregate_item: load_or(&self.aggregate_item, "aggregate_item", defaults::AGGREGATE_ITEM)?,
            },
            generation: load_or(&self.generation, "generation", defaults::GENERATION)?,
            judge: load_or(&self.judge, "judge", defaults::JUDGE)?,
        };
        check_generation_template(&t.generation)?;
        t.judge.require(&["reference", "candidate"])?;
        Ok(t)
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 5] {
        [
            &mut self.summarize,
            &mut self.aggregate_user,
            &mut self.aggregate_item,
            &mut self.generation,
            &mut self.judge,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnStageConfig {
    pub train: GcnConfig,
    /// Width of the generator's token embeddings.
    pub d_llm: usize,
    pub vocab_size: usize,
    pub max_target_tokens: usize,
    /// Seed of the frozen stand-in head used as the likelihood model.
    pub head_seed: u64,
}

impl Default for GcnStageConfig {
    fn default() -> Self {
        Self {
            train: GcnConfig::default(),
            d_llm: 64,
            vocab_size: 512,
            max_target_tokens: 16,
            head_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    /// Mean of the user's and the item's opinion embeddings.
    Latent,
    /// Embedded profile text through the adapter.
    #[default]
    Profile,
}

impl std::str::FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(QueryType::Latent),
            "profile" => Ok(QueryType::Profile),
            other => Err(Error::Config(format!("query type must be latent or profile, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub top_q: usize,
    pub query_type: QueryType,
    /// Train the adapter for profile queries; otherwise use the identity map.
    pub finetune_adapter: bool,
    pub contrastive: ContrastiveConfig,
    pub embed_batch_size: usize,
    pub search_threads: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_q: 8,
            query_type: QueryType::Profile,
            finetune_adapter: true,
            contrastive: ContrastiveConfig::default(),
            embed_batch_size: 64,
            search_threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub settings: GeneratorSettings,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            settings: GeneratorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub enabled: bool,
    pub judge: bool,
    pub bertscore: BertScoreOptions,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            judge: true,
            bertscore: BertScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortKind {
    /// Deterministic in-process ports.
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortsConfig {
    pub kind: PortKind,
    pub mock_seed: u64,
    pub mock_embedding_dim: usize,
    pub summarizer_url: Option<String>,
    pub summarizer_model: String,
    pub summarizer_budget_chars: usize,
    pub embedder_url: Option<String>,
    pub embedder_model: String,
    pub embedder_dim: usize,
    pub token_embedder_url: Option<String>,
    pub judge_url: Option<String>,
    pub generator_url: Option<String>,
    pub generator_model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for PortsConfig {
    fn default() -> Self {
        Self {
            kind: PortKind::Mock,
            mock_seed: 0,
            mock_embedding_dim: 64,
            summarizer_url: None,
            summarizer_model: "summarizer".into(),
            summarizer_budget_chars: 12_000,
            embedder_url: None,
            embedder_model: "embedder".into(),
            embedder_dim: 768,
            token_embedder_url: None,
            judge_url: None,
            generator_url: None,
            generator_model: "generator".into(),
            timeout_secs: 60,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dir: PathBuf,
    /// Evaluate at most this many test pairs (in split order).
    pub max_test_pairs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            max_test_pairs: None,
        }
    }
}

/// Settings of the external generator fine-tuning. Recorded for reference;
/// nothing in this crate trains the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmTrainingNotes {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LlmTrainingNotes {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            epochs: 2,
            batch_size: 12,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub templates: TemplatesConfig,
    pub gcn: GcnStageConfig,
    pub profiler: ProfilerConfig,
    pub retrieval: RetrievalConfig,
    pub generator: GeneratorConfig,
    pub evaluation: EvaluationConfig,
    pub ports: PortsConfig,
    pub run: RunConfig,
    pub llm_training: LlmTrainingNotes,
}

/// Parses the right-hand side of `--set key=value`: a TOML literal when it
/// parses as one, otherwise a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

/// Dotted keys present in `given` but absent from `known`.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let name = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &format!("{name}."), out),
            (_, Some(_)) => {}
            (_, None) => out.push(name),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML, applies `key=value` overrides, and rejects unknown keys.
    pub fn from_toml_str(source: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: PipelineConfig = table.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = toml::Table::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(config)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&source, overrides)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.reviews);
        fix(&mut self.run.dir);
        for p in self.templates.paths_mut().into_iter().flatten() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks ranges and that every referenced template exists and parses.
    pub fn validate(&self) -> Result<Templates> {
        crate::corpus::SplitSpec::new(self.data.train_fraction, self.data.split_seed)?;
        self.gcn.train.validate()?;
        if self.gcn.d_llm == 0 || self.gcn.vocab_size < 2 || self.gcn.max_target_tokens == 0 {
            return Err(Error::Config("gcn: d_llm, max_target_tokens must be >= 1 and vocab_size >= 2".into()));
        }
        self.profiler.validate()?;
        self.retrieval.contrastive.validate()?;
        if self.retrieval.top_q == 0 {
            return Err(Error::Config("retrieval.top_q must be at least 1".into()));
        }
        if self.retrieval.embed_batch_size == 0 || self.retrieval.search_threads == 0 {
            return Err(Error::Config("retrieval batch size and thread count must be at least 1".into()));
        }
        let g = &self.generator.settings;
        if !(g.temperature >= 0.0 && g.temperature.is_finite()) || g.max_tokens == 0 {
            return Err(Error::Config("generator: temperature must be >= 0 and max_tokens >= 1".into()));
        }
        if self.ports.max_in_flight == 0 {
            return Err(Error::Config("ports.max_in_flight must be at least 1".into()));
        }
        if self.ports.kind == PortKind::Http {
            let p = &self.ports;
            for (name, url) in [
                ("summarizer_url", &p.summarizer_url),
                ("embedder_url", &p.embedder_url),
                ("token_embedder_url", &p.token_embedder_url),
                ("generator_url", &p.generator_url),
            ] {
                if url.is_none() {
                    return Err(Error::Config(format!("ports.{name} is required for http ports")));
                }
            }
            if self.evaluation.judge && p.judge_url.is_none() {
                return Err(Error::Config("ports.judge_url is required when evaluation.judge is set".into()));
            }
        }
        self.templates.load()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.gcn.train.learning_rate, 1e-3);
        assert_eq!(c.gcn.train.batch_size, 1024);
        assert_eq!(c.retrieval.top_q, 8);
        assert_eq!(c.profiler.arity, 4);
        assert_eq!(c.generator.settings.temperature, 0.0);
        assert_eq!(c.generator.settings.max_tokens, 128);
        assert_eq!(c.retrieval.contrastive.temperature, 0.07);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let src = "[data]\nreviews = \"r.jsonl\"\n[retrieval]\ntop_q = 4\n";
        let c = PipelineConfig::from_toml_str(
            src,
            &[
                "retrieval.query_type=latent".into(),
                "gcn.train.epochs=3".into(),
                "run.dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.retrieval.top_q, 4);
        assert_eq!(c.retrieval.query_type, QueryType::Latent);
        assert_eq!(c.gcn.train.epochs, 3);
        assert_eq!(c.run.dir, PathBuf::from("out/x"));
        let again = PipelineConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = PipelineConfig::from_toml_str("[retrieval]\ntop_k = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("retrieval.top_k"), "{err}");
        assert!(PipelineConfig::from_toml_str("", &["profiler.arity".into()]).is_err());
        let c = PipelineConfig::from_toml_str("", &["profiler.arity=1".into()]).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_template_file_fails_validation() {
        let c = PipelineConfig::from_toml_str("[templates]\ngeneration = \"/nonexistent/gen.txt\"\n", &[]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\nreviews = \"r.jsonl\"\n").unwrap();
        let c = PipelineConfig::load(&path, &[]).unwrap();
        assert_eq!(c.data.reviews, dir.path().join("r.jsonl"));
        assert_eq!(c.run.dir, dir.path().join("run"));
    }
}
