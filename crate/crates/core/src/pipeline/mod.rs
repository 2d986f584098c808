//! Prompt assembly, the generator port, and the staged end-to-end run.

mod config;
mod run;
pub mod tokenize;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    DataConfig, EvaluationConfig, GcnStageConfig, GeneratorConfig, LlmTrainingNotes, PipelineConfig, PortKind,
    PortsConfig, QueryType, RetrievalConfig, RunConfig, TemplatesConfig,
};
pub use run::{
    check_leakage, ground_truth, run_pipeline, run_pipeline_with, Ports, RetrievalRecord, RunManifest, Stage, StageRecord,
    StageStatus, MANIFEST_FILE,
};

use crate::error::{Error, PortError, Result};
use crate::http::{string_field, HttpEndpoint};
use crate::retry::RetryPolicy;
use crate::template::PromptTemplate;

pub const USER_MARKER: &str = "<USER_EMBED>";
pub const ITEM_MARKER: &str = "<ITEM_EMBED>";

/// Placeholders every generation template must contain.
pub const GENERATION_SLOTS: [&str; 3] = ["user_profile", "item_profile", "retrieved_reviews"];

/// A retrieved opinion as listed in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedOpinion {
    pub id: String,
    pub text: String,
    pub score: f64,
}

/// Rendered prompt plus the collaborative embeddings that replace its two
/// marker tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub user_id: String,
    pub item_id: String,
    pub template: String,
    pub text: String,
    pub user_profile: String,
    pub item_profile: String,
    pub retrieved: Vec<RetrievedOpinion>,
    /// Vector for [`USER_MARKER`].
    pub user_embedding: Vec<f64>,
    /// Vector for [`ITEM_MARKER`].
    pub item_embedding: Vec<f64>,
}

/// Inputs for one user-item pair.
#[derive(Debug, Clone, Copy)]
pub struct PairContext<'a> {
    pub user_id: &'a str,
    pub item_id: &'a str,
    pub user_profile: &'a str,
    pub item_profile: &'a str,
    pub retrieved: &'a [RetrievedOpinion],
    pub user_embedding: &'a [f64],
    pub item_embedding: &'a [f64],
}

/// Checks that a generation template has every slot and each marker once.
pub fn check_generation_template(template: &PromptTemplate) -> Result<()> {
    template.require(&GENERATION_SLOTS)?;
    for marker in [USER_MARKER, ITEM_MARKER] {
        let n = template.source().matches(marker).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "{}: {marker} must appear exactly once, found {n}",
                template.name()
            )));
        }
    }
    Ok(())
}

/// Numbered list in descending score order (stable for equal scores).
pub fn format_retrieved(retrieved: &[RetrievedOpinion]) -> String {
    if retrieved.is_empty() {
        return "(none)".into();
    }
    let mut sorted: Vec<&RetrievedOpinion> = retrieved.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    sorted
        .iter()
        .enumerate()
        .map(|(k, r)| format!("{}. {}", k + 1, r.text.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble_prompt(ctx: PairContext<'_>, template: &PromptTemplate) -> Result<PromptBundle> {
    check_generation_template(template)?;
    if ctx.user_embedding.is_empty() || ctx.user_embedding.len() != ctx.item_embedding.len() {
        return Err(Error::Shape(format!(
            "sidecar widths {} and {} must be equal and non-zero",
            ctx.user_embedding.len(),
            ctx.item_embedding.len()
        )));
    }
    let vars = BTreeMap::from([
        ("user_profile", ctx.user_profile.to_string()),
        ("item_profile", ctx.item_profile.to_string()),
        ("retrieved_reviews", format_retrieved(ctx.retrieved)),
    ]);
    let text = template.render(&vars)?;
    // Profiles or opinions could smuggle in marker text.
    for marker in [USER_MARKER, ITEM_MARKER] {
        let n = text.matches(marker).count();
        if n != 1 {
            return Err(Error::Template(format!("rendered prompt contains {marker} {n} times")));
        }
    }
    let mut retrieved = ctx.retrieved.to_vec();
    retrieved.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(PromptBundle {
        user_id: ctx.user_id.to_string(),
        item_id: ctx.item_id.to_string(),
        template: template.name().to_string(),
        text,
        user_profile: ctx.user_profile.to_string(),
        item_profile: ctx.item_profile.to_string(),
        retrieved,
        user_embedding: ctx.user_embedding.to_vec(),
        item_embedding: ctx.item_embedding.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 128,
        }
    }
}

/// The explanation generator, usually a fine-tuned LLM endpoint.
pub trait GeneratorPort: Send + Sync {
    fn generate(&self, bundle: &PromptBundle, settings: &GeneratorSettings) -> Result<String, PortError>;

    fn identity(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub latency_ms: f64,
}

/// Returns the generator output verbatim. Failures carry the pair they
/// were generating for.
pub fn generate(
    generator: &dyn GeneratorPort,
    bundle: &PromptBundle,
    settings: &GeneratorSettings,
    retry: &RetryPolicy,
) -> Result<Generation> {
    let stage = || format!("generate[{}/{}]", bundle.user_id, bundle.item_id);
    let start = Instant::now();
    let text = retry
        .run("generator", || generator.generate(bundle, settings))
        .map_err(|e| Error::Stage {
            stage: stage(),
            source: Box::new(e),
        })?;
    if text.trim().is_empty() {
        return Err(Error::Stage {
            stage: stage(),
            source: Box::new(Error::EmptyGeneration),
        });
    }
    Ok(Generation {
        text,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Generator behind an HTTP endpoint. Request:
/// `{"prompt","user_embedding","item_embedding","temperature","max_tokens"}`;
/// response `{"text": string}`.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    endpoint: HttpEndpoint,
    model: String,
}

impl HttpGenerator {
    pub fn new(url: &str, model: &str, timeout: Duration) -> Result<Self, PortError> {
        Ok(Self {
            endpoint: HttpEndpoint::new(url, timeout)?,
            model: model.to_string(),
        })
    }
}

impl GeneratorPort for HttpGenerator {
    fn generate(&self, bundle: &PromptBundle, settings: &GeneratorSettings) -> Result<String, PortError> {
        let resp = self.endpoint.post(&json!({
            "prompt": bundle.text,
            "user_embedding": bundle.user_embedding,
            "item_embedding": bundle.item_embedding,
            "temperature": settings.temperature,
            "max_tokens": settings.max_tokens,
        }))?;
        string_field(&resp, "text")
    }

    fn identity(&self) -> String {
        format!("http/{}@{}", self.model, self.endpoint.url())
    }
}
