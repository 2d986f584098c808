use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::Templates;
use super::tokenize::HashTokenizer;
use super::{
    assemble_prompt, generate, GeneratorPort, HttpGenerator, PairContext, PipelineConfig, PortKind, PortsConfig,
    PromptBundle, QueryType, RetrievedOpinion,
};
use crate::corpus::{load_reviews, split, Dataset, InteractionGraph, Review, SplitSpec};
use crate::digest::{ContentDigest, Hasher};
use crate::error::{Error, Result};
use crate::evalkit::{Evaluator, Explanation, HttpJudge, HttpTokenEmbedder, JudgePort, TokenEmbedderPort};
use crate::gcn::{read_checkpoint, train_adaptor, write_checkpoint, LinearSoftmaxHead, TrainBatch};
use crate::mock::{EchoGenerator, EchoJudge, FirstSentenceSummarizer, HashEmbedder, HashTokenEmbedder};
use crate::profiler::{
    read_opinions, read_profiles, run_parallel, write_opinions, write_profiles, HttpSummarizer, Opinion, Profile,
    Profiler, SubjectKind, SummarizerPort,
};
use crate::retrieval::cache::{read_embedding_cache, write_embedding_cache};
use crate::retrieval::{
    embed_checked, embed_opinions, fit_adapter, latent_query, mean_off_diagonal, profile_query_text,
    retrieve_top_q_threaded, retrieved_set_similarity, AdapterParams, EmbedOptions, EmbedderPort, Exclusions,
    HttpEmbedder, OpinionRecord, RetrievalResult, UnitVector, VectorIndex,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    TrainGcn,
    BuildProfiles,
    Embed,
    FinetuneAdapter,
    Retrieve,
    Assemble,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::TrainGcn,
        Stage::BuildProfiles,
        Stage::Embed,
        Stage::FinetuneAdapter,
        Stage::Retrieve,
        Stage::Assemble,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainGcn => "train-gcn",
            Stage::BuildProfiles => "build-profiles",
            Stage::Embed => "embed",
            Stage::FinetuneAdapter => "finetune-adapter",
            Stage::Retrieve => "retrieve",
            Stage::Assemble => "assemble",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// The external models used by a run.
#[derive(Clone)]
pub struct Ports {
    pub summarizer: Arc<dyn SummarizerPort>,
    pub embedder: Arc<dyn EmbedderPort>,
    pub tokens: Arc<dyn TokenEmbedderPort>,
    pub judge: Arc<dyn JudgePort>,
    pub generator: Arc<dyn GeneratorPort>,
}

impl Ports {
    /// Deterministic in-process ports.
    pub fn mock(config: &PortsConfig) -> Self {
        Self {
            summarizer: Arc::new(FirstSentenceSummarizer {
                budget_chars: config.summarizer_budget_chars,
            }),
            embedder: Arc::new(HashEmbedder::new(config.mock_embedding_dim, config.mock_seed)),
            tokens: Arc::new(HashTokenEmbedder::new(config.mock_embedding_dim, config.mock_seed.wrapping_add(1))),
            judge: Arc::new(EchoJudge),
            generator: Arc::new(EchoGenerator),
        }
    }

    pub fn from_config(config: &PortsConfig) -> Result<Self> {
        if config.kind == PortKind::Mock {
            return Ok(Self::mock(config));
        }
        let timeout = Duration::from_secs(config.timeout_secs);
        let url = |u: &Option<String>, name: &str| {
            u.clone()
                .ok_or_else(|| Error::Config(format!("ports.{name} is required for http ports")))
        };
        let port_err = |port: &'static str| {
            move |source| Error::Port {
                port,
                attempts: 0,
                source,
            }
        };
        Ok(Self {
            summarizer: Arc::new(
                HttpSummarizer::new(
                    &url(&config.summarizer_url, "summarizer_url")?,
                    &config.summarizer_model,
                    config.summarizer_budget_chars,
                    timeout,
                )
                .map_err(port_err("summarizer"))?,
            ),
            embedder: Arc::new(
                HttpEmbedder::new(
                    &url(&config.embedder_url, "embedder_url")?,
                    &config.embedder_model,
                    config.embedder_dim,
                    timeout,
                )
                .map_err(port_err("embedder"))?,
            ),
            tokens: Arc::new(
                HttpTokenEmbedder::new(&url(&config.token_embedder_url, "token_embedder_url")?, timeout)
                    .map_err(port_err("token embedder"))?,
            ),
            judge: match &config.judge_url {
                Some(u) => Arc::new(HttpJudge::new(u, timeout).map_err(port_err("judge"))?),
                None => Arc::new(EchoJudge),
            },
            generator: Arc::new(
                HttpGenerator::new(
                    &url(&config.generator_url, "generator_url")?,
                    &config.generator_model,
                    timeout,
                )
                .map_err(port_err("generator"))?,
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Digest of the stage's declared inputs.
    pub key: String,
    pub millis: f64,
    /// Output file name to content digest.
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub threads: BTreeMap<String, usize>,
    pub ports: BTreeMap<String, String>,
    pub failed: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Every output digest, keyed `stage/file`.
    pub fn artifact_digests(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(move |(f, d)| (format!("{}/{f}", s.name), d.clone())))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    outputs: BTreeMap<String, String>,
    notes: BTreeMap<String, Value>,
}

type Notes = BTreeMap<String, Value>;

/// One retrieval per evaluated test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub review_id: u64,
    pub user_id: String,
    pub item_id: String,
    pub result: RetrievalResult,
}

fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    ContentDigest::of(&bytes).to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Text the generator should reproduce for a review.
pub fn ground_truth(review: &Review) -> &str {
    review.explanation.as_deref().unwrap_or(&review.text)
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    templates: Templates,
    ports: &'a Ports,
    dir: PathBuf,
    manifest: RunManifest,
}

impl<'a> Runner<'a> {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn output(&self, stage: Stage, file: &str) -> String {
        self.manifest
            .stage(stage.name())
            .and_then(|s| s.outputs.get(file).cloned())
            .unwrap_or_else(|| "absent".into())
    }

    fn cache_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("cache").join(format!("{}.json", stage.name()))
    }

    fn cached(&self, stage: Stage, key: &str) -> Option<CacheRecord> {
        let bytes = fs::read(self.cache_path(stage)).ok()?;
        let rec: CacheRecord = serde_json::from_slice(&bytes).ok()?;
        if rec.key != key {
            return None;
        }
        for (file, digest) in &rec.outputs {
            let d = ContentDigest::of_file(&self.path(file)).ok()?;
            if &d.to_string() != digest {
                return None;
            }
        }
        Some(rec)
    }

    fn skip(&mut self, stage: Stage, why: &str) {
        log::info!("stage {}: skipped ({why})", stage.name());
        self.manifest.stages.push(StageRecord {
            name: stage.name().into(),
            status: StageStatus::Skipped,
            key: String::new(),
            millis: 0.0,
            outputs: BTreeMap::new(),
            notes: BTreeMap::from([("reason".to_string(), Value::from(why))]),
        });
    }

    /// Runs `body` unless a cache record with the same input key and intact
    /// outputs exists.
    fn stage(
        &mut self,
        stage: Stage,
        inputs: &[(&str, String)],
        outputs: &[&str],
        body: impl FnOnce(&Self) -> Result<Notes>,
    ) -> Result<()> {
        let mut h = Hasher::new();
        h.str(stage.name());
        for (name, value) in inputs {
            h.str(name);
            h.str(value);
        }
        let key = h.finish().to_string();
        let start = Instant::now();
        if let Some(rec) = self.cached(stage, &key) {
            log::info!("stage {}: cached", stage.name());
            self.manifest.stages.push(StageRecord {
                name: stage.name().into(),
                status: StageStatus::Cached,
                key,
                millis: start.elapsed().as_secs_f64() * 1e3,
                outputs: rec.outputs,
                notes: rec.notes,
            });
            return Ok(());
        }
        log::info!("stage {}: running", stage.name());
        let notes = match body(self) {
            Ok(n) => n,
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: stage.name().into(),
                    status: StageStatus::Failed,
                    key,
                    millis: start.elapsed().as_secs_f64() * 1e3,
                    outputs: BTreeMap::new(),
                    notes: BTreeMap::from([("error".to_string(), Value::from(e.to_string()))]),
                });
                self.manifest.failed = Some(stage.name().into());
                let _ = write_json(&self.path(MANIFEST_FILE), &self.manifest);
                return Err(Error::Stage {
                    stage: stage.name().into(),
                    source: Box::new(e),
                });
            }
        };
        let mut digests = BTreeMap::new();
        for file in outputs {
            digests.insert(file.to_string(), ContentDigest::of_file(&self.path(file))?.to_string());
        }
        let rec = CacheRecord {
            key: key.clone(),
            outputs: digests.clone(),
            notes: notes.clone(),
        };
        write_json(&self.cache_path(stage), &rec)?;
        self.manifest.stages.push(StageRecord {
            name: stage.name().into(),
            status: StageStatus::Ran,
            key,
            millis: start.elapsed().as_secs_f64() * 1e3,
            outputs: digests,
            notes,
        });
        Ok(())
    }

    fn train(&self) -> Result<Dataset> {
        load_reviews(&self.path("train.jsonl"), self.config.data.duplicates)
    }

    fn test(&self) -> Result<Dataset> {
        load_reviews(&self.path("test.jsonl"), self.config.data.duplicates)
    }

    fn profiles(&self) -> Result<HashMap<(SubjectKind, String), Profile>> {
        Ok(read_profiles(&self.path("profiles.jsonl"))?
            .into_iter()
            .map(|p| ((p.kind, p.id.clone()), p))
            .collect())
    }

    fn index(&self) -> Result<VectorIndex> {
        let train = self.train()?;
        let meta: HashMap<String, &Review> = train.reviews().iter().map(|r| (r.review_id.to_string(), r)).collect();
        let cache = read_embedding_cache(&self.path("opinions.rxha"))?;
        let mut index = VectorIndex::new(cache.dim);
        for (id, row) in cache.rows {
            let r = meta.get(&id).ok_or_else(|| Error::Format {
                format: "RXHA",
                message: format!("row {id} has no training review"),
            })?;
            index.push(&id, &r.user_id, &r.item_id, row.into_iter().map(f64::from).collect())?;
        }
        Ok(index)
    }

    /// Test reviews whose user and item both occur in training.
    fn evaluated_pairs(&self) -> Result<Vec<Review>> {
        let train = self.train()?;
        let test = self.test()?;
        let users: HashSet<&str> = train.user_ids().collect();
        let items: HashSet<&str> = train.item_ids().collect();
        let mut out: Vec<Review> = test
            .reviews()
            .iter()
            .filter(|r| users.contains(r.user_id.as_str()) && items.contains(r.item_id.as_str()))
            .cloned()
            .collect();
        if let Some(n) = self.config.run.max_test_pairs {
            out.truncate(n);
        }
        Ok(out)
    }

    fn ingest(&mut self) -> Result<()> {
        let data = &self.config.data;
        let inputs = [
            ("reviews", ContentDigest::of_file(&data.reviews)?.to_string()),
            ("train_fraction", data.train_fraction.to_string()),
            ("split_seed", data.split_seed.to_string()),
            ("duplicates", digest_json(&data.duplicates)),
        ];
        self.stage(Stage::Ingest, &inputs, &["train.jsonl", "test.jsonl", "split.json"], |r| {
            let dataset = load_reviews(&data.reviews, data.duplicates)?;
            let parts = split(&dataset, SplitSpec::new(data.train_fraction, data.split_seed)?)?;
            parts.train.write_jsonl(&r.path("train.jsonl"))?;
            parts.test.write_jsonl(&r.path("test.jsonl"))?;
            write_json(&r.path("split.json"), &parts.manifest(data.split_seed))?;
            Ok(Notes::from([
                ("reviews".into(), json!(dataset.len())),
                ("users".into(), json!(dataset.num_users())),
                ("items".into(), json!(dataset.num_items())),
                ("train".into(), json!(parts.train.len())),
                ("test".into(), json!(parts.test.len())),
            ]))
        })
    }

    fn train_gcn(&mut self) -> Result<()> {
        let gcn = &self.config.gcn;
        let inputs = [
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("gcn", digest_json(gcn)),
        ];
        self.stage(Stage::TrainGcn, &inputs, &["gcn.rxge", "gcn_report.json"], |r| {
            let train = r.train()?;
            let graph = InteractionGraph::build(&train)?;
            let tokenizer = HashTokenizer::new(gcn.vocab_size, gcn.max_target_tokens);
            let mut pairs = Vec::new();
            let mut targets = Vec::new();
            for review in train.reviews() {
                let tokens = tokenizer.encode(ground_truth(review));
                if tokens.is_empty() {
                    continue;
                }
                let u = graph.user_ordinal(&review.user_id).expect("train user in graph");
                let i = graph.item_ordinal(&review.item_id).expect("train item in graph");
                pairs.push((u, i));
                targets.push(tokens);
            }
            let batches = pairs
                .chunks(gcn.train.batch_size)
                .zip(targets.chunks(gcn.train.batch_size))
                .map(|(p, t)| TrainBatch::new(p.to_vec(), t.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let head = LinearSoftmaxHead::random(gcn.d_llm, gcn.vocab_size, &mut ChaCha8Rng::seed_from_u64(gcn.head_seed));
            let report = train_adaptor(&graph, &head, &batches, &gcn.train)?;
            write_checkpoint(&r.path("gcn.rxge"), &report.encoder)?;
            write_json(
                &r.path("gcn_report.json"),
                &json!({
                    "initial_loss": report.initial_loss,
                    "final_loss": report.final_loss,
                    "history": report.history,
                }),
            )?;
            Ok(Notes::from([
                ("steps".into(), json!(report.history.len())),
                ("initial_loss".into(), json!(report.initial_loss)),
                ("final_loss".into(), json!(report.final_loss)),
            ]))
        })
    }

    fn build_profiles(&mut self) -> Result<()> {
        let mut profiler_cfg = self.config.profiler.clone();
        // Concurrency does not change the output.
        profiler_cfg.max_concurrency = 1;
        let ins = &self.templates.instructions;
        let inputs = [
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("profiler", digest_json(&profiler_cfg)),
            ("summarizer", self.ports.summarizer.identity()),
            ("summarize", ins.summarize.source().to_string()),
            ("aggregate_user", ins.aggregate_user.source().to_string()),
            ("aggregate_item", ins.aggregate_item.source().to_string()),
        ];
        self.stage(Stage::BuildProfiles, &inputs, &["profiles.jsonl", "opinions.jsonl"], |r| {
            let train = r.train()?;
            let profiler = Profiler::with_instructions(
                r.ports.summarizer.as_ref(),
                r.config.profiler.clone(),
                r.templates.instructions.clone(),
            )?;
            let mut profiles = Vec::new();
            let mut item_text = BTreeMap::new();
            for item in train.item_ids() {
                let p = profiler.item_profile(&train, item)?;
                item_text.insert(item.to_string(), p.text.clone());
                profiles.push(p);
            }
            for user in train.user_ids() {
                profiles.push(if r.config.profiler.include_item_profiles {
                    profiler.user_profile_with_items(&train, user, &item_text)?
                } else {
                    profiler.user_profile(&train, user)?
                });
            }
            let opinions = profiler.extract_opinions(train.reviews())?;
            write_profiles(&r.path("profiles.jsonl"), &profiles)?;
            write_opinions(&r.path("opinions.jsonl"), &opinions)?;
            let calls: u64 = profiles.iter().map(|p| u64::from(p.calls)).sum::<u64>() + opinions.len() as u64;
            Ok(Notes::from([
                ("profiles".into(), json!(profiles.len())),
                ("opinions".into(), json!(opinions.len())),
                ("summarizer_calls".into(), json!(calls)),
            ]))
        })
    }

    fn embed(&mut self) -> Result<()> {
        let inputs = [
            ("opinions", self.output(Stage::BuildProfiles, "opinions.jsonl")),
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("embedder", self.ports.embedder.identity()),
        ];
        self.stage(Stage::Embed, &inputs, &["opinions.rxha"], |r| {
            let train = r.train()?;
            let by_id: HashMap<u64, &Review> = train.reviews().iter().map(|x| (x.review_id, x)).collect();
            let records = read_opinions(&r.path("opinions.jsonl"))?
                .into_iter()
                .map(|o| {
                    let review = by_id.get(&o.review_id).ok_or_else(|| Error::Config(format!("opinion {} has no review", o.review_id)))?;
                    Ok(OpinionRecord {
                        id: o.review_id.to_string(),
                        user_id: review.user_id.clone(),
                        item_id: review.item_id.clone(),
                        text: o.opinion,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let options = EmbedOptions {
                batch_size: r.config.retrieval.embed_batch_size,
                max_in_flight: r.config.ports.max_in_flight,
                retry: r.config.ports.retry,
            };
            let index = embed_opinions(r.ports.embedder.as_ref(), &records, &options)?;
            let rows: Vec<(String, Vec<f32>)> = (0..index.len()).map(|k| (index.id(k).to_string(), index.row(k).to_vec())).collect();
            write_embedding_cache(&r.path("opinions.rxha"), index.dim(), &rows)?;
            let zero = (0..index.len()).filter(|&k| index.is_zero(k)).count();
            Ok(Notes::from([
                ("rows".into(), json!(index.len())),
                ("dim".into(), json!(index.dim())),
                ("zero_rows".into(), json!(zero)),
            ]))
        })
    }

    fn profile_texts(profiles: &HashMap<(SubjectKind, String), Profile>, user: &str, item: &str) -> Result<(String, String)> {
        let u = profiles
            .get(&(SubjectKind::User, user.to_string()))
            .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
        let i = profiles
            .get(&(SubjectKind::Item, item.to_string()))
            .ok_or_else(|| Error::UnknownItem(item.to_string()))?;
        Ok((u.text.clone(), i.text.clone()))
    }

    fn finetune_adapter(&mut self) -> Result<()> {
        let rc = &self.config.retrieval;
        if rc.query_type != QueryType::Profile {
            self.skip(Stage::FinetuneAdapter, "latent queries need no adapter");
            return Ok(());
        }
        if !rc.finetune_adapter {
            self.skip(Stage::FinetuneAdapter, "disabled; identity adapter");
            return Ok(());
        }
        let inputs = [
            ("profiles", self.output(Stage::BuildProfiles, "profiles.jsonl")),
            ("opinions", self.output(Stage::BuildProfiles, "opinions.jsonl")),
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("embedder", self.ports.embedder.identity()),
            ("contrastive", digest_json(&rc.contrastive)),
        ];
        self.stage(Stage::FinetuneAdapter, &inputs, &["adapter.json", "adapter_report.json"], |r| {
            let train = r.train()?;
            let profiles = r.profiles()?;
            let opinions: HashMap<u64, String> = read_opinions(&r.path("opinions.jsonl"))?
                .into_iter()
                .map(|o: Opinion| (o.review_id, o.opinion))
                .collect();
            let mut pairs = Vec::new();
            for review in train.reviews() {
                let (u, i) = Self::profile_texts(&profiles, &review.user_id, &review.item_id)?;
                if let Some(o) = opinions.get(&review.review_id) {
                    pairs.push((profile_query_text(&u, &i), o.clone()));
                }
            }
            let fit = fit_adapter(&pairs, r.ports.embedder.as_ref(), &rc.contrastive, &r.config.ports.retry)?;
            fit.params.save(&r.path("adapter.json"))?;
            write_json(
                &r.path("adapter_report.json"),
                &json!({
                    "pairs": pairs.len(),
                    "initial_loss": fit.initial_loss,
                    "final_loss": fit.final_loss,
                    "history": fit.history,
                }),
            )?;
            Ok(Notes::from([
                ("pairs".into(), json!(pairs.len())),
                ("initial_loss".into(), json!(fit.initial_loss)),
                ("final_loss".into(), json!(fit.final_loss)),
            ]))
        })
    }

    fn retrieve(&mut self) -> Result<()> {
        let rc = &self.config.retrieval;
        let adapter = if rc.query_type == QueryType::Profile && rc.finetune_adapter {
            self.output(Stage::FinetuneAdapter, "adapter.json")
        } else {
            "identity".into()
        };
        let inputs = [
            ("index", self.output(Stage::Embed, "opinions.rxha")),
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("test", self.output(Stage::Ingest, "test.jsonl")),
            ("profiles", self.output(Stage::BuildProfiles, "profiles.jsonl")),
            ("adapter", adapter),
            ("embedder", self.ports.embedder.identity()),
            ("top_q", rc.top_q.to_string()),
            ("query_type", digest_json(&rc.query_type)),
            ("max_test_pairs", format!("{:?}", self.config.run.max_test_pairs)),
        ];
        self.stage(Stage::Retrieve, &inputs, &["retrieval.jsonl"], |r| {
            let index = r.index()?;
            let pairs = r.evaluated_pairs()?;
            let queries: Vec<UnitVector> = match rc.query_type {
                QueryType::Latent => {
                    let mut by_user: HashMap<&str, Vec<UnitVector>> = HashMap::new();
                    let mut by_item: HashMap<&str, Vec<UnitVector>> = HashMap::new();
                    for k in (0..index.len()).filter(|&k| !index.is_zero(k)) {
                        let (u, i) = index.metadata(k);
                        let v = UnitVector::new(index.row_f64(k));
                        by_user.entry(u).or_default().push(v.clone());
                        by_item.entry(i).or_default().push(v);
                    }
                    pairs
                        .iter()
                        .map(|p| {
                            let none = Vec::new();
                            latent_query(
                                by_user.get(p.user_id.as_str()).unwrap_or(&none),
                                by_item.get(p.item_id.as_str()).unwrap_or(&none),
                            )
                        })
                        .collect::<Result<_>>()?
                }
                QueryType::Profile => {
                    let adapter = if rc.finetune_adapter {
                        AdapterParams::load(&r.path("adapter.json"))?
                    } else {
                        AdapterParams::identity(index.dim())
                    };
                    let profiles = r.profiles()?;
                    let texts = pairs
                        .iter()
                        .map(|p| {
                            let (u, i) = Self::profile_texts(&profiles, &p.user_id, &p.item_id)?;
                            Ok(profile_query_text(&u, &i))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut out = Vec::with_capacity(texts.len());
                    for chunk in texts.chunks(rc.embed_batch_size) {
                        for v in embed_checked(r.ports.embedder.as_ref(), chunk, &r.config.ports.retry)? {
                            out.push(adapter.apply(UnitVector::new(v).as_slice())?);
                        }
                    }
                    out
                }
            };
            let mut records = Vec::with_capacity(pairs.len());
            let mut diversity = Vec::new();
            for (p, q) in pairs.iter().zip(&queries) {
                let exclude: Exclusions = [(p.user_id.clone(), p.item_id.clone())].into();
                let result = retrieve_top_q_threaded(&index, &p.review_id.to_string(), q, rc.top_q, &exclude, rc.search_threads)?;
                if result.hits.len() >= 2 {
                    diversity.push(mean_off_diagonal(&retrieved_set_similarity(&index, &result)?));
                }
                records.push(RetrievalRecord {
                    review_id: p.review_id,
                    user_id: p.user_id.clone(),
                    item_id: p.item_id.clone(),
                    result,
                });
            }
            write_jsonl(&r.path("retrieval.jsonl"), &records)?;
            let mean_sim = if diversity.is_empty() {
                Value::Null
            } else {
                json!(diversity.iter().sum::<f64>() / diversity.len() as f64)
            };
            Ok(Notes::from([
                ("pairs".into(), json!(records.len())),
                ("mean_pairwise_similarity".into(), mean_sim),
            ]))
        })
    }

    fn assemble(&mut self) -> Result<()> {
        let inputs = [
            ("retrieval", self.output(Stage::Retrieve, "retrieval.jsonl")),
            ("gcn", self.output(Stage::TrainGcn, "gcn.rxge")),
            ("activation", digest_json(&self.config.gcn.train.activation)),
            ("profiles", self.output(Stage::BuildProfiles, "profiles.jsonl")),
            ("opinions", self.output(Stage::BuildProfiles, "opinions.jsonl")),
            ("train", self.output(Stage::Ingest, "train.jsonl")),
            ("test", self.output(Stage::Ingest, "test.jsonl")),
            ("template", self.templates.generation.source().to_string()),
        ];
        self.stage(Stage::Assemble, &inputs, &["prompts.jsonl"], |r| {
            let train = r.train()?;
            let test = r.test()?;
            let graph = InteractionGraph::build(&train)?;
            let encoder = read_checkpoint(&r.path("gcn.rxge"), r.config.gcn.train.activation)?.encoder;
            let (users, items) = encoder.table.encode(&graph)?;
            let profiles = r.profiles()?;
            let opinions: HashMap<String, String> = read_opinions(&r.path("opinions.jsonl"))?
                .into_iter()
                .map(|o| (o.review_id.to_string(), o.opinion))
                .collect();
            let truth: HashMap<u64, &Review> = test.reviews().iter().map(|x| (x.review_id, x)).collect();
            let records: Vec<RetrievalRecord> = read_jsonl(&r.path("retrieval.jsonl"))?;
            let mut bundles = Vec::with_capacity(records.len());
            for rec in &records {
                let (up, ip) = Self::profile_texts(&profiles, &rec.user_id, &rec.item_id)?;
                let retrieved: Vec<RetrievedOpinion> = rec
                    .result
                    .hits
                    .iter()
                    .map(|h| RetrievedOpinion {
                        id: h.id.clone(),
                        text: opinions.get(&h.id).cloned().unwrap_or_default(),
                        score: h.score,
                    })
                    .collect();
                let u = graph.user_ordinal(&rec.user_id).ok_or_else(|| Error::UnknownUser(rec.user_id.clone()))?;
                let i = graph.item_ordinal(&rec.item_id).ok_or_else(|| Error::UnknownItem(rec.item_id.clone()))?;
                let ue = encoder.projection.forward(users.row(u))?;
                let ie = encoder.projection.forward(items.row(i))?;
                let bundle = assemble_prompt(
                    PairContext {
                        user_id: &rec.user_id,
                        item_id: &rec.item_id,
                        user_profile: &up,
                        item_profile: &ip,
                        retrieved: &retrieved,
                        user_embedding: &ue,
                        item_embedding: &ie,
                    },
                    &r.templates.generation,
                )?;
                let target = truth
                    .get(&rec.review_id)
                    .ok_or_else(|| Error::Config(format!("retrieval for unknown test review {}", rec.review_id)))?;
                check_leakage(&bundle, target)?;
                bundles.push(bundle);
            }
            write_jsonl(&r.path("prompts.jsonl"), &bundles)?;
            Ok(Notes::from([
                ("bundles".into(), json!(bundles.len())),
                ("leakage_checked".into(), json!(bundles.len())),
            ]))
        })
    }

    fn generate(&mut self) -> Result<()> {
        let gc = &self.config.generator;
        if !gc.enabled {
            self.skip(Stage::Generate, "generator disabled");
            return Ok(());
        }
        let inputs = [
            ("prompts", self.output(Stage::Assemble, "prompts.jsonl")),
            ("generator", self.ports.generator.identity()),
            ("settings", digest_json(&gc.settings)),
        ];
        self.stage(Stage::Generate, &inputs, &["generations.jsonl"], |r| {
            let bundles: Vec<PromptBundle> = read_jsonl(&r.path("prompts.jsonl"))?;
            let records: Vec<RetrievalRecord> = read_jsonl(&r.path("retrieval.jsonl"))?;
            let outs = run_parallel(bundles.len(), r.config.ports.max_in_flight, |k| {
                generate(r.ports.generator.as_ref(), &bundles[k], &gc.settings, &r.config.ports.retry)
            })?;
            let gens: Vec<Explanation> = records
                .iter()
                .zip(&outs)
                .map(|(rec, g)| Explanation {
                    id: rec.review_id.to_string(),
                    text: g.text.clone(),
                })
                .collect();
            write_jsonl(&r.path("generations.jsonl"), &gens)?;
            let mean_ms = outs.iter().map(|g| g.latency_ms).sum::<f64>() / outs.len().max(1) as f64;
            Ok(Notes::from([
                ("generations".into(), json!(gens.len())),
                ("mean_latency_ms".into(), json!(mean_ms)),
            ]))
        })
    }

    fn evaluate(&mut self) -> Result<()> {
        let ec = &self.config.evaluation;
        if !ec.enabled {
            self.skip(Stage::Evaluate, "evaluation disabled");
            return Ok(());
        }
        if !self.config.generator.enabled {
            self.skip(Stage::Evaluate, "nothing generated");
            return Ok(());
        }
        let judge_id = if ec.judge { self.ports.judge.identity() } else { "none".into() };
        let inputs = [
            ("generations", self.output(Stage::Generate, "generations.jsonl")),
            ("test", self.output(Stage::Ingest, "test.jsonl")),
            ("tokens", self.ports.tokens.identity()),
            ("judge", judge_id),
            ("evaluation", digest_json(ec)),
            ("judge_template", self.templates.judge.source().to_string()),
        ];
        self.stage(Stage::Evaluate, &inputs, &["references.jsonl", "report.json"], |r| {
            let gens: Vec<Explanation> = read_jsonl(&r.path("generations.jsonl"))?;
            let test = r.test()?;
            let truth: HashMap<String, &Review> = test.reviews().iter().map(|x| (x.review_id.to_string(), x)).collect();
            let refs = gens
                .iter()
                .map(|g| {
                    let review = truth
                        .get(&g.id)
                        .ok_or_else(|| Error::Config(format!("generation for unknown test review {}", g.id)))?;
                    Ok(Explanation {
                        id: g.id.clone(),
                        text: ground_truth(review).to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&r.path("references.jsonl"), &refs)?;
            let evaluator = Evaluator {
                tokens: r.ports.tokens.as_ref(),
                judge: ec.judge.then_some(r.ports.judge.as_ref()),
                judge_template: r.templates.judge.clone(),
                options: ec.bertscore,
                retry: r.config.ports.retry,
            };
            let report = evaluator.evaluate(&refs, &gens)?;
            report.write(&r.path("report.json"))?;
            Ok(Notes::from([
                ("samples".into(), json!(report.n)),
                ("bert_f1_mean".into(), json!(report.bert_f1.mean)),
                ("judge_mean".into(), json!(report.judge.map(|j| j.mean))),
            ]))
        })
    }
}

/// Fails when the pair's ground-truth text appears in the prompt, or when
/// the pair's own review was retrieved.
pub fn check_leakage(bundle: &PromptBundle, target: &Review) -> Result<()> {
    let truth = ground_truth(target).trim();
    let own = target.review_id.to_string();
    if (!truth.is_empty() && bundle.text.contains(truth)) || bundle.retrieved.iter().any(|h| h.id == own) {
        return Err(Error::Config(format!(
            "leakage: prompt for review {} contains its ground truth",
            target.review_id
        )));
    }
    Ok(())
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    let ports = Ports::from_config(&config.ports)?;
    run_pipeline_with(config, &ports, None)
}

/// Runs every stage up to and including `until` (all stages when `None`)
/// and writes the manifest to the run directory.
pub fn run_pipeline_with(config: &PipelineConfig, ports: &Ports, until: Option<Stage>) -> Result<RunManifest> {
    let templates = config.validate()?;
    let dir = config.run.dir.clone();
    fs::create_dir_all(dir.join("cache")).map_err(|e| Error::io(&dir, e))?;
    let seeds = BTreeMap::from([
        ("split".to_string(), config.data.split_seed),
        ("gcn".to_string(), config.gcn.train.seed),
        ("gcn_head".to_string(), config.gcn.head_seed),
        ("profiler".to_string(), config.profiler.seed),
        ("contrastive".to_string(), config.retrieval.contrastive.seed),
        ("mock_ports".to_string(), config.ports.mock_seed),
    ]);
    let threads = BTreeMap::from([
        ("profiler".to_string(), config.profiler.max_concurrency),
        ("ports_in_flight".to_string(), config.ports.max_in_flight),
        ("search".to_string(), config.retrieval.search_threads),
    ]);
    let port_ids = BTreeMap::from([
        ("summarizer".to_string(), ports.summarizer.identity()),
        ("embedder".to_string(), ports.embedder.identity()),
        ("tokens".to_string(), ports.tokens.identity()),
        ("judge".to_string(), ports.judge.identity()),
        ("generator".to_string(), ports.generator.identity()),
    ]);
    let mut runner = Runner {
        config,
        templates,
        ports,
        dir,
        manifest: RunManifest {
            config_digest: digest_json(config),
            stages: Vec::new(),
            seeds,
            threads,
            ports: port_ids,
            failed: None,
        },
    };
    let last = until.unwrap_or(Stage::Evaluate);
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        match stage {
            Stage::Ingest => runner.ingest()?,
            Stage::TrainGcn => runner.train_gcn()?,
            Stage::BuildProfiles => runner.build_profiles()?,
            Stage::Embed => runner.embed()?,
            Stage::FinetuneAdapter => runner.finetune_adapter()?,
            Stage::Retrieve => runner.retrieve()?,
            Stage::Assemble => runner.assemble()?,
            Stage::Generate => runner.generate()?,
            Stage::Evaluate => runner.evaluate()?,
        }
    }
    write_json(&runner.path(MANIFEST_FILE), &runner.manifest)?;
    Ok(runner.manifest)
}
