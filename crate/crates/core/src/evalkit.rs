//! Explanation scoring: greedy token-matching BERTscore, an external judge
//! score, and mean/standard-deviation aggregation.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, PortError, Result};
use crate::http::{field, HttpEndpoint};
use crate::linalg::dot;
use crate::retry::RetryPolicy;
use crate::template::PromptTemplate;

/// Text to one unit vector per token.
pub trait TokenEmbedderPort: Send + Sync {
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>, PortError>;

    fn identity(&self) -> String;
}

/// LLM-as-judge: a score in [0, 100] for a candidate against a reference.
pub trait JudgePort: Send + Sync {
    fn judge(&self, instruction: &str, reference: &str, candidate: &str) -> Result<f64, PortError>;

    fn identity(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BertScoreOptions {
    /// Precision over candidate tokens and recall over reference tokens.
    /// Off by default, which gives the reverse assignment.
    pub standard_orientation: bool,
    /// Clip inner products at 0 before matching.
    pub clip_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// For each row of `from`, the best inner product with any row of `to`,
/// averaged.
fn greedy_mean(from: &[Vec<f64>], to: &[Vec<f64>], clip: bool) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    let s = dot(a, b);
                    if clip {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// `P` averages best matches over reference tokens and `R` over candidate
/// tokens (swapped with `standard_orientation`); `F1 = 2PR / (P + R)`, or 0
/// when `P + R = 0`.
pub fn bertscore(reference: &[Vec<f64>], candidate: &[Vec<f64>], options: BertScoreOptions) -> Result<BertScore> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference token sequence"));
    }
    if candidate.is_empty() {
        return Err(Error::EmptyInput("candidate token sequence"));
    }
    let over_ref = greedy_mean(reference, candidate, options.clip_negative);
    let over_cand = greedy_mean(candidate, reference, options.clip_negative);
    let (p, r) = if options.standard_orientation {
        (over_cand, over_ref)
    } else {
        (over_ref, over_cand)
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok(BertScore { p, r, f1 })
}

pub fn bertscore_text(
    embedder: &dyn TokenEmbedderPort,
    reference: &str,
    candidate: &str,
    options: BertScoreOptions,
    retry: &RetryPolicy,
) -> Result<BertScore> {
    let r = retry.run("token embedder", || embedder.embed_tokens(reference))?;
    let c = retry.run("token embedder", || embedder.embed_tokens(candidate))?;
    bertscore(&r, &c, options)
}

/// Asks the judge, retrying transport failures. Scores outside [0, 100]
/// are rejected.
pub fn judge_score(
    judge: &dyn JudgePort,
    reference: &str,
    candidate: &str,
    instruction: &str,
    retry: &RetryPolicy,
) -> Result<f64> {
    if reference.trim().is_empty() || candidate.trim().is_empty() {
        return Err(Error::EmptyInput("judged text"));
    }
    let s = retry.run("judge", || judge.judge(instruction, reference, candidate))?;
    if !(0.0..=100.0).contains(&s) {
        return Err(Error::ScoreOutOfRange(s));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub bert_p: f64,
    pub bert_r: f64,
    pub bert_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub judge: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Welford's running mean and variance.
fn stat(values: impl Iterator<Item = f64>) -> Option<Stat> {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    (n > 0).then(|| Stat {
        mean,
        std: (m2 / n as f64).max(0.0).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: u32,
    pub bert_p: Stat,
    pub bert_r: Stat,
    pub bert_f1: Stat,
    /// Over the samples that carry a judge score; null when none do.
    pub judge: Option<Stat>,
    pub samples: Vec<SampleScore>,
}

pub fn aggregate(samples: Vec<SampleScore>) -> Result<ScoreReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("sample set"));
    }
    let s = |f: fn(&SampleScore) -> f64| stat(samples.iter().map(f)).expect("non-empty");
    Ok(ScoreReport {
        n: samples.len() as u32,
        bert_p: s(|x| x.bert_p),
        bert_r: s(|x| x.bert_r),
        bert_f1: s(|x| x.bert_f1),
        judge: stat(samples.iter().filter_map(|x| x.judge)),
        samples,
    })
}

impl ScoreReport {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// An explanation keyed by the id of the pair it explains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub text: String,
}

pub struct Evaluator<'a> {
    pub tokens: &'a dyn TokenEmbedderPort,
    pub judge: Option<&'a dyn JudgePort>,
    pub judge_template: PromptTemplate,
    pub options: BertScoreOptions,
    pub retry: RetryPolicy,
}

impl Evaluator<'_> {
    /// Scores each candidate against the reference with the same id, in
    /// reference order. A reference without a candidate is an error.
    pub fn evaluate(&self, references: &[Explanation], candidates: &[Explanation]) -> Result<ScoreReport> {
        let by_id: HashMap<&str, &str> = candidates.iter().map(|c| (c.id.as_str(), c.text.as_str())).collect();
        let mut samples = Vec::with_capacity(references.len());
        for r in references {
            let cand = *by_id
                .get(r.id.as_str())
                .ok_or_else(|| Error::Config(format!("no candidate for reference {}", r.id)))?;
            let b = bertscore_text(self.tokens, &r.text, cand, self.options, &self.retry)?;
            let judge = match self.judge {
                Some(j) => {
                    let vars = BTreeMap::from([("reference", r.text.clone()), ("candidate", cand.to_string())]);
                    let instruction = self.judge_template.render(&vars)?;
                    Some(judge_score(j, &r.text, cand, &instruction, &self.retry)?)
                }
                None => None,
            };
            samples.push(SampleScore {
                id: r.id.clone(),
                bert_p: b.p,
                bert_r: b.r,
                bert_f1: b.f1,
                judge,
            });
        }
        aggregate(samples)
    }
}

/// Judge behind an HTTP endpoint: `{"instruction","reference","candidate"}`
/// in, `{"score": number}` out.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    endpoint: HttpEndpoint,
}

impl HttpJudge {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, PortError> {
        Ok(Self {
            endpoint: HttpEndpoint::new(url, timeout)?,
        })
    }
}

impl JudgePort for HttpJudge {
    fn judge(&self, instruction: &str, reference: &str, candidate: &str) -> Result<f64, PortError> {
        let resp = self.endpoint.post(&json!({
            "instruction": instruction,
            "reference": reference,
            "candidate": candidate,
        }))?;
        field(&resp, "score")?
            .as_f64()
            .ok_or_else(|| PortError::InvalidResponse("\"score\" is not a number".into()))
    }

    fn identity(&self) -> String {
        format!("http/judge@{}", self.endpoint.url())
    }
}

/// Token embedder behind an HTTP endpoint: `{"text": string}` in,
/// `{"tokens": [[..],..]}` out. Returned vectors are re-normalized.
#[derive(Debug, Clone)]
pub struct HttpTokenEmbedder {
    endpoint: HttpEndpoint,
}

impl HttpTokenEmbedder {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, PortError> {
        Ok(Self {
            endpoint: HttpEndpoint::new(url, timeout)?,
        })
    }
}

impl TokenEmbedderPort for HttpTokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>, PortError> {
        let resp = self.endpoint.post(&json!({ "text": text }))?;
        let tokens: Vec<Vec<f64>> = serde_json::from_value(field(&resp, "tokens")?.clone())
            .map_err(|e| PortError::InvalidResponse(format!("\"tokens\": {e}")))?;
        Ok(tokens
            .into_iter()
            .map(|v| crate::retrieval::UnitVector::new(v).into_vec())
            .collect())
    }

    fn identity(&self) -> String {
        format!("http/tokens@{}", self.endpoint.url())
    }
}
