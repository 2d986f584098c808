//! Opinion embedding, pseudo-document queries, and exact cosine search.

mod adapter;
pub mod cache;
mod index;

use std::time::Duration;

use serde_json::json;

pub use adapter::{
    adapter_loss_grad, contrastive_loss, contrastive_loss_grad, fit_adapter, fit_adapter_vectors, profile_query,
    profile_query_text, AdapterFit, AdapterParams, ContrastiveConfig, Denominator,
};
pub use index::{
    bench_retrieval, mean_off_diagonal, retrieve_top_q, retrieve_top_q_threaded, retrieved_set_similarity, row_score,
    Exclusions, Hit, LatencyReport, RetrievalResult, UnitVector, VectorIndex,
};

use crate::error::{Error, PortError, Result};
use crate::http::{field, HttpEndpoint};
use crate::profiler::run_parallel;
use crate::retry::RetryPolicy;

/// Text to fixed-width vector.
pub trait EmbedderPort: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError>;

    fn dim(&self) -> usize;

    fn identity(&self) -> String;
}

/// Embeds `texts` with retries, checking the count and width of the answer.
pub fn embed_checked(embedder: &dyn EmbedderPort, texts: &[String], retry: &RetryPolicy) -> Result<Vec<Vec<f64>>> {
    let out = retry.run("embedder", || {
        let v = embedder.embed(texts)?;
        if v.len() != texts.len() {
            return Err(PortError::InvalidResponse(format!(
                "{} vectors for {} texts",
                v.len(),
                texts.len()
            )));
        }
        Ok(v)
    })?;
    let expected = embedder.dim();
    if let Some(bad) = out.iter().find(|v| v.len() != expected) {
        return Err(Error::WidthDrift {
            expected,
            found: bad.len(),
        });
    }
    Ok(out)
}

/// One opinion to be indexed, with the pair of the review it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpinionRecord {
    pub id: String,
    pub user_id: String,
    pub item_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Embeds opinions in batches (bounded concurrency) into a new index, in
/// input order.
pub fn embed_opinions(embedder: &dyn EmbedderPort, opinions: &[OpinionRecord], options: &EmbedOptions) -> Result<VectorIndex> {
    if opinions.is_empty() {
        return Err(Error::EmptyInput("opinion set"));
    }
    let batch = options.batch_size.max(1);
    let chunks: Vec<&[OpinionRecord]> = opinions.chunks(batch).collect();
    let vectors = run_parallel(chunks.len(), options.max_in_flight, |c| {
        let texts: Vec<String> = chunks[c].iter().map(|o| o.text.clone()).collect();
        embed_checked(embedder, &texts, &options.retry)
    })?;
    let mut index = VectorIndex::new(embedder.dim());
    for (o, v) in opinions.iter().zip(vectors.into_iter().flatten()) {
        index.push(&o.id, &o.user_id, &o.item_id, v)?;
    }
    Ok(index)
}

fn mean(vectors: &[UnitVector], side: &'static str) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyInput(side))?;
    let mut m = vec![0.0; first.dim()];
    for v in vectors {
        if v.dim() != m.len() {
            return Err(Error::WidthDrift {
                expected: m.len(),
                found: v.dim(),
            });
        }
        crate::linalg::axpy(&mut m, 1.0, v.as_slice());
    }
    let n = vectors.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    Ok(m)
}

/// `(mean(user) + mean(item)) / 2`, before normalization.
pub fn latent_query_raw(user_opinions: &[UnitVector], item_opinions: &[UnitVector]) -> Result<Vec<f64>> {
    let u = mean(user_opinions, "user opinion set")?;
    let i = mean(item_opinions, "item opinion set")?;
    if u.len() != i.len() {
        return Err(Error::WidthDrift {
            expected: u.len(),
            found: i.len(),
        });
    }
    Ok(u.iter().zip(&i).map(|(a, b)| (a + b) / 2.0).collect())
}

/// Latent representation query, normalized for cosine search.
pub fn latent_query(user_opinions: &[UnitVector], item_opinions: &[UnitVector]) -> Result<UnitVector> {
    Ok(UnitVector::new(latent_query_raw(user_opinions, item_opinions)?))
}

/// Embedder behind an HTTP endpoint: `{"inputs":[..]}` in,
/// `{"vectors":[[..],..]}` out.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: HttpEndpoint,
    dim: usize,
    model: String,
}

impl HttpEmbedder {
    pub fn new(url: &str, model: &str, dim: usize, timeout: Duration) -> Result<Self, PortError> {
        Ok(Self {
            endpoint: HttpEndpoint::new(url, timeout)?,
            dim,
            model: model.to_string(),
        })
    }
}

impl EmbedderPort for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError> {
        let resp = self.endpoint.post(&json!({ "inputs": texts }))?;
        serde_json::from_value(field(&resp, "vectors")?.clone())
            .map_err(|e| PortError::InvalidResponse(format!("\"vectors\": {e}")))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("http/{}@{}", self.model, self.endpoint.url())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testserver;
    use crate::mock::{CallCounter, HashEmbedder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn records(texts: &[&str]) -> Vec<OpinionRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(k, t)| OpinionRecord {
                id: format!("o{k}"),
                user_id: format!("u{k}"),
                item_id: "i".into(),
                text: t.to_string(),
            })
            .collect()
    }

    struct Fixed(Vec<Vec<f64>>);

    impl EmbedderPort for Fixed {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError> {
            Ok(texts.iter().map(|t| self.0[t.parse::<usize>().unwrap()].clone()).collect())
        }
        fn dim(&self) -> usize {
            2
        }
        fn identity(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn embeds_three_opinions_in_order() {
        let e = CallCounter::new(HashEmbedder::new(16, 0));
        let opts = EmbedOptions {
            batch_size: 2,
            ..EmbedOptions::default()
        };
        let ix = embed_opinions(&e, &records(&["good food", "slow service", "nice view"]), &opts).unwrap();
        assert_eq!(ix.len(), 3);
        assert_eq!(e.calls(), 2);
        assert_eq!(ix.ids(), ["o0", "o1", "o2"]);
        for r in 0..3 {
            let n: f64 = ix.row_f64(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(ix.metadata(1), ("u1", "i"));
    }

    #[test]
    fn zero_embedding_is_flagged() {
        let e = Fixed(vec![vec![3.0, 4.0], vec![0.0, 0.0]]);
        let ix = embed_opinions(&e, &records(&["0", "1"]), &EmbedOptions::default()).unwrap();
        assert_eq!(ix.row_f64(0), vec![0.6f32 as f64, 0.8f32 as f64]);
        assert!(ix.is_zero(1));
        let r = retrieve_top_q(&ix, "q", &UnitVector::new(vec![0.0, 1.0]), 5, &Exclusions::new()).unwrap();
        assert_eq!(r.hits.len(), 1);
    }

    #[test]
    fn width_drift_and_empty_input() {
        struct Drifting;
        impl EmbedderPort for Drifting {
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PortError> {
                Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
            }
            fn dim(&self) -> usize {
                2
            }
            fn identity(&self) -> String {
                "drift".into()
            }
        }
        let err = embed_opinions(&Drifting, &records(&["a"]), &EmbedOptions::default()).unwrap_err();
        assert!(matches!(err, Error::WidthDrift { expected: 2, found: 3 }));
        assert!(embed_opinions(&Drifting, &[], &EmbedOptions::default()).is_err());
    }

    #[test]
    fn latent_query_examples() {
        let raw = latent_query_raw(&[UnitVector::new(vec![1.0, 0.0])], &[UnitVector::new(vec![0.0, 1.0])]).unwrap();
        assert_eq!(raw, vec![0.5, 0.5]);
        let v = UnitVector::new(vec![0.6, 0.8]);
        let q = latent_query(&[v.clone(), v.clone()], std::slice::from_ref(&v)).unwrap();
        assert!(q.as_slice().iter().zip(v.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(latent_query(&[], &[v]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn latent_query_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = || UnitVector::new((0..5).map(|_| rng.sample(StandardNormal)).collect());
        let us: Vec<UnitVector> = (0..3).map(|_| draw()).collect();
        let is: Vec<UnitVector> = (0..2).map(|_| draw()).collect();
        let raw = latent_query_raw(&us, &is).unwrap();
        for d in 0..5 {
            let mut su = 0.0;
            for u in &us {
                su += u.as_slice()[d];
            }
            let mut si = 0.0;
            for i in &is {
                si += i.as_slice()[d];
            }
            assert!((raw[d] - (su / 3.0 + si / 2.0) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn http_embedder_round_trip_and_retry() {
        let (url, rx) = testserver::serve(vec![
            (502, "{}".into()),
            (200, r#"{"vectors":[[1.0,0.0],[0.0,2.0]]}"#.into()),
        ]);
        let e = HttpEmbedder::new(&url, "m", 2, Duration::from_secs(5)).unwrap();
        let out = embed_checked(&e, &["a".into(), "b".into()], &RetryPolicy::immediate(2)).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(rx.recv().unwrap(), r#"{"inputs":["a","b"]}"#);
    }
}
