use std::collections::{HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// An L2-normalized vector, or an all-zero vector carrying the zero flag.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    components: Vec<f64>,
    zero: bool,
}

impl UnitVector {
    pub fn new(mut v: Vec<f64>) -> Self {
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            v.iter_mut().for_each(|x| *x = 0.0);
            return Self { components: v, zero: true };
        }
        v.iter_mut().for_each(|x| *x /= n);
        Self { components: v, zero: false }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.components
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }
}

/// Cosine similarity of a stored row against a query: a plain sequential
/// sum in f64, clamped to [-1, 1].
#[inline]
pub fn row_score(row: &[f32], query: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in row.iter().zip(query) {
        s += f64::from(*a) * b;
    }
    s.clamp(-1.0, 1.0)
}

/// Unit-norm opinion embeddings, stored as f32 rows.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    meta: Vec<(String, String)>,
    rows: Vec<f32>,
    zero: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    /// Normalizes and appends `vector`. All-zero vectors are stored with the
    /// zero flag and never returned by searches.
    pub fn push(&mut self, id: &str, user_id: &str, item_id: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::WidthDrift {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.lookup.contains_key(id) {
            return Err(Error::DuplicateOpinionId(id.to_string()));
        }
        let unit = UnitVector::new(vector);
        self.lookup.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.meta.push((user_id.to_string(), item_id.to_string()));
        self.zero.push(unit.is_zero());
        self.rows.extend(unit.as_slice().iter().map(|&x| x as f32));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `(user_id, item_id)` of the review behind a row.
    pub fn metadata(&self, row: usize) -> (&str, &str) {
        let (u, i) = &self.meta[row];
        (u, i)
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.rows[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn is_zero(&self, row: usize) -> bool {
        self.zero[row]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub q: usize,
    pub hits: Vec<Hit>,
}

/// Pairs whose opinions must not be returned, e.g. the target pair itself.
pub type Exclusions = HashSet<(String, String)>;

fn better(a: (f64, &str), b: (f64, &str)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Keeps the best `q` rows of `range`, best first.
fn scan(index: &VectorIndex, query: &[f64], q: usize, exclude: &Exclusions, range: std::ops::Range<usize>) -> Vec<(f64, usize)> {
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(q + 1);
    for r in range {
        if index.zero[r] {
            continue;
        }
        let s = row_score(index.row(r), query);
        if top.len() == q && !better((s, &index.ids[r]), (top[q - 1].0, &index.ids[top[q - 1].1])) {
            continue;
        }
        if !exclude.is_empty() {
            let (u, i) = &index.meta[r];
            if exclude.contains(&(u.clone(), i.clone())) {
                continue;
            }
        }
        let at = top.partition_point(|&(ts, tr)| better((ts, &index.ids[tr]), (s, &index.ids[r])));
        top.insert(at, (s, r));
        top.truncate(q);
    }
    top
}

/// Exact top-`q` cosine search. Ties go to the smaller opinion id; rows of
/// excluded pairs and zero rows are skipped. `threads > 1` splits the scan
/// into contiguous chunks and merges the partial results.
pub fn retrieve_top_q_threaded(
    index: &VectorIndex,
    query_id: &str,
    query: &UnitVector,
    q: usize,
    exclude: &Exclusions,
    threads: usize,
) -> Result<RetrievalResult> {
    if q == 0 {
        return Err(Error::Config("top_q must be at least 1".into()));
    }
    if query.dim() != index.dim() {
        return Err(Error::WidthDrift {
            expected: index.dim(),
            found: query.dim(),
        });
    }
    if query.is_zero() {
        return Err(Error::ZeroQuery);
    }
    let n = index.len();
    let threads = threads.clamp(1, n.max(1));
    let top = if threads == 1 {
        scan(index, query.as_slice(), q, exclude, 0..n)
    } else {
        let chunk = n.div_ceil(threads);
        let parts: Vec<Vec<(f64, usize)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = (t * chunk).min(n)..((t + 1) * chunk).min(n);
                    s.spawn(move || scan(index, query.as_slice(), q, exclude, range))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("search thread panicked")).collect()
        });
        let mut all: Vec<(f64, usize)> = parts.into_iter().flatten().collect();
        all.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| index.ids[a.1].cmp(&index.ids[b.1]))
        });
        all.truncate(q);
        all
    };
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        q,
        hits: top
            .into_iter()
            .map(|(score, r)| Hit {
                id: index.ids[r].clone(),
                score,
            })
            .collect(),
    })
}

pub fn retrieve_top_q(
    index: &VectorIndex,
    query_id: &str,
    query: &UnitVector,
    q: usize,
    exclude: &Exclusions,
) -> Result<RetrievalResult> {
    retrieve_top_q_threaded(index, query_id, query, q, exclude, 1)
}

/// Pairwise cosine matrix of the hit vectors, unit diagonal.
pub fn retrieved_set_similarity(index: &VectorIndex, result: &RetrievalResult) -> Result<Matrix> {
    let vecs: Vec<UnitVector> = result
        .hits
        .iter()
        .map(|h| {
            index
                .position(&h.id)
                .map(|r| UnitVector::new(index.row_f64(r)))
                .ok_or_else(|| Error::Config(format!("hit {} is not in the index", h.id)))
        })
        .collect::<Result<_>>()?;
    let n = vecs.len();
    let mut m = Matrix::identity(n);
    for a in 0..n {
        for b in a + 1..n {
            let s = dot(vecs[a].as_slice(), vecs[b].as_slice()).clamp(-1.0, 1.0);
            m[(a, b)] = s;
            m[(b, a)] = s;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries; 1 for fewer than two hits.
pub fn mean_off_diagonal(m: &Matrix) -> f64 {
    let n = m.rows();
    if n < 2 {
        return 1.0;
    }
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                s += m[(a, b)];
            }
        }
    }
    s / (n * (n - 1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: usize,
    pub dim: usize,
    pub threads: usize,
    pub queries: usize,
    pub q: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times each query's search separately.
pub fn bench_retrieval(index: &VectorIndex, queries: &[UnitVector], q: usize, threads: usize) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("query set"));
    }
    let none = Exclusions::new();
    let mut ms = Vec::with_capacity(queries.len());
    for (k, query) in queries.iter().enumerate() {
        let start = Instant::now();
        let r = retrieve_top_q_threaded(index, &k.to_string(), query, q, &none, threads)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(r);
    }
    let mean_ms = ms.iter().sum::<f64>() / ms.len() as f64;
    ms.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        rows: index.len(),
        dim: index.dim(),
        threads,
        queries: queries.len(),
        q,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        p99_ms: percentile(&ms, 99.0),
        mean_ms,
    })
}
