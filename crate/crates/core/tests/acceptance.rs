//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use exrec_core::corpus::InteractionGraph;
use exrec_core::evalkit::{bertscore, BertScoreOptions};
use exrec_core::fixtures::{clustered_corpus, toy_corpus, write_toy_corpus, ClusterSpec, ClusteredPair};
use exrec_core::gcn::{propagate_layer, Activation, GcnConfig, GraphEncoder, LinearSoftmaxHead, TrainBatch};
use exrec_core::linalg::Matrix;
use exrec_core::mock::{FirstSentenceSummarizer, HashEmbedder};
use exrec_core::pipeline::{check_leakage, run_pipeline_with, PipelineConfig, Ports, RunManifest, StageStatus, MANIFEST_FILE};
use exrec_core::profiler::{Leaf, Profiler, ProfilerConfig, SubjectKind};
use exrec_core::retrieval::{
    adapter_loss_grad, bench_retrieval, fit_adapter_vectors, latent_query, mean_off_diagonal, profile_query_text,
    retrieve_top_q, retrieved_set_similarity, AdapterParams, ContrastiveConfig, Denominator, Exclusions, UnitVector,
    VectorIndex,
};
use exrec_core::retry::RetryPolicy;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {t:.2?}, limit {limit:?}"));
    }
    Ok(t)
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// 1 -------------------------------------------------------------------------

/// Stacked `[users; items]` times the dense normalized adjacency.
fn dense_propagation(g: &InteractionGraph, users: &Matrix, items: &Matrix) -> (Matrix, Matrix) {
    let (nu, ni) = (g.num_users(), g.num_items());
    let n = nu + ni;
    let mut a = vec![vec![0.0; n]; n];
    for (u, i) in g.edges() {
        a[u][nu + i] = 1.0;
        a[nu + i][u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let e: Vec<&[f64]> = (0..nu).map(|u| users.row(u)).chain((0..ni).map(|i| items.row(i))).collect();
    let d = users.cols();
    let mut out = vec![vec![0.0; d]; n];
    for r in 0..n {
        for c in 0..n {
            if a[r][c] != 0.0 {
                let w = a[r][c] / (deg[r].sqrt() * deg[c].sqrt());
                for k in 0..d {
                    out[r][k] += w * e[c][k];
                }
            }
        }
    }
    (
        Matrix::from_rows(&out[..nu]).unwrap(),
        Matrix::from_rows(&out[nu..]).unwrap(),
    )
}

fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> InteractionGraph {
    let nu = rng.gen_range(1..max_nodes);
    let ni = rng.gen_range(1..=(max_nodes - nu));
    let mut edges: Vec<(usize, usize)> = (0..nu * ni).filter(|_| rng.gen_bool(0.3)).map(|k| (k / ni, k % ni)).collect();
    // No isolated nodes.
    for u in 0..nu {
        edges.push((u, rng.gen_range(0..ni)));
    }
    for i in 0..ni {
        edges.push((rng.gen_range(0..nu), i));
    }
    InteractionGraph::from_edges(nu, ni, &edges).unwrap()
}

#[allow(clippy::approx_constant)]
fn lightgcn_oracle() -> Outcome {
    let start = Instant::now();
    let g = InteractionGraph::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap();
    let items = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (u, _) = propagate_layer(&g, &Matrix::zeros(2, 2), &items).map_err(|e| e.to_string())?;
    ensure!(
        (u[(0, 0)] - 0.5).abs() < 1e-5 && (u[(0, 1)] - 0.70711).abs() < 1e-5,
        "worked example gave [{}, {}]",
        u[(0, 0)],
        u[(0, 1)]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graphs = 500;
    let mut worst = 0.0f64;
    for _ in 0..graphs {
        let g = random_graph(&mut rng, 32);
        let d = rng.gen_range(1..6);
        let users = Matrix::random_normal(g.num_users(), d, 1.0, &mut rng);
        let items = Matrix::random_normal(g.num_items(), d, 1.0, &mut rng);
        let (pu, pi) = propagate_layer(&g, &users, &items).map_err(|e| e.to_string())?;
        let (ou, oi) = dense_propagation(&g, &users, &items);
        for (a, b) in [(&pu, &ou), (&pi, &oi)] {
            for r in 0..a.rows() {
                for c in 0..d {
                    worst = worst.max((a[(r, c)] - b[(r, c)]).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-10, "max deviation {worst:e}");
    let t = within(Duration::from_secs(5), start)?;
    Ok(format!("{graphs} graphs, max deviation {worst:.1e}, worked example ok, {t:.2?}"))
}

// 2 -------------------------------------------------------------------------

const H: f64 = 1e-5;

fn nll_gradient_seed(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 10);
    let cfg = GcnConfig {
        embedding_width: 4,
        layers: 2,
        hidden_width: 5,
        activation: if seed.is_multiple_of(2) { Activation::Relu } else { Activation::Identity },
        init_std: 0.5,
        seed,
        ..GcnConfig::default()
    };
    let vocab = 7;
    let mut enc = GraphEncoder::init(&g, &cfg, 3);
    let head = LinearSoftmaxHead::random(3, vocab, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..g.num_users()), rng.gen_range(0..g.num_items()))).collect();
    let targets: Vec<Vec<u32>> = (0..4)
        .map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..vocab as u32)).collect())
        .collect();
    let batch = TrainBatch::new(pairs, targets).map_err(|e| e.to_string())?;
    let per_token = seed.is_multiple_of(3);
    let (_, grads) = enc.loss_and_grad(&g, &head, &batch, per_token).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let analytic: Vec<f64> = grads.projection.parameters().collect();
    for (j, &a) in analytic.iter().enumerate() {
        let orig = enc.projection.parameters().nth(j).unwrap();
        *enc.projection.parameters_mut().nth(j).unwrap() = orig + H;
        let up = enc.loss(&g, &head, &batch, per_token).unwrap();
        *enc.projection.parameters_mut().nth(j).unwrap() = orig - H;
        let down = enc.loss(&g, &head, &batch, per_token).unwrap();
        *enc.projection.parameters_mut().nth(j).unwrap() = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * H)));
    }
    for side in 0..2 {
        let (rows, cols) = if side == 0 {
            (enc.table.users.rows(), enc.table.users.cols())
        } else {
            (enc.table.items.rows(), enc.table.items.cols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let a = if side == 0 { grads.users[(r, c)] } else { grads.items[(r, c)] };
                let m = if side == 0 { &mut enc.table.users } else { &mut enc.table.items };
                let orig = m[(r, c)];
                m[(r, c)] = orig + H;
                let up = enc.loss(&g, &head, &batch, per_token).unwrap();
                let m = if side == 0 { &mut enc.table.users } else { &mut enc.table.items };
                m[(r, c)] = orig - H;
                let down = enc.loss(&g, &head, &batch, per_token).unwrap();
                let m = if side == 0 { &mut enc.table.users } else { &mut enc.table.items };
                m[(r, c)] = orig;
                worst = worst.max(relative_error(a, (up - down) / (2.0 * H)));
            }
        }
    }
    Ok(worst)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            UnitVector::new(v).into_vec()
        })
        .collect()
}

fn adapter_gradient_seed(seed: u64, den: Denominator) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (rng.gen_range(2..6), rng.gen_range(2..5));
    let xs = unit_rows(&mut rng, n, d);
    let ps = unit_rows(&mut rng, n, d);
    let mut params = AdapterParams::identity(d);
    for p in params.parameters_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    let tau = rng.gen_range(0.1..1.0);
    let loss = |p: &AdapterParams| adapter_loss_grad(p, &xs, &ps, tau, den).unwrap().0;
    let (_, grad) = adapter_loss_grad(&params, &xs, &ps, tau, den).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (j, &a) in grad.iter().enumerate() {
        let orig = params.parameters()[j];
        *params.parameters_mut().nth(j).unwrap() = orig + H;
        let up = loss(&params);
        *params.parameters_mut().nth(j).unwrap() = orig - H;
        let down = loss(&params);
        *params.parameters_mut().nth(j).unwrap() = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * H)));
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let seeds = 24;
    let mut nll = 0.0f64;
    let mut infonce = 0.0f64;
    for seed in 0..seeds {
        nll = nll.max(nll_gradient_seed(seed)?);
        for den in [Denominator::Diagonal, Denominator::InBatch] {
            infonce = infonce.max(adapter_gradient_seed(seed, den)?);
        }
    }
    ensure!(nll <= 1e-4, "projection NLL relative error {nll:e}");
    ensure!(infonce <= 1e-4, "adapter InfoNCE relative error {infonce:e}");
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{seeds} seeds each, max relative error NLL {nll:.1e}, InfoNCE {infonce:.1e}, {t:.2?}"
    ))
}

// 3 -------------------------------------------------------------------------

/// Level sizes and call count: every level-0 group costs a call, higher
/// groups only when they hold at least two nodes.
fn tree_recurrence(m: usize, k: usize) -> (Vec<usize>, u32) {
    let mut sizes = vec![m];
    let mut calls = 0;
    loop {
        let cur = *sizes.last().unwrap();
        if sizes.len() > 1 && cur == 1 {
            break;
        }
        calls += if sizes.len() == 1 {
            cur.div_ceil(k)
        } else {
            cur / k + usize::from(cur % k >= 2)
        };
        sizes.push(cur.div_ceil(k));
    }
    (sizes, calls as u32)
}

fn profiles_jsonl(concurrency: usize) -> Result<Vec<u8>, String> {
    let data = toy_corpus();
    let summarizer = FirstSentenceSummarizer { budget_chars: 12000 };
    let cfg = ProfilerConfig {
        arity: 3,
        max_concurrency: concurrency,
        ..ProfilerConfig::default()
    };
    let p = Profiler::new(&summarizer, cfg).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for u in data.user_ids() {
        serde_json::to_writer(&mut out, &p.user_profile(&data, u).map_err(|e| e.to_string())?).unwrap();
        out.push(b'\n');
    }
    for i in data.item_ids() {
        serde_json::to_writer(&mut out, &p.item_profile(&data, i).map_err(|e| e.to_string())?).unwrap();
        out.push(b'\n');
    }
    Ok(out)
}

fn tree_structure() -> Outcome {
    let start = Instant::now();
    let summarizer = FirstSentenceSummarizer { budget_chars: 12000 };
    let mut trees = 0;
    for k in 2..=6 {
        let cfg = ProfilerConfig {
            arity: k,
            retry: RetryPolicy::immediate(0),
            ..ProfilerConfig::default()
        };
        let p = Profiler::new(&summarizer, cfg).map_err(|e| e.to_string())?;
        for m in 1..=100 {
            let leaves: Vec<Leaf> = (0..m)
                .map(|j| Leaf {
                    review_id: j as u64,
                    text: format!("Leaf {j}. More."),
                })
                .collect();
            let tree = p.build_tree(&leaves, SubjectKind::User, "s", m as u64).map_err(|e| e.to_string())?;
            let (sizes, calls) = tree_recurrence(m, k);
            ensure!(tree.level_sizes() == sizes, "m={m} k={k}: levels {:?} != {sizes:?}", tree.level_sizes());
            ensure!(tree.calls == calls, "m={m} k={k}: {} calls != {calls}", tree.calls);
            trees += 1;
        }
    }
    let reference = profiles_jsonl(1)?;
    ensure!(profiles_jsonl(1)? == reference, "profiles differ between runs");
    for c in [4, 16] {
        ensure!(profiles_jsonl(c)? == reference, "profiles differ at concurrency {c}");
    }
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("{trees} trees match the recurrence; profiles identical at concurrency 1/4/16, {t:.2?}"))
}

// 4 -------------------------------------------------------------------------

/// Exhaustive oracle: score every non-zero, non-excluded row, sort by score
/// descending then id ascending.
fn exhaustive_top(rows: &[(String, String, String, Vec<f32>)], q: &[f64], top: usize, ex: &Exclusions) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = rows
        .iter()
        .filter(|(_, u, i, r)| r.iter().any(|&x| x != 0.0) && !ex.contains(&(u.clone(), i.clone())))
        .map(|(id, _, _, r)| {
            let mut s = 0.0f64;
            for (a, b) in r.iter().zip(q) {
                s += f64::from(*a) * b;
            }
            (id.clone(), s.clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(top);
    all
}

fn retrieval_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut queries = 0;
    for (n, nq) in [(7, 100), (100, 300), (1000, 300), (10_000, 300)] {
        let d = rng.gen_range(3..24);
        let mut index = VectorIndex::new(d);
        let mut rows = Vec::new();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let mut last: Option<Vec<f64>> = None;
        for id in ids {
            let v: Vec<f64> = match rng.gen_range(0..20) {
                0 => vec![0.0; d],
                // Exact duplicates force score ties.
                1 | 2 if last.is_some() => last.clone().unwrap(),
                _ => (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            last = Some(v.clone());
            let (id, u, i) = (format!("r{id}"), format!("u{}", rng.gen_range(0..20)), format!("i{}", rng.gen_range(0..20)));
            index.push(&id, &u, &i, v.clone()).map_err(|e| e.to_string())?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let stored: Vec<f32> = v.iter().map(|x| if norm > 0.0 { (x / norm) as f32 } else { 0.0 }).collect();
            rows.push((id, u, i, stored));
        }
        let mut done = 0;
        while done < nq {
            let raw: Vec<f64> = if rng.gen_bool(0.2) {
                rows[rng.gen_range(0..rows.len())].3.iter().map(|&x| f64::from(x)).collect()
            } else {
                (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            if raw.iter().all(|&x| x == 0.0) {
                continue;
            }
            let q = UnitVector::new(raw);
            let top = rng.gen_range(1..=25);
            let mut ex = Exclusions::new();
            if rng.gen_bool(0.5) {
                ex.insert((format!("u{}", rng.gen_range(0..20)), format!("i{}", rng.gen_range(0..20))));
            }
            let got = retrieve_top_q(&index, "q", &q, top, &ex).map_err(|e| e.to_string())?;
            let want = exhaustive_top(&rows, q.as_slice(), top, &ex);
            let got: Vec<(String, f64)> = got.hits.into_iter().map(|h| (h.id, h.score)).collect();
            ensure!(got == want, "n={n} top={top}: {got:?} != {want:?}");
            queries += 1;
            done += 1;
        }
    }
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("{queries} queries match the exhaustive sort, {t:.2?}"))
}

// 5 -------------------------------------------------------------------------

fn retrieval_latency() -> Outcome {
    let (rows, dim) = (100_000, 768);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut index = VectorIndex::new(dim);
    for k in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        index.push(&format!("r{k}"), "u", &format!("i{k}"), v).map_err(|e| e.to_string())?;
    }
    let queries: Vec<UnitVector> = (0..100)
        .map(|_| UnitVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let report = bench_retrieval(&index, &queries, 8, 1).map_err(|e| e.to_string())?;
    ensure!(report.p99_ms < 1000.0, "p99 {:.1} ms", report.p99_ms);
    Ok(format!(
        "{rows}x{dim}, top-8, 1 thread: p50 {:.1} ms, p99 {:.1} ms",
        report.p50_ms, report.p99_ms
    ))
}

// 6 -------------------------------------------------------------------------

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Loop oracle with P over reference tokens and R over candidate tokens.
fn bertscore_loops(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> (f64, f64, f64) {
    let mut p = 0.0;
    for r in reference {
        let mut best = f64::NEG_INFINITY;
        for c in candidate {
            best = best.max(cos(r, c));
        }
        p += best;
    }
    p /= reference.len() as f64;
    let mut rr = 0.0;
    for c in candidate {
        let mut best = f64::NEG_INFINITY;
        for r in reference {
            best = best.max(cos(r, c));
        }
        rr += best;
    }
    rr /= candidate.len() as f64;
    let f = if p + rr == 0.0 { 0.0 } else { 2.0 * p * rr / (p + rr) };
    (p, rr, f)
}

fn bertscore_cases() -> Outcome {
    let opts = BertScoreOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = unit_rows(&mut rng, 5, 8);
    let s = bertscore(&seq, &seq, opts).map_err(|e| e.to_string())?;
    ensure!(
        [s.p, s.r, s.f1].iter().all(|v| (v - 1.0).abs() < 1e-6),
        "identical sequences gave {s:?}"
    );
    let s = bertscore(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]], opts).map_err(|e| e.to_string())?;
    ensure!(
        (s.p - 0.5).abs() < 1e-4 && (s.r - 1.0).abs() < 1e-4 && (s.f1 - 0.6667).abs() < 1e-4,
        "2-vs-1 example gave {s:?}"
    );
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let d = rng.gen_range(2..10);
        let (nr, nc) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let r = unit_rows(&mut rng, nr, d);
        let c = unit_rows(&mut rng, nc, d);
        let got = bertscore(&r, &c, opts).map_err(|e| e.to_string())?;
        let (p, rr, f) = bertscore_loops(&r, &c);
        worst = worst.max((got.p - p).abs()).max((got.r - rr).abs()).max((got.f1 - f).abs());
    }
    ensure!(worst < 1e-9, "loop oracle deviation {worst:e}");
    Ok(format!("identity and 2-vs-1 cases ok; 500 random cases within {worst:.1e}"))
}

// 7, 8 ----------------------------------------------------------------------

struct Clustered {
    corpus: exrec_core::fixtures::ClusteredCorpus,
    embedder: HashEmbedder,
    index: VectorIndex,
}

impl Clustered {
    fn new() -> Self {
        let corpus = clustered_corpus(ClusterSpec::default());
        let embedder = HashEmbedder::new(64, 0);
        let mut index = VectorIndex::new(64);
        for o in &corpus.opinions {
            index.push(&o.id, &o.user_id, &o.item_id, embedder.embed_one(&o.text)).unwrap();
        }
        Self { corpus, embedder, index }
    }

    fn query(&self, p: &ClusteredPair) -> Vec<f64> {
        UnitVector::new(self.embedder.embed_one(&profile_query_text(&p.user_profile, &p.item_profile))).into_vec()
    }

    /// One held-out pair per cluster; the rest train.
    fn split(&self) -> (Vec<&ClusteredPair>, Vec<&ClusteredPair>) {
        let per = self.corpus.pairs.len() / self.corpus.clusters;
        let (held, train): (Vec<_>, Vec<_>) = self.corpus.pairs.iter().enumerate().partition(|(k, _)| k % per == 0);
        (held.into_iter().map(|x| x.1).collect(), train.into_iter().map(|x| x.1).collect())
    }

    fn fit(&self, train: &[&ClusteredPair]) -> Result<exrec_core::retrieval::AdapterFit, String> {
        let xs: Vec<Vec<f64>> = train.iter().map(|p| self.query(p)).collect();
        let ps: Vec<Vec<f64>> = train
            .iter()
            .map(|p| UnitVector::new(self.embedder.embed_one(&p.positive)).into_vec())
            .collect();
        let cfg = ContrastiveConfig {
            batch_size: xs.len(),
            denominator: Denominator::InBatch,
            ..ContrastiveConfig::default()
        };
        fit_adapter_vectors(&xs, &ps, &cfg).map_err(|e| e.to_string())
    }

    fn top1_hit(&self, adapter: &AdapterParams, p: &ClusteredPair) -> bool {
        let q = adapter.apply(&self.query(p)).unwrap();
        let r = retrieve_top_q(&self.index, "q", &q, 1, &Exclusions::new()).unwrap();
        let row = self.index.position(&r.hits[0].id).unwrap();
        self.corpus.opinions[row].cluster == p.cluster
    }

    fn mean_similarity(&self, queries: &[UnitVector]) -> f64 {
        let sims: Vec<f64> = queries
            .iter()
            .map(|q| {
                let r = retrieve_top_q(&self.index, "q", q, 8, &Exclusions::new()).unwrap();
                mean_off_diagonal(&retrieved_set_similarity(&self.index, &r).unwrap())
            })
            .collect();
        sims.iter().sum::<f64>() / sims.len() as f64
    }
}

fn contrastive_separability(fx: &Clustered) -> Outcome {
    let (held, train) = fx.split();
    let fit = fx.fit(&train)?;
    ensure!(
        fit.history.windows(2).all(|w| w[1] < w[0]),
        "loss not strictly decreasing"
    );
    let trained = held.iter().filter(|p| fx.top1_hit(&fit.params, p)).count();
    let identity = AdapterParams::identity(64);
    let untrained = held.iter().filter(|p| fx.top1_hit(&identity, p)).count();
    let untrained_all = fx.corpus.pairs.iter().filter(|p| fx.top1_hit(&identity, p)).count();
    ensure!(trained * 8 >= 7 * held.len(), "trained hit@1 {trained}/{}", held.len());
    ensure!(
        untrained_all * 4 < fx.corpus.pairs.len(),
        "untrained hit@1 {untrained_all}/{} is far above chance",
        fx.corpus.pairs.len()
    );
    Ok(format!(
        "trained hit@1 {trained}/{n}, untrained {untrained}/{n} ({untrained_all}/{all} over all pairs, chance 1/{c}); loss {:.3} -> {:.3} over {} strictly decreasing steps",
        fit.initial_loss,
        fit.final_loss,
        fit.history.len(),
        n = held.len(),
        all = fx.corpus.pairs.len(),
        c = fx.corpus.clusters,
    ))
}

fn diversity_direction(fx: &Clustered) -> Outcome {
    let (held, train) = fx.split();
    let fit = fx.fit(&train)?;
    let profile: Vec<UnitVector> = held.iter().map(|p| fit.params.apply(&fx.query(p)).unwrap()).collect();
    let latent: Vec<UnitVector> = held
        .iter()
        .map(|p| {
            let side = |pick: &dyn Fn(usize) -> bool| -> Vec<UnitVector> {
                (0..fx.index.len()).filter(|&k| pick(k)).map(|k| UnitVector::new(fx.index.row_f64(k))).collect()
            };
            let us = side(&|k| fx.index.metadata(k).0 == p.user_id);
            let is = side(&|k| fx.index.metadata(k).1 == p.item_id);
            latent_query(&us, &is).unwrap()
        })
        .collect();
    let (sp, sl) = (fx.mean_similarity(&profile), fx.mean_similarity(&latent));
    ensure!(sp >= sl, "profile {sp:.4} < latent {sl:.4}");
    Ok(format!("mean pairwise similarity: profile {sp:.4} >= latent {sl:.4}"))
}

// 9 -------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reviews = root.path().join("reviews.jsonl");
    write_toy_corpus(&reviews).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(PipelineConfig, RunManifest), String> {
        let mut cfg = PipelineConfig::default();
        cfg.data.reviews = reviews.clone();
        cfg.run.dir = root.path().join(name);
        let m = run_pipeline_with(&cfg, &Ports::mock(&cfg.ports), None).map_err(|e| e.to_string())?;
        Ok((cfg, m))
    };
    let (cfg, a) = run("a")?;
    let t = within(Duration::from_secs(120), start)?;
    let on_disk = RunManifest::read(&cfg.run.dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    ensure!(on_disk == a && a.failed.is_none(), "manifest missing or marks a failure");
    ensure!(
        a.stages.len() == 9 && a.stages.iter().all(|s| s.status == StageStatus::Ran),
        "not every stage ran"
    );
    // Re-check leakage independently of the assemble stage.
    let test = exrec_core::corpus::load_reviews(&cfg.run.dir.join("test.jsonl"), cfg.data.duplicates).map_err(|e| e.to_string())?;
    let prompts = std::fs::read_to_string(cfg.run.dir.join("prompts.jsonl")).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for line in prompts.lines() {
        let b: exrec_core::pipeline::PromptBundle = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let target = test.find_pair(&b.user_id, &b.item_id).ok_or("prompt for an unknown pair")?;
        check_leakage(&b, target).map_err(|e| e.to_string())?;
        checked += 1;
    }
    ensure!(checked > 0, "no prompts");
    let (_, b) = run("b")?;
    ensure!(a.artifact_digests() == b.artifact_digests(), "artifacts differ between runs");
    let files: HashSet<String> = a.artifact_digests().into_keys().collect();
    Ok(format!(
        "run in {t:.2?}, {} artifacts byte-identical across two directories, {checked} prompts leak-free",
        files.len()
    ))
}

fn main() {
    let started = Instant::now();
    let clustered = Clustered::new();
    let criteria: Vec<Criterion> = vec![
        ("lightgcn propagation oracle", Box::new(lightgcn_oracle)),
        ("gradient suite", Box::new(gradient_suite)),
        ("aggregation tree structure", Box::new(tree_structure)),
        ("retrieval exactness", Box::new(retrieval_exactness)),
        ("retrieval latency", Box::new(retrieval_latency)),
        ("bertscore", Box::new(bertscore_cases)),
        ("contrastive separability", Box::new(|| contrastive_separability(&clustered))),
        ("diversity direction", Box::new(|| diversity_direction(&clustered))),
        ("end-to-end smoke run", Box::new(end_to_end)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        criteria.len() - failed,
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
