//! Review corpus: JSON-lines loading, validation, splitting, and the
//! bipartite user-item interaction graph.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    /// Stable id: the 1-based source line unless the record carries its own.
    pub review_id: u64,
    pub user_id: String,
    pub item_id: String,
    pub text: String,
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// A repeated (user, item) pair is an error.
    #[default]
    Reject,
    /// A repeated pair replaces the earlier review.
    KeepLatest,
    /// Every review is kept; the graph still has one edge per pair.
    KeepAll,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    reviews: Vec<Review>,
    user_index: BTreeMap<String, Vec<usize>>,
    item_index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    /// Validates and indexes `reviews`. Source lines for error messages are
    /// taken from the review ids.
    pub fn from_reviews(reviews: Vec<Review>, duplicates: DuplicatePolicy) -> Result<Self> {
        if reviews.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ids = HashMap::with_capacity(reviews.len());
        for r in &reviews {
            if r.text.trim().is_empty() {
                return Err(Error::EmptyReview {
                    line: r.review_id as usize,
                });
            }
            if ids.insert(r.review_id, ()).is_some() {
                return Err(Error::DuplicateReviewId(r.review_id));
            }
        }

        let reviews = match duplicates {
            DuplicatePolicy::KeepAll => reviews,
            DuplicatePolicy::Reject => {
                let mut seen = HashMap::new();
                for r in &reviews {
                    if seen.insert((r.user_id.as_str(), r.item_id.as_str()), ()).is_some() {
                        return Err(Error::DuplicatePair {
                            line: r.review_id as usize,
                            user_id: r.user_id.clone(),
                            item_id: r.item_id.clone(),
                        });
                    }
                }
                reviews
            }
            DuplicatePolicy::KeepLatest => {
                let mut last = HashMap::new();
                for (pos, r) in reviews.iter().enumerate() {
                    last.insert((r.user_id.clone(), r.item_id.clone()), pos);
                }
                reviews
                    .into_iter()
                    .enumerate()
                    .filter(|(pos, r)| last[&(r.user_id.clone(), r.item_id.clone())] == *pos)
                    .map(|(_, r)| r)
                    .collect()
            }
        };

        let mut user_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut item_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, r) in reviews.iter().enumerate() {
            user_index.entry(r.user_id.clone()).or_default().push(pos);
            item_index.entry(r.item_id.clone()).or_default().push(pos);
        }
        Ok(Self {
            reviews,
            user_index,
            item_index,
        })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.item_index.keys().map(String::as_str)
    }

    pub fn num_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn user_reviews(&self, user_id: &str) -> Option<impl Iterator<Item = &Review>> {
        self.user_index
            .get(user_id)
            .map(|ps| ps.iter().map(|&p| &self.reviews[p]))
    }

    pub fn item_reviews(&self, item_id: &str) -> Option<impl Iterator<Item = &Review>> {
        self.item_index
            .get(item_id)
            .map(|ps| ps.iter().map(|&p| &self.reviews[p]))
    }

    pub fn find_pair(&self, user_id: &str, item_id: &str) -> Option<&Review> {
        self.user_index.get(user_id).and_then(|ps| {
            ps.iter()
                .map(|&p| &self.reviews[p])
                .rev()
                .find(|r| r.item_id == item_id)
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.reviews {
            let record = ReviewRecord {
                review_id: Some(r.review_id),
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                review: r.text.clone(),
                explanation: r.explanation.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize)]
struct ReviewRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    review_id: Option<u64>,
    user_id: String,
    item_id: String,
    review: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanation: Option<String>,
}

fn required_str(obj: &serde_json::Map<String, Value>, field: &'static str, line: usize) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Err(Error::MissingField { line, field }),
        Some(other) => Err(Error::MalformedLine {
            line,
            message: format!("field \"{field}\" must be a string, found {other}"),
        }),
    }
}

fn parse_record(line_no: usize, line: &str) -> Result<Review> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: line_no,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(Error::MalformedLine {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    let user_id = required_str(&obj, "user_id", line_no)?;
    let item_id = required_str(&obj, "item_id", line_no)?;
    let text = required_str(&obj, "review", line_no)?;
    let explanation = match obj.get("explanation") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("field \"explanation\" must be a string, found {other}"),
            })
        }
    };
    let review_id = match obj.get("review_id") {
        None | Some(Value::Null) => line_no as u64,
        Some(v) => v.as_u64().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            message: format!("field \"review_id\" must be an unsigned integer, found {v}"),
        })?,
    };
    if text.trim().is_empty() {
        return Err(Error::EmptyReview { line: line_no });
    }
    Ok(Review {
        review_id,
        user_id,
        item_id,
        text,
        explanation,
    })
}

/// Streams a JSON-lines review file. Blank lines are skipped but still
/// counted, so ids and error messages refer to physical lines.
pub fn load_reviews(path: &Path, duplicates: DuplicatePolicy) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reviews = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        reviews.push(parse_record(i + 1, &line)?);
    }
    Dataset::from_reviews(reviews, duplicates)
}

/// Bipartite interaction graph with one edge per distinct (user, item) pair.
/// Node ordinals follow the sorted order of the ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    users: Vec<String>,
    items: Vec<String>,
    user_ord: HashMap<String, usize>,
    item_ord: HashMap<String, usize>,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl InteractionGraph {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let users: Vec<String> = dataset.user_ids().map(str::to_owned).collect();
        let items: Vec<String> = dataset.item_ids().map(str::to_owned).collect();
        let user_ord: HashMap<_, _> = users.iter().cloned().zip(0..).collect();
        let item_ord: HashMap<_, _> = items.iter().cloned().zip(0..).collect();
        let edges = dataset
            .reviews()
            .iter()
            .map(|r| (user_ord[&r.user_id], item_ord[&r.item_id]));
        Ok(Self::from_edges_named(users, items, edges))
    }

    /// Graph over anonymous nodes `u0..`, `i0..`. Duplicate edges collapse.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(u, i)) = edges.iter().find(|(u, i)| *u >= num_users || *i >= num_items) {
            return Err(Error::Shape(format!(
                "edge ({u}, {i}) outside a {num_users}x{num_items} graph"
            )));
        }
        let users = (0..num_users).map(|u| format!("u{u}")).collect();
        let items = (0..num_items).map(|i| format!("i{i}")).collect();
        Ok(Self::from_edges_named(users, items, edges.iter().copied()))
    }

    fn from_edges_named(
        users: Vec<String>,
        items: Vec<String>,
        edges: impl Iterator<Item = (usize, usize)>,
    ) -> Self {
        let mut user_adj = vec![Vec::new(); users.len()];
        let mut item_adj = vec![Vec::new(); items.len()];
        for (u, i) in edges {
            user_adj[u].push(i);
            item_adj[i].push(u);
        }
        for adj in user_adj.iter_mut().chain(item_adj.iter_mut()) {
            adj.sort_unstable();
            adj.dedup();
        }
        let user_ord = users.iter().cloned().zip(0..).collect();
        let item_ord = items.iter().cloned().zip(0..).collect();
        Self {
            users,
            items,
            user_ord,
            item_ord,
            user_adj,
            item_adj,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    pub fn user_id(&self, ord: usize) -> &str {
        &self.users[ord]
    }

    pub fn item_id(&self, ord: usize) -> &str {
        &self.items[ord]
    }

    pub fn user_ordinal(&self, id: &str) -> Option<usize> {
        self.user_ord.get(id).copied()
    }

    pub fn item_ordinal(&self, id: &str) -> Option<usize> {
        self.item_ord.get(id).copied()
    }

    /// Items interacted by user `u`, ascending.
    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        &self.user_adj[u]
    }

    /// Users who interacted with item `i`, ascending.
    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        &self.item_adj[i]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_adj[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_adj[i].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    train_fraction: f64,
    seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidSplit(format!(
                "train fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(train, test)` sizes for `n` units: test = max(1, round((1 - f)·n)).
    pub fn sizes(&self, n: usize) -> Result<(usize, usize)> {
        let test = (((1.0 - self.train_fraction) * n as f64).round() as usize).max(1);
        if test >= n {
            return Err(Error::InvalidSplit(format!(
                "fraction {} on {n} pairs leaves the train partition empty",
                self.train_fraction
            )));
        }
        Ok((n - test, test))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

impl Split {
    pub fn manifest(&self, seed: u64) -> SplitManifest {
        SplitManifest {
            seed,
            train: self.train.reviews().iter().map(|r| r.review_id).collect(),
            test: self.test.reviews().iter().map(|r| r.review_id).collect(),
        }
    }
}

/// Random split over distinct (user, item) pairs: every review of a pair
/// lands on the same side. Partitions keep the input order.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<Split> {
    let mut unit_of_pair: HashMap<(&str, &str), usize> = HashMap::new();
    let mut units: Vec<Vec<usize>> = Vec::new();
    for (pos, r) in dataset.reviews().iter().enumerate() {
        let next = units.len();
        let u = *unit_of_pair
            .entry((r.user_id.as_str(), r.item_id.as_str()))
            .or_insert(next);
        if u == next {
            units.push(Vec::new());
        }
        units[u].push(pos);
    }

    let (_, test_n) = spec.sizes(units.len())?;
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let mut in_test = vec![false; dataset.len()];
    for &u in &order[..test_n] {
        for &pos in &units[u] {
            in_test[pos] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = dataset
        .reviews()
        .iter()
        .cloned()
        .zip(in_test)
        .partition(|(_, t)| *t);
    Ok(Split {
        train: Dataset::from_reviews(train.into_iter().map(|(r, _)| r).collect(), DuplicatePolicy::KeepAll)?,
        test: Dataset::from_reviews(test.into_iter().map(|(r, _)| r).collect(), DuplicatePolicy::KeepAll)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn review(id: u64, u: &str, i: &str) -> Review {
        Review {
            review_id: id,
            user_id: u.into(),
            item_id: i.into(),
            text: format!("review {id}"),
            explanation: None,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_reviews_for_two_users() {
        let f = write_lines(&[
            r#"{"user_id":"u1","item_id":"i1","review":"great"}"#,
            r#"{"user_id":"u1","item_id":"i2","review":"fine","explanation":"x"}"#,
            r#"{"user_id":"u2","item_id":"i1","review":"poor"}"#,
        ]);
        let ds = load_reviews(f.path(), DuplicatePolicy::Reject).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.reviews()[1].review_id, 2);
        assert_eq!(ds.reviews()[1].explanation.as_deref(), Some("x"));
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_lines(&[]);
        let err = load_reviews(f.path(), DuplicatePolicy::Reject).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn missing_item_id_names_the_line() {
        let f = write_lines(&[
            r#"{"user_id":"u1","item_id":"i1","review":"great"}"#,
            r#"{"user_id":"u1","review":"no item"}"#,
        ]);
        let err = load_reviews(f.path(), DuplicatePolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::MissingField { line: 2, field: "item_id" }));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn malformed_json_names_the_line() {
        let f = write_lines(&[r#"{"user_id":"u1","item_id":"i1","review":"ok"}"#, "", "{oops"]);
        let err = load_reviews(f.path(), DuplicatePolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 3, .. }), "{err}");
    }

    #[test]
    fn whitespace_review_is_rejected() {
        let f = write_lines(&[r#"{"user_id":"u1","item_id":"i1","review":"   "}"#]);
        assert!(matches!(
            load_reviews(f.path(), DuplicatePolicy::Reject),
            Err(Error::EmptyReview { line: 1 })
        ));
    }

    #[test]
    fn duplicate_pairs_rejected_by_default_and_latest_kept_on_request() {
        let lines = [
            r#"{"user_id":"u1","item_id":"i1","review":"first"}"#,
            r#"{"user_id":"u2","item_id":"i1","review":"other"}"#,
            r#"{"user_id":"u1","item_id":"i1","review":"second"}"#,
        ];
        let f = write_lines(&lines);
        assert!(matches!(
            load_reviews(f.path(), DuplicatePolicy::Reject),
            Err(Error::DuplicatePair { line: 3, .. })
        ));
        let ds = load_reviews(f.path(), DuplicatePolicy::KeepLatest).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.find_pair("u1", "i1").unwrap().text, "second");
    }

    #[test]
    fn graph_degrees_for_three_reviews() {
        let ds = Dataset::from_reviews(
            vec![review(1, "u1", "i1"), review(2, "u1", "i2"), review(3, "u2", "i1")],
            DuplicatePolicy::Reject,
        )
        .unwrap();
        let g = InteractionGraph::build(&ds).unwrap();
        let u1 = g.user_ordinal("u1").unwrap();
        let u2 = g.user_ordinal("u2").unwrap();
        let i1 = g.item_ordinal("i1").unwrap();
        let i2 = g.item_ordinal("i2").unwrap();
        assert_eq!((g.user_degree(u1), g.user_degree(u2)), (2, 1));
        assert_eq!((g.item_degree(i1), g.item_degree(i2)), (2, 1));
    }

    #[test]
    fn single_review_graph() {
        let ds = Dataset::from_reviews(vec![review(1, "u", "i")], DuplicatePolicy::Reject).unwrap();
        let g = InteractionGraph::build(&ds).unwrap();
        assert_eq!((g.user_degree(0), g.item_degree(0)), (1, 1));
    }

    #[test]
    fn duplicate_pairs_collapse_to_one_edge() {
        let reviews = vec![
            review(1, "u1", "i1"),
            review(2, "u1", "i1"),
            review(3, "u2", "i1"),
            review(4, "u1", "i2"),
            review(5, "u1", "i2"),
        ];
        let ds = Dataset::from_reviews(reviews.clone(), DuplicatePolicy::KeepAll).unwrap();
        let g = InteractionGraph::build(&ds).unwrap();
        // Oracle: set of distinct pairs.
        let distinct: HashSet<(String, String)> = reviews
            .iter()
            .map(|r| (r.user_id.clone(), r.item_id.clone()))
            .collect();
        assert_eq!(g.num_edges(), distinct.len());
        let got: HashSet<(String, String)> = g
            .edges()
            .map(|(u, i)| (g.user_id(u).to_owned(), g.item_id(i).to_owned()))
            .collect();
        assert_eq!(got, distinct);
        assert_eq!(g.user_degree(g.user_ordinal("u1").unwrap()), 2);
        assert_eq!(g.item_degree(g.item_ordinal("i1").unwrap()), 2);
    }

    fn ten_reviews() -> Dataset {
        let reviews = (1..=10)
            .map(|k| review(k, &format!("u{}", k % 3), &format!("i{k}")))
            .collect();
        Dataset::from_reviews(reviews, DuplicatePolicy::Reject).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let ds = ten_reviews();
        let spec = SplitSpec::new(0.8, 7).unwrap();
        let a = split(&ds, spec).unwrap();
        let b = split(&ds, spec).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        assert_eq!(a, b);
        assert_eq!(a.manifest(7), b.manifest(7));
    }

    #[test]
    fn split_flooring_rule() {
        let ds = ten_reviews();
        // (1 - 0.99)·10 = 0.1 rounds to 0, raised to the minimum of 1.
        let s = split(&ds, SplitSpec::new(0.99, 1).unwrap()).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (9, 1));
        // (1 - 0.05)·10 = 9.5 rounds to 10, leaving nothing to train on.
        assert!(matches!(
            split(&ds, SplitSpec::new(0.05, 1).unwrap()),
            Err(Error::InvalidSplit(_))
        ));
    }

    #[test]
    fn split_fraction_bounds() {
        assert!(SplitSpec::new(0.0, 1).is_err());
        assert!(SplitSpec::new(1.0, 1).is_err());
        assert!(SplitSpec::new(f64::NAN, 1).is_err());
    }

    #[test]
    fn split_keeps_duplicate_pairs_together() {
        let reviews = vec![
            review(1, "u1", "i1"),
            review(2, "u1", "i1"),
            review(3, "u2", "i1"),
            review(4, "u2", "i2"),
        ];
        let ds = Dataset::from_reviews(reviews, DuplicatePolicy::KeepAll).unwrap();
        for seed in 0..20 {
            let s = split(&ds, SplitSpec::new(0.5, seed).unwrap()).unwrap();
            for r in s.test.reviews() {
                assert!(s.train.find_pair(&r.user_id, &r.item_id).is_none());
            }
            assert_eq!(s.train.len() + s.test.len(), 4);
        }
    }
}
