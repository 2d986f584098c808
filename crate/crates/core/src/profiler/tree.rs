use crate::digest::Hasher;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    /// Indices into the level below; empty for leaves.
    pub children: Vec<usize>,
    pub text: String,
    /// Source review for leaves.
    pub review_id: Option<u64>,
    /// Whether producing this node cost a summarizer call.
    pub called: bool,
}

/// Level 0 holds the raw reviews; the last level holds the root (or, for the
/// second-layer ablation, the root's would-be children).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationTree {
    pub arity: usize,
    pub levels: Vec<Vec<TreeNode>>,
    pub calls: u32,
}

impl AggregationTree {
    pub fn root(&self) -> &TreeNode {
        &self.levels.last().expect("tree has at least one level")[0]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn leaves(&self) -> &[TreeNode] {
        &self.levels[0]
    }

    /// Hex SHA-256 over the structure, texts, and summarizer identity.
    pub fn digest(&self, summarizer_identity: &str) -> String {
        let mut h = Hasher::new();
        h.str(summarizer_identity);
        h.update(&(self.arity as u64).to_le_bytes());
        for level in &self.levels {
            h.update(&(level.len() as u64).to_le_bytes());
            for node in level {
                h.update(&(node.children.len() as u64).to_le_bytes());
                for &c in &node.children {
                    h.update(&(c as u64).to_le_bytes());
                }
                h.update(&node.review_id.map_or(u64::MAX, |r| r).to_le_bytes());
                h.str(&node.text);
            }
        }
        h.finish().hex()
    }

    /// Checks the structural invariants: ceil-division level sizes,
    /// consecutive grouping, and exactly one parent per non-root node.
    pub fn check_structure(&self) -> Result<(), String> {
        for l in 1..self.levels.len() {
            let below = self.levels[l - 1].len();
            let expect = below.div_ceil(self.arity);
            if self.levels[l].len() != expect {
                return Err(format!("level {l} has {} nodes, expected {expect}", self.levels[l].len()));
            }
            let mut next_child = 0;
            for node in &self.levels[l] {
                for &c in &node.children {
                    if c != next_child {
                        return Err(format!("level {l}: child {c} out of order"));
                    }
                    next_child += 1;
                }
                if node.children.is_empty() || node.children.len() > self.arity {
                    return Err(format!("level {l}: group of {}", node.children.len()));
                }
            }
            if next_child != below {
                return Err(format!("level {l} covers {next_child} of {below} children"));
            }
        }
        if self.levels[0].iter().any(|n| n.review_id.is_none() || !n.children.is_empty()) {
            return Err("level 0 must hold only raw reviews".into());
        }
        Ok(())
    }
}
