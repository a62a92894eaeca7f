//! Level-by-level cluster-and-summarize tree over fused leaf embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{select_k, KSelectionConfig};
use crate::embedding::FusedEmbedding;
use crate::error::{Error, Result};
use crate::providers::ProviderSet;
use crate::Real;

pub const DEFAULT_SUMMARY_BUDGET: usize = 512;
pub const DEFAULT_ROOT_THRESHOLD: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeSource {
    Chunk {
        chunk_id: String,
        doc_id: String,
        image_ids: Vec<String>,
    },
    Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub node_id: String,
    pub level: usize,
    pub children: Vec<String>,
    /// Chunk text for leaves, provider summary otherwise.
    pub summary_text: String,
    pub embedding: FusedEmbedding<Real>,
    pub source: NodeSource,
}

impl TreeNode {
    pub fn leaf(
        chunk_id: impl Into<String>,
        doc_id: impl Into<String>,
        text: impl Into<String>,
        image_ids: Vec<String>,
        embedding: FusedEmbedding<Real>,
    ) -> Self {
        let chunk_id = chunk_id.into();
        Self {
            node_id: chunk_id.clone(),
            level: 0,
            children: Vec::new(),
            summary_text: text.into(),
            embedding,
            source: NodeSource::Chunk {
                chunk_id,
                doc_id: doc_id.into(),
                image_ids,
            },
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn doc_id(&self) -> Option<&str> {
        match &self.source {
            NodeSource::Chunk { doc_id, .. } => Some(doc_id),
            NodeSource::Summary => None,
        }
    }

    pub fn image_ids(&self) -> &[String] {
        match &self.source {
            NodeSource::Chunk { image_ids, .. } => image_ids,
            NodeSource::Summary => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub k_selection: KSelectionConfig,
    pub summary_budget: usize,
    pub root_threshold: usize,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            k_selection: KSelectionConfig::default(),
            summary_budget: DEFAULT_SUMMARY_BUDGET,
            root_threshold: DEFAULT_ROOT_THRESHOLD,
            seed: 0,
        }
    }
}

/// Node table plus level index. Level 0 holds the leaves; the last level
/// holds only the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    by_id: HashMap<String, usize>,
    levels: Vec<Vec<usize>>,
    /// Levels whose clustering could not split and collapsed into one node.
    pub degenerate_levels: Vec<usize>,
}

impl Tree {
    /// Reassembles a tree from its node table, ordered by level.
    pub fn from_nodes(nodes: Vec<TreeNode>, degenerate_levels: Vec<usize>) -> Result<Self> {
        let mut by_id = HashMap::new();
        let mut levels: Vec<Vec<usize>> = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if by_id.insert(n.node_id.clone(), i).is_some() {
                return Err(Error::Index(format!("duplicate node id `{}`", n.node_id)));
            }
            if levels.len() <= n.level {
                levels.resize(n.level + 1, Vec::new());
            }
            levels[n.level].push(i);
        }
        let tree = Self {
            nodes,
            by_id,
            levels,
            degenerate_levels,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.by_id.get(id).map(|&i| &self.nodes[i])
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[self.levels.last().expect("validated tree")[0]]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn level(&self, level: usize) -> impl Iterator<Item = &TreeNode> {
        self.levels
            .get(level)
            .into_iter()
            .flatten()
            .map(|&i| &self.nodes[i])
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.level(0)
    }

    pub fn descendant_leaves(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            let Some(node) = self.node(&cur) else { continue };
            if node.is_leaf() {
                out.push(cur);
            } else {
                stack.extend(node.children.iter().rev().cloned());
            }
        }
        out
    }

    /// Checks single root, child levels, per-level leaf partition, and strict
    /// contraction of level sizes.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Index(m));
        if self.levels.is_empty() || self.levels[0].is_empty() {
            return bad("tree has no leaves".into());
        }
        if self.levels.len() < 2 || self.levels.last().unwrap().len() != 1 {
            return bad("tree must end in a single root above the leaves".into());
        }
        for w in self.levels.windows(2) {
            if w[1].len() >= w[0].len() && w[0].len() > 1 {
                return bad(format!("level sizes do not contract: {} -> {}", w[0].len(), w[1].len()));
            }
        }
        for n in &self.nodes {
            if n.level == 0 && !n.is_leaf() {
                return bad(format!("leaf `{}` has children", n.node_id));
            }
            if n.level > 0 && n.is_leaf() {
                return bad(format!("summary `{}` has no children", n.node_id));
            }
            for c in &n.children {
                match self.node(c) {
                    Some(child) if child.level + 1 == n.level => {}
                    _ => return bad(format!("`{}` has bad child `{c}`", n.node_id)),
                }
            }
        }
        let all: BTreeSet<String> = self.leaves().map(|n| n.node_id.clone()).collect();
        for (lvl, ids) in self.levels.iter().enumerate().skip(1) {
            let mut seen = BTreeSet::new();
            let mut count = 0;
            for &i in ids {
                for leaf in self.descendant_leaves(&self.nodes[i].node_id) {
                    count += 1;
                    seen.insert(leaf);
                }
            }
            if count != all.len() || seen != all {
                return bad(format!("level {lvl} does not partition the leaves"));
            }
        }
        Ok(())
    }

    /// Graphviz rendering: one statement per node, then one per edge.
    pub fn export_structure(&self) -> String {
        let mut out = String::from("digraph tree {\n");
        let mut order: Vec<&TreeNode> = self.nodes.iter().collect();
        order.sort_by(|a, b| b.level.cmp(&a.level).then_with(|| a.node_id.cmp(&b.node_id)));
        for n in &order {
            let kind = if n.is_leaf() { "leaf" } else { "summary" };
            let _ = writeln!(
                out,
                "  \"{}\" [level={}, kind={}, visual={}];",
                escape(&n.node_id),
                n.level,
                kind,
                n.embedding.has_visual
            );
        }
        for n in &order {
            for c in &n.children {
                let _ = writeln!(out, "  \"{}\" -> \"{}\";", escape(&n.node_id), escape(c));
            }
        }
        out.push_str("}\n");
        out
    }

    /// Canonical byte serialization: node records as JSON lines, then every
    /// embedding as little-endian `f32`.
    pub fn canonical_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut table = Vec::new();
        let mut blob = Vec::new();
        for n in &self.nodes {
            let rec = NodeRecord::from_node(n);
            serde_json::to_writer(&mut table, &rec).expect("node record serializes");
            table.push(b'\n');
            for x in &n.embedding.vector {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        (table, blob)
    }

    pub fn digest(&self) -> String {
        let (table, blob) = self.canonical_bytes();
        let mut h = Sha256::new();
        h.update(&table);
        h.update(&blob);
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// On-disk node record; the embedding lives in a separate blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub level: usize,
    pub children: Vec<String>,
    pub summary_text: String,
    pub source: NodeSource,
    pub has_visual: bool,
    pub alpha_used: Real,
    pub dim: usize,
}

impl NodeRecord {
    pub fn from_node(n: &TreeNode) -> Self {
        Self {
            node_id: n.node_id.clone(),
            level: n.level,
            children: n.children.clone(),
            summary_text: n.summary_text.clone(),
            source: n.source.clone(),
            has_visual: n.embedding.has_visual,
            alpha_used: n.embedding.alpha_used,
            dim: n.embedding.vector.len(),
        }
    }

    pub fn into_node(self, vector: Vec<Real>) -> TreeNode {
        TreeNode {
            node_id: self.node_id,
            level: self.level,
            children: self.children,
            summary_text: self.summary_text,
            embedding: FusedEmbedding {
                vector,
                alpha_used: self.alpha_used,
                has_visual: self.has_visual,
            },
            source: self.source,
        }
    }
}

fn summary_id(level: usize, index: usize) -> String {
    format!("s{level}.{index:04}")
}

/// Clusters, summarizes and embeds level by level until a single root
/// remains.
///
/// Each level picks its cluster count with [`select_k`]; when the level
/// cannot be split (fewer than three nodes, no distinct structure, or a best
/// split with more than `n / 2` clusters) or is at most `root_threshold`
/// nodes, it is summarized into one node.
pub fn build_tree(leaves: Vec<TreeNode>, providers: &ProviderSet, config: &TreeConfig) -> Result<Tree> {
    if leaves.is_empty() {
        return Err(Error::invalid("cannot build a tree without leaves"));
    }
    if let Some(bad) = leaves.iter().find(|n| n.level != 0 || !n.is_leaf()) {
        return Err(Error::invalid(format!("`{}` is not a leaf", bad.node_id)));
    }
    if config.summary_budget == 0 {
        return Err(Error::invalid("summary budget must be positive"));
    }

    let mut nodes = leaves;
    let mut current: Vec<usize> = (0..nodes.len()).collect();
    let mut degenerate_levels = Vec::new();
    let mut level = 0;
    let mut completed = 0;

    loop {
        if level > 0 && current.len() == 1 {
            break;
        }
        let groups: Vec<Vec<usize>> = if current.len() <= config.root_threshold.max(1) {
            vec![current.clone()]
        } else {
            let points: Vec<Vec<Real>> = current
                .iter()
                .map(|&i| nodes[i].embedding.vector.clone())
                .collect();
            let sel = select_k(&points, config.k_selection, config.seed.wrapping_add(level as u64))?;
            match sel.assignment {
                // A split that leaves clusters averaging under two members
                // does not summarize anything.
                Some(a) if !sel.degenerate && 2 * a.k <= current.len() => {
                    let mut members = a.members();
                    members.sort_by_key(|m| m[0]);
                    members
                        .into_iter()
                        .map(|m| m.into_iter().map(|j| current[j]).collect())
                        .collect()
                }
                _ => {
                    degenerate_levels.push(level);
                    vec![current.clone()]
                }
            }
        };

        let mut next = Vec::with_capacity(groups.len());
        for (gi, group) in groups.iter().enumerate() {
            let abort = |e: Error| Error::BuildAborted {
                level: level + 1,
                completed_nodes: completed,
                source: Box::new(e),
            };
            let texts: Vec<String> = group.iter().map(|&i| nodes[i].summary_text.clone()).collect();
            let summary = providers
                .summarize(&texts, config.summary_budget)
                .map_err(|e| abort(e.into()))?;
            let vector = providers
                .embed_text(std::slice::from_ref(&summary))
                .map_err(|e| abort(e.into()))?
                .pop()
                .expect("one embedding per text");
            nodes.push(TreeNode {
                node_id: summary_id(level + 1, gi),
                level: level + 1,
                children: group.iter().map(|&i| nodes[i].node_id.clone()).collect(),
                summary_text: summary,
                embedding: FusedEmbedding::text_only(vector),
                source: NodeSource::Summary,
            });
            completed += 1;
            next.push(nodes.len() - 1);
        }
        current = next;
        level += 1;
    }

    Tree::from_nodes(nodes, degenerate_levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ProviderError;
    use crate::providers::{ProviderResult, Summarizer};
    use std::sync::Arc;

    fn leaf(id: &str, v: Vec<Real>, text: &str) -> TreeNode {
        TreeNode::leaf(id, "doc", text, vec![], FusedEmbedding::text_only(v))
    }

    fn blob(i: usize, center: Real) -> Vec<Real> {
        let mut v = vec![0.0; 8];
        v[0] = center;
        v[1] = i as Real * 0.01;
        v
    }

    fn six_leaves() -> Vec<TreeNode> {
        (0..6)
            .map(|i| {
                let c = if i < 3 { 0.0 } else { 10.0 };
                leaf(&format!("c{i}"), blob(i, c), &format!("text {i}"))
            })
            .collect()
    }

    #[test]
    fn single_leaf_chain() {
        let providers = ProviderSet::local(1);
        let t = build_tree(vec![leaf("only", blob(0, 1.0), "alone")], &providers, &TreeConfig::default()).unwrap();
        assert_eq!(t.depth(), 2);
        assert_eq!(t.root().level, 1);
        assert_eq!(t.root().children, ["only"]);
        assert_eq!(t.root().summary_text, "alone");
        let dot = t.export_structure();
        assert_eq!(dot.matches(" [level=").count(), 2);
        assert_eq!(dot.matches(" -> ").count(), 1);
    }

    #[test]
    fn two_blobs() {
        let providers = ProviderSet::local(1);
        let t = build_tree(six_leaves(), &providers, &TreeConfig::default()).unwrap();
        assert_eq!(t.level_sizes(), [6, 2, 1]);
        let mut reached = t.descendant_leaves(&t.root().node_id);
        reached.sort();
        assert_eq!(reached, ["c0", "c1", "c2", "c3", "c4", "c5"]);
        let l1: Vec<Vec<String>> = t.level(1).map(|n| n.children.clone()).collect();
        assert_eq!(l1, [vec!["c0", "c1", "c2"], vec!["c3", "c4", "c5"]]);
        assert!(t.level(1).all(|n| !n.embedding.has_visual));

        let dot = t.export_structure();
        assert_eq!(dot.matches(" [level=").count(), 9);
        assert_eq!(dot.matches(" -> ").count(), 8);
        let again = build_tree(six_leaves(), &providers, &TreeConfig::default()).unwrap();
        assert_eq!(dot, again.export_structure());
        assert_eq!(t.digest(), again.digest());
    }

    #[test]
    fn identical_points_collapse() {
        let providers = ProviderSet::local(1);
        let leaves: Vec<_> = (0..5).map(|i| leaf(&format!("c{i}"), blob(0, 1.0), "same")).collect();
        let t = build_tree(leaves, &providers, &TreeConfig::default()).unwrap();
        assert_eq!(t.level_sizes(), [5, 1]);
        assert_eq!(t.degenerate_levels, [0]);
    }

    #[test]
    fn mostly_singleton_split_goes_to_root() {
        // Eight mutually orthogonal points: the best split keeps most of them
        // alone, so the level is summarized whole.
        let providers = ProviderSet::local(1);
        let leaves: Vec<_> = (0..8)
            .map(|i| {
                let mut v = vec![0.0; 8];
                v[i] = 1.0;
                leaf(&format!("c{i}"), v, "x")
            })
            .collect();
        let t = build_tree(leaves, &providers, &TreeConfig::default()).unwrap();
        assert_eq!(t.level_sizes(), [8, 1]);
        assert_eq!(t.degenerate_levels, [0]);
    }

    #[test]
    fn root_threshold_forces_final_root() {
        let providers = ProviderSet::local(1);
        let cfg = TreeConfig {
            root_threshold: 6,
            ..TreeConfig::default()
        };
        let t = build_tree(six_leaves(), &providers, &cfg).unwrap();
        assert_eq!(t.level_sizes(), [6, 1]);
    }

    struct Failing;
    impl Summarizer for Failing {
        fn summarize(&self, _: &[String], _: usize) -> ProviderResult<String> {
            Err(ProviderError::Transport("down".into()))
        }
    }

    #[test]
    fn provider_failure_aborts() {
        let providers = ProviderSet::local(1).with_summarizer(Arc::new(Failing));
        match build_tree(six_leaves(), &providers, &TreeConfig::default()) {
            Err(Error::BuildAborted { level, completed_nodes, .. }) => {
                assert_eq!(level, 1);
                assert_eq!(completed_nodes, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        let providers = ProviderSet::local(1);
        assert!(build_tree(vec![], &providers, &TreeConfig::default()).is_err());
        let mut l = leaf("x", blob(0, 0.0), "x");
        l.level = 1;
        assert!(build_tree(vec![l], &providers, &TreeConfig::default()).is_err());
    }

    #[test]
    fn records_round_trip() {
        let providers = ProviderSet::local(1);
        let t = build_tree(six_leaves(), &providers, &TreeConfig::default()).unwrap();
        let nodes: Vec<TreeNode> = t
            .nodes()
            .iter()
            .map(|n| NodeRecord::from_node(n).into_node(n.embedding.vector.clone()))
            .collect();
        let back = Tree::from_nodes(nodes, t.degenerate_levels.clone()).unwrap();
        assert_eq!(back, t);
    }
}
