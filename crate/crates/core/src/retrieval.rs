//! The three retrieval strategies and extractive response assembly.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{PhaseProfile, ResponseStyle, RoutingTrace, Strategy};
use crate::corpus::token_spans;
use crate::embedding::{cosine_unchecked, maxsim, Modality, TokenEmbeddingSet};
use crate::error::{Error, ProviderError, Result};
use crate::providers::{feature_tokens, ProviderResult, ProviderSet};
use crate::tree::{Tree, TreeNode};
use crate::Real;

/// Reciprocal-rank-fusion damping constant.
pub const RRF_K: f64 = 60.0;
/// MultimodalFusion draws `CANDIDATE_FACTOR * top_k` cosine candidates.
pub const CANDIDATE_FACTOR: usize = 4;
/// Distinct tokens kept per text when building token sets.
pub const MAX_SET_TOKENS: usize = 512;
const SNIPPET_TOKENS: usize = 40;

/// Per-strategy scores behind an item's final score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub cosine: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxsim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub node_id: String,
    pub score: f64,
    pub breakdown: ScoreBreakdown,
    pub level: usize,
    pub modality: Vec<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<RetrievedItem>,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingTrace>,
    pub elapsed_ms: f64,
}

impl RetrievalResult {
    /// Copy with the wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            elapsed_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.node_id.clone()).collect()
    }
}

pub fn snippet(text: &str) -> String {
    let spans = token_spans(text);
    let cut = if spans.len() > SNIPPET_TOKENS {
        &text[..spans[SNIPPET_TOKENS - 1].end]
    } else {
        text
    };
    cut.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn item(node: &TreeNode, score: f64, breakdown: ScoreBreakdown) -> RetrievedItem {
    let mut modality = vec![Modality::Text];
    if node.embedding.has_visual {
        modality.push(Modality::Visual);
    }
    RetrievedItem {
        node_id: node.node_id.clone(),
        score,
        breakdown,
        level: node.level,
        modality,
        doc_id: node.doc_id().map(str::to_string),
        snippet: snippet(&node.summary_text),
    }
}

/// Descending score, then ascending node id.
fn rank_order(a: &(f64, &TreeNode), b: &(f64, &TreeNode)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.node_id.cmp(&b.1.node_id))
}

fn cos_only(cosine: f64) -> ScoreBreakdown {
    ScoreBreakdown {
        cosine,
        ..ScoreBreakdown::default()
    }
}

fn check_query(query: &[Real], tree: &Tree, top_k: usize) -> Result<()> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let dim = tree.root().embedding.vector.len();
    if query.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            actual: query.len(),
        });
    }
    Ok(())
}

fn scored<'a>(query: &[Real], nodes: impl Iterator<Item = &'a TreeNode>) -> Vec<(f64, &'a TreeNode)> {
    nodes
        .map(|n| (f64::from(cosine_unchecked(query, &n.embedding.vector)), n))
        .collect()
}

fn finish(strategy: Strategy, items: Vec<RetrievedItem>, start: Instant) -> RetrievalResult {
    RetrievalResult {
        items,
        strategy,
        routing: None,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Exact cosine kNN over the leaves.
pub fn direct_search(query: &[Real], tree: &Tree, top_k: usize) -> Result<RetrievalResult> {
    let start = Instant::now();
    check_query(query, tree, top_k)?;
    let mut all = scored(query, tree.leaves());
    all.sort_by(rank_order);
    all.truncate(top_k);
    let items = all.into_iter().map(|(s, n)| item(n, s, cos_only(s))).collect();
    Ok(finish(Strategy::DirectSearch, items, start))
}

/// Beam search from the root. Every node kept in the beam (summaries and the
/// leaves finally reached) is ranked by cosine at the end.
pub fn hierarchical_traversal(query: &[Real], tree: &Tree, beam: usize, top_k: usize) -> Result<RetrievalResult> {
    let start = Instant::now();
    check_query(query, tree, top_k)?;
    if beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    let root = tree.root();
    let mut collected = scored(query, std::iter::once(root));
    let mut frontier = vec![root];
    loop {
        let children = frontier
            .iter()
            .flat_map(|n| n.children.iter())
            .filter_map(|c| tree.node(c));
        let mut next = scored(query, children);
        if next.is_empty() {
            break;
        }
        next.sort_by(rank_order);
        next.truncate(beam);
        frontier = next.iter().map(|(_, n)| *n).collect();
        collected.extend(next);
    }
    collected.sort_by(rank_order);
    collected.truncate(top_k);
    let items = collected.into_iter().map(|(s, n)| item(n, s, cos_only(s))).collect();
    Ok(finish(Strategy::HierarchicalTraversal, items, start))
}

/// Builds token-level embedding sets for queries and nodes through the text
/// embedder. Node sets hold the node's text tokens and, when visual evidence
/// is enabled, each linked image's caption tokens plus its projected vector.
pub struct TokenSetBuilder<'a> {
    pub providers: &'a ProviderSet,
    pub captions: &'a HashMap<String, String>,
    pub projected_visuals: &'a HashMap<String, Vec<Real>>,
    pub use_visual: bool,
}

impl TokenSetBuilder<'_> {
    fn token_vectors(&self, text: &str) -> ProviderResult<Vec<Vec<Real>>> {
        let mut seen = HashSet::new();
        let tokens: Vec<String> = feature_tokens(text)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .take(MAX_SET_TOKENS)
            .collect();
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        self.providers.embed_text(&tokens)
    }

    pub fn for_query(&self, query: &str) -> Result<TokenEmbeddingSet<Real>> {
        let set = TokenEmbeddingSet::new("query", self.token_vectors(query)?, Modality::Text);
        if set.is_empty() {
            return Err(Error::invalid("query has no embeddable tokens"));
        }
        Ok(set)
    }

    pub fn for_node(&self, node: &TreeNode) -> Result<TokenEmbeddingSet<Real>> {
        let mut vectors = self.token_vectors(&node.summary_text)?;
        let mut modality = Modality::Text;
        if self.use_visual {
            for image in node.image_ids() {
                if let Some(caption) = self.captions.get(image) {
                    vectors.extend(self.token_vectors(caption)?);
                }
                if let Some(v) = self.projected_visuals.get(image) {
                    vectors.push(v.clone());
                }
                modality = Modality::Mixed;
            }
        }
        Ok(TokenEmbeddingSet::new(node.node_id.clone(), vectors, modality))
    }
}

/// RRF score of an item at 1-based ranks in two lists.
pub fn rrf_score(rank_a: usize, rank_b: usize) -> f64 {
    1.0 / (RRF_K + rank_a as f64) + 1.0 / (RRF_K + rank_b as f64)
}

/// Fuses two rankings of the same items by reciprocal rank; ties by id.
pub fn reciprocal_rank_fusion(first: &[String], second: &[String]) -> Vec<(String, f64)> {
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for list in [first, second] {
        for (i, id) in list.iter().enumerate() {
            *scores.entry(id.as_str()).or_default() += 1.0 / (RRF_K + (i + 1) as f64);
        }
    }
    let mut out: Vec<(String, f64)> = scores.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Cosine candidates re-ranked by late interaction, fused by RRF.
pub fn multimodal_fusion(
    query: &str,
    query_embedding: &[Real],
    tree: &Tree,
    tokens: &TokenSetBuilder<'_>,
    top_k: usize,
) -> Result<RetrievalResult> {
    let start = Instant::now();
    let candidates = direct_search(query_embedding, tree, CANDIDATE_FACTOR * top_k)?;
    let query_set = tokens.for_query(query)?;

    let cos_order = candidates.node_ids();
    let cosines: HashMap<&str, f64> = candidates.items.iter().map(|i| (i.node_id.as_str(), i.score)).collect();
    let mut late: Vec<(f64, &TreeNode)> = Vec::with_capacity(cos_order.len());
    for id in &cos_order {
        let node = tree.node(id).expect("candidate comes from the tree");
        let set = tokens.for_node(node)?;
        let score = if set.is_empty() {
            0.0
        } else {
            f64::from(maxsim(&query_set, &set)?)
        };
        late.push((score, node));
    }
    late.sort_by(rank_order);
    let late_order: Vec<String> = late.iter().map(|(_, n)| n.node_id.clone()).collect();
    let maxsims: HashMap<&str, f64> = late.iter().map(|(s, n)| (n.node_id.as_str(), *s)).collect();

    let items = reciprocal_rank_fusion(&cos_order, &late_order)
        .into_iter()
        .take(top_k)
        .map(|(id, s)| {
            let breakdown = ScoreBreakdown {
                cosine: cosines[id.as_str()],
                maxsim: Some(maxsims[id.as_str()]),
                rrf: Some(s),
            };
            item(tree.node(&id).expect("fused id comes from the tree"), s, breakdown)
        })
        .collect();
    Ok(finish(Strategy::MultimodalFusion, items, start))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub citations: Vec<String>,
}

/// Optional generative backend. Its output must cite returned node ids as
/// `[node_id]`.
pub trait ResponseGenerator: Send + Sync {
    fn generate(&self, query: &str, evidence: &[RetrievedItem], style: ResponseStyle) -> ProviderResult<String>;
}

/// Bracketed citations in `text`, in order of first appearance.
pub fn extract_citations(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let id = after[..close].trim();
        if !id.is_empty() && !out.iter().any(|c| c == id) {
            out.push(id.to_string());
        }
        rest = &after[close + 1..];
    }
    out
}

pub fn assemble_response(
    query: &str,
    result: &RetrievalResult,
    phase: &PhaseProfile,
    generator: Option<&dyn ResponseGenerator>,
) -> Result<Response> {
    if result.items.is_empty() {
        return Err(Error::invalid("cannot assemble a response from an empty result"));
    }
    if let Some(generator) = generator {
        let text = generator.generate(query, &result.items, phase.response_style)?;
        let allowed: HashSet<&str> = result.items.iter().map(|i| i.node_id.as_str()).collect();
        let citations = extract_citations(&text);
        if citations.is_empty() {
            return Err(ProviderError::ContractViolation("generated response cites no evidence".into()).into());
        }
        if let Some(bad) = citations.iter().find(|c| !allowed.contains(c.as_str())) {
            return Err(ProviderError::ContractViolation(format!("response cites unknown node `{bad}`")).into());
        }
        return Ok(Response { text, citations });
    }

    let mut text = String::new();
    let mut cited = Vec::new();
    match phase.response_style {
        ResponseStyle::ConciseProcedural => {
            for (i, it) in result.items.iter().take(3).enumerate() {
                text.push_str(&format!("{}. {} [{}]\n", i + 1, it.snippet, it.node_id));
                cited.push(it.node_id.clone());
            }
        }
        ResponseStyle::SynthesizedPlanning => {
            let mut groups: Vec<(String, Vec<&RetrievedItem>)> = Vec::new();
            for it in &result.items {
                let key = it.doc_id.clone().unwrap_or_else(|| "cross-document summaries".into());
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, g)) => g.push(it),
                    None => groups.push((key, vec![it])),
                }
            }
            for (doc, items) in groups {
                text.push_str(&format!("## {doc}\n"));
                for it in items {
                    text.push_str(&format!("- {} [{}]\n", it.snippet, it.node_id));
                    cited.push(it.node_id.clone());
                }
            }
        }
        ResponseStyle::Analytical => {
            for (i, it) in result.items.iter().enumerate() {
                text.push_str(&format!(
                    "({}) {} [{}] (level {}, score {:.4})\n",
                    i + 1,
                    it.snippet,
                    it.node_id,
                    it.level,
                    it.score
                ));
                cited.push(it.node_id.clone());
            }
        }
    }
    Ok(Response { text, citations: cited })
}

/// Distinct doc ids among cited leaves; used by tests and reports.
pub fn cited_documents(result: &RetrievalResult, response: &Response) -> BTreeSet<String> {
    result
        .items
        .iter()
        .filter(|i| response.citations.contains(&i.node_id))
        .filter_map(|i| i.doc_id.clone())
        .collect()
}
