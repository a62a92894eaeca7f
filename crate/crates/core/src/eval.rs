//! Ranking and response metrics, judgment files, and the benchmark matrix.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::controller::{Phase, RoutingTrace, Strategy};
use crate::corpus::token_spans;
use crate::error::{Error, Result};
use crate::pipeline::{Index, QueryRequest, Store};
use crate::providers::ProviderSet;
use crate::tree::hex;

/// Default rank cutoff for NDCG and for reward-by-NDCG.
pub const DEFAULT_NDCG_K: usize = 10;
/// A decomposition counts as correct at or above this set-F1.
pub const TDA_F1_THRESHOLD: f64 = 0.5;
const HEADING_MAX_TOKENS: usize = 8;

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k with gain `2^rel - 1` and discount `log2(rank + 1)`. Unjudged
/// nodes have grade 0.
pub fn ndcg(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return Err(Error::invalid("no positive judgments; NDCG is undefined"));
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let got = dcg(ranking.iter().take(k).map(|id| grades.get(id).copied().unwrap_or(0)));
    Ok((got / idcg).clamp(0.0, 1.0))
}

/// Fraction of responses whose citations intersect their gold evidence.
pub fn sga<'a, I>(responses: I) -> f64
where
    I: IntoIterator<Item = (&'a [String], &'a BTreeSet<String>)>,
{
    fraction(responses.into_iter().map(|(cited, gold)| cited.iter().any(|c| gold.contains(c))))
}

/// Case-folded, whitespace-collapsed label.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Set-F1 between normalized label sets.
pub fn set_f1(predicted: &[String], gold: &BTreeSet<String>) -> f64 {
    let pred: BTreeSet<String> = predicted.iter().map(|l| normalize_label(l)).collect();
    let gold: BTreeSet<String> = gold.iter().map(|l| normalize_label(l)).collect();
    let hit = pred.intersection(&gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let (p, r) = (hit / pred.len() as f64, hit / gold.len() as f64);
    2.0 * p * r / (p + r)
}

/// Fraction of decompositions with set-F1 at least [`TDA_F1_THRESHOLD`].
pub fn tda<'a, I>(decompositions: I) -> f64
where
    I: IntoIterator<Item = (&'a [String], &'a BTreeSet<String>)>,
{
    fraction(
        decompositions
            .into_iter()
            .map(|(pred, gold)| set_f1(pred, gold) >= TDA_F1_THRESHOLD),
    )
}

fn fraction(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hit += usize::from(f);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Heading of a chunk: its text up to the first `.` or `:`, at most
/// [`HEADING_MAX_TOKENS`] tokens, normalized.
pub fn heading(text: &str) -> String {
    let end = text.find(['.', ':']).unwrap_or(text.len());
    let head = &text[..end];
    let spans = token_spans(head);
    let cut = spans.get(HEADING_MAX_TOKENS - 1).map_or(head.len(), |s| s.end);
    normalize_label(&head[..cut])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JudgmentRecord {
    Grade { query_id: String, node_id: String, grade: u32 },
    Evidence { query_id: String, node_ids: Vec<String> },
    Subtasks { query_id: String, labels: Vec<String> },
}

/// Graded relevance plus optional gold evidence and gold subtasks per query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSet {
    pub grades: BTreeMap<String, BTreeMap<String, u32>>,
    pub evidence: BTreeMap<String, BTreeSet<String>>,
    pub subtasks: BTreeMap<String, BTreeSet<String>>,
}

impl JudgmentSet {
    pub fn grade(&mut self, query_id: &str, node_id: &str, grade: u32) {
        self.grades
            .entry(query_id.to_string())
            .or_default()
            .insert(node_id.to_string(), grade);
    }

    pub fn has_positive(&self, query_id: &str) -> bool {
        self.grades.get(query_id).is_some_and(|g| g.values().any(|&v| v > 0))
    }

    /// Lines of `{"kind": "grade" | "evidence" | "subtasks", ...}`. A line
    /// without `kind` is read as a grade.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("judgments line {}: {e}", i + 1)))?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("kind").or_insert_with(|| "grade".into());
            }
            let rec: JudgmentRecord = serde_json::from_value(value)
                .map_err(|e| Error::invalid(format!("judgments line {}: {e}", i + 1)))?;
            let empty = |q: &str| Error::invalid(format!("judgments line {}: empty gold set for {q}", i + 1));
            match rec {
                JudgmentRecord::Grade { query_id, node_id, grade } => set.grade(&query_id, &node_id, grade),
                JudgmentRecord::Evidence { query_id, node_ids } => {
                    if node_ids.is_empty() {
                        return Err(empty(&query_id));
                    }
                    set.evidence.entry(query_id).or_default().extend(node_ids);
                }
                JudgmentRecord::Subtasks { query_id, labels } => {
                    if labels.is_empty() {
                        return Err(empty(&query_id));
                    }
                    set.subtasks
                        .entry(query_id)
                        .or_default()
                        .extend(labels.iter().map(|l| normalize_label(l)));
                }
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |rec: JudgmentRecord| {
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        };
        for (q, grades) in &self.grades {
            for (n, &g) in grades {
                push(JudgmentRecord::Grade {
                    query_id: q.clone(),
                    node_id: n.clone(),
                    grade: g,
                });
            }
        }
        for (q, ids) in &self.evidence {
            push(JudgmentRecord::Evidence {
                query_id: q.clone(),
                node_ids: ids.iter().cloned().collect(),
            });
        }
        for (q, labels) in &self.subtasks {
            push(JudgmentRecord::Subtasks {
                query_id: q.clone(),
                labels: labels.iter().cloned().collect(),
            });
        }
        out
    }
}

/// Query file: one [`QueryRequest`] per line, each with an `id`.
pub fn parse_queries(text: &str) -> Result<Vec<QueryRequest>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRequest =
            serde_json::from_str(line).map_err(|e| Error::invalid(format!("queries line {}: {e}", i + 1)))?;
        let id = q
            .id
            .clone()
            .ok_or_else(|| Error::invalid(format!("queries line {}: missing `id`", i + 1)))?;
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!("queries line {}: duplicate id `{id}`", i + 1)));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRequest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_queries(&text)
}

pub fn queries_to_jsonl(queries: &[QueryRequest]) -> String {
    queries
        .iter()
        .map(|q| serde_json::to_string(q).expect("query serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Agentic,
    Fixed(Strategy),
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub name: String,
    pub visual_fusion: bool,
    pub routing: Routing,
}

impl Configuration {
    pub fn new(visual_fusion: bool, routing: Routing) -> Self {
        let modality = if visual_fusion { "multimodal" } else { "text-only" };
        let route = match routing {
            Routing::Agentic => "agentic".to_string(),
            Routing::Fixed(s) => format!("fixed-{}", s.name()),
        };
        Self {
            name: format!("{modality}/{route}"),
            visual_fusion,
            routing,
        }
    }

    /// Visual fusion on/off crossed with agentic routing vs fixed DirectSearch.
    pub fn standard_matrix() -> Vec<Self> {
        vec![
            Self::new(true, Routing::Agentic),
            Self::new(false, Routing::Agentic),
            Self::new(true, Routing::Fixed(Strategy::DirectSearch)),
            Self::new(false, Routing::Fixed(Strategy::DirectSearch)),
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub count: usize,
}

impl MetricCell {
    fn of(values: &[f64]) -> Self {
        let count = values.len();
        let mean = if count == 0 { 0.0 } else { values.iter().sum::<f64>() / count as f64 };
        Self { mean, count }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cells {
    pub ndcg: MetricCell,
    pub sga: MetricCell,
    pub tda: MetricCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationReport {
    pub configuration: Configuration,
    pub overall: Cells,
    /// Keyed by phase name.
    pub per_phase: BTreeMap<String, Cells>,
    /// Queries without positive graded judgments.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub k: usize,
    pub queries: usize,
    pub configurations: Vec<ConfigurationReport>,
}

impl BenchmarkReport {
    pub fn get(&self, name: &str) -> Option<&ConfigurationReport> {
        self.configurations.iter().find(|c| c.configuration.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// SHA-256 of the JSON form.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<36} {:>7} {:>7} {:>7} {:>5} {:>7}",
            "configuration",
            format!("NDCG@{}", self.k),
            "SGA",
            "TDA",
            "n",
            "skipped"
        );
        for c in &self.configurations {
            let row = |label: &str, cells: &Cells, skipped: String| {
                format!(
                    "{:<36} {:>7.4} {:>7.4} {:>7.4} {:>5} {:>7}\n",
                    label, cells.ndcg.mean, cells.sga.mean, cells.tda.mean, cells.ndcg.count, skipped
                )
            };
            out.push_str(&row(&c.configuration.name, &c.overall, c.skipped.to_string()));
            for (phase, cells) in &c.per_phase {
                out.push_str(&row(&format!("  {phase}"), cells, String::new()));
            }
        }
        out
    }
}

/// Outcome of one query under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub configuration: String,
    pub query_id: String,
    pub phase: Phase,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingTrace>,
    pub results: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    pub k: usize,
    /// Feed NDCG@k back into the controller after each query.
    pub adapt: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_NDCG_K,
            adapt: false,
        }
    }
}

/// Runs every configuration over every query. Indexes are built once per
/// distinct visual-fusion setting from the same ingested store.
pub fn run_benchmark(
    store: &Store,
    base: &Config,
    providers: &ProviderSet,
    queries: &[QueryRequest],
    judgments: &JudgmentSet,
    configurations: &[Configuration],
    options: BenchmarkOptions,
) -> Result<(BenchmarkReport, Vec<QueryTrace>)> {
    let mut indexes: HashMap<bool, Index> = HashMap::new();
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for cfg in configurations {
        let index = match indexes.entry(cfg.visual_fusion) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let config = Config {
                    visual_fusion: cfg.visual_fusion,
                    ..base.clone()
                };
                e.insert(Index::build(store.clone(), config, providers)?)
            }
        };
        let (report, mut t) = run_configuration(index, providers, queries, judgments, cfg, options)?;
        reports.push(report);
        traces.append(&mut t);
    }
    Ok((
        BenchmarkReport {
            k: options.k,
            queries: queries.len(),
            configurations: reports,
        },
        traces,
    ))
}

#[derive(Default)]
struct Acc {
    ndcg: Vec<f64>,
    sga: Vec<bool>,
    tda: Vec<bool>,
}

impl Acc {
    fn cells(&self) -> Cells {
        let as_f = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
        Cells {
            ndcg: MetricCell::of(&self.ndcg),
            sga: MetricCell::of(&as_f(&self.sga)),
            tda: MetricCell::of(&as_f(&self.tda)),
        }
    }
}

fn run_configuration(
    index: &Index,
    providers: &ProviderSet,
    queries: &[QueryRequest],
    judgments: &JudgmentSet,
    cfg: &Configuration,
    options: BenchmarkOptions,
) -> Result<(ConfigurationReport, Vec<QueryTrace>)> {
    let mut state = index.config.fresh_state();
    let mut overall = Acc::default();
    let mut phases: BTreeMap<String, Acc> = BTreeMap::new();
    let mut skipped = 0;
    let mut traces = Vec::new();

    for q in queries {
        let id = q.id.clone().unwrap_or_default();
        if !judgments.has_positive(&id) {
            skipped += 1;
            traces.push(QueryTrace {
                configuration: cfg.name.clone(),
                query_id: id,
                phase: q.phase,
                skipped: true,
                routing: None,
                results: Vec::new(),
                ndcg: None,
                grounded: None,
                decomposition_f1: None,
            });
            continue;
        }
        let mut request = q.clone();
        if let Routing::Fixed(s) = cfg.routing {
            request.strategy = Some(s);
        }
        let out = index.query(providers, &state, &request, None)?;
        let results = out.result.node_ids();
        let score = ndcg(&results, &judgments.grades[&id], options.k)?;
        if options.adapt {
            let r = out.routing();
            state.update(r.band, r.strategy, score)?;
        }

        let acc = phases.entry(q.phase.name().to_string()).or_default();
        overall.ndcg.push(score);
        acc.ndcg.push(score);

        let grounded = judgments.evidence.get(&id).map(|gold| sga([(out.response.citations.as_slice(), gold)]) == 1.0);
        if let Some(g) = grounded {
            overall.sga.push(g);
            acc.sga.push(g);
        }

        let f1 = judgments.subtasks.get(&id).map(|gold| {
            let predicted: Vec<String> = out
                .response
                .citations
                .iter()
                .filter_map(|c| index.tree.node(c))
                .filter(|n| n.is_leaf())
                .map(|n| heading(&n.summary_text))
                .collect();
            set_f1(&predicted, gold)
        });
        if let Some(f) = f1 {
            overall.tda.push(f >= TDA_F1_THRESHOLD);
            acc.tda.push(f >= TDA_F1_THRESHOLD);
        }

        traces.push(QueryTrace {
            configuration: cfg.name.clone(),
            query_id: id,
            phase: q.phase,
            skipped: false,
            routing: out.result.routing.clone(),
            results,
            ndcg: Some(score),
            grounded,
            decomposition_f1: f1,
        });
    }

    Ok((
        ConfigurationReport {
            configuration: cfg.clone(),
            overall: overall.cells(),
            per_phase: phases.iter().map(|(k, v)| (k.clone(), v.cells())).collect(),
            skipped,
        },
        traces,
    ))
}

/// Build and query timings at one corpus size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub chunks: usize,
    pub ingest_ms: f64,
    /// Tree construction alone (clustering, summaries, summary embeddings).
    pub tree_ms: f64,
    /// Full index build: projection, fusion and tree.
    pub build_ms: f64,
    pub mean_query_ms: f64,
    pub levels: Vec<usize>,
}

/// Synthetic corpus with exactly `chunks` single-chunk pages.
pub fn scaling_spec(chunks: usize, seed: u64) -> crate::synth::SynthSpec {
    crate::synth::SynthSpec {
        seed,
        docs: chunks,
        pages_per_doc: 1,
        tokens_per_page: 120,
        image_density: 0.3,
        topics: 8,
        ..crate::synth::SynthSpec::default()
    }
    .with_query_total(30)
}

/// Generates, ingests, builds and queries a corpus of each size.
pub fn scaling_probe(sizes: &[usize], config: &Config, work_dir: &Path) -> Result<Vec<ScalingPoint>> {
    use crate::corpus::load_manifest;
    use crate::pipeline::ingest;
    use crate::tree::build_tree;
    use std::time::Instant;

    let providers = config.provider_set()?;
    let mut points = Vec::new();
    for &n in sizes {
        let corpus = crate::synth::generate(&scaling_spec(n, config.seed))?;
        let dir = work_dir.join(format!("scale-{n}"));
        let manifest = corpus.write_to(&dir)?;
        let start = Instant::now();
        let store = ingest(&load_manifest(&manifest)?, &providers, config)?;
        let ingest_ms = start.elapsed().as_secs_f64() * 1e3;

        let start = Instant::now();
        let index = Index::build(store, config.clone(), &providers)?;
        let build_ms = start.elapsed().as_secs_f64() * 1e3;

        let leaves = crate::pipeline::leaf_nodes(&index.store, &index.fused);
        let start = Instant::now();
        let tree = build_tree(leaves, &providers, &config.tree_config())?;
        let tree_ms = start.elapsed().as_secs_f64() * 1e3;

        let state = config.fresh_state();
        let start = Instant::now();
        for q in &corpus.queries {
            index.query(&providers, &state, q, None)?;
        }
        let mean_query_ms = start.elapsed().as_secs_f64() * 1e3 / corpus.queries.len().max(1) as f64;
        points.push(ScalingPoint {
            chunks: index.store.chunks.len(),
            ingest_ms,
            tree_ms,
            build_ms,
            mean_query_ms,
            levels: tree.level_sizes(),
        });
    }
    Ok(points)
}
