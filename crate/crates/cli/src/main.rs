use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mmtree_core::config::Config;
use mmtree_core::controller::{Phase, Strategy};
use mmtree_core::corpus::load_manifest;
use mmtree_core::embedding::Modality;
use mmtree_core::eval::{
    load_queries, ndcg, run_benchmark, scaling_probe, BenchmarkOptions, Configuration, JudgmentSet, DEFAULT_NDCG_K,
};
use mmtree_core::index::{CommitOptions, IndexDirectory, Snapshot, TraceRecord};
use mmtree_core::pipeline::{ingest, Index, QueryOutcome, QueryRequest};
use mmtree_core::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(name = "mmtree", version, about = "Hierarchical multimodal retrieval over page manifests")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, caption and embed a manifest into a new index directory.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace an existing index.
        #[arg(long)]
        force: bool,
    },
    /// Build the summary tree for an ingested index.
    Build {
        #[arg(long)]
        index: PathBuf,
        /// Replaces the config stored at ingest time.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Route and answer one query.
    Query(QueryArgs),
    /// Feed a reward for an earlier query back into the controller.
    Feedback {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query_id: String,
        /// Reward in [0, 1].
        #[arg(long, conflicts_with = "judgments")]
        reward: Option<f64>,
        /// Use NDCG@k of the traced ranking against these judgments.
        #[arg(long)]
        judgments: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NDCG_K)]
        k: usize,
    },
    /// Run the benchmark matrix, or the scaling probe with --scale.
    Eval(EvalArgs),
    /// Print the tree as Graphviz DOT.
    Export {
        #[arg(long)]
        index: PathBuf,
    },
    /// Write a synthetic corpus with queries and judgments.
    Synth(SynthArgs),
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query text.
    text: String,
    /// rescue, recovery, reconstruction, or neutral.
    #[arg(long, default_value = "neutral")]
    phase: String,
    /// Bypass routing: direct, hierarchical, or multimodal.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Name the query instead of deriving an id.
    #[arg(long)]
    id: Option<String>,
    /// Extra context passed to the classifier; repeatable.
    #[arg(long)]
    context: Vec<String>,
    /// Include wall-clock retrieval time.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "scale")]
    index: Option<PathBuf>,
    #[arg(long, required_unless_present = "scale")]
    queries: Option<PathBuf>,
    #[arg(long, required_unless_present = "scale")]
    judgments: Option<PathBuf>,
    /// JSON list of configurations; defaults to the standard matrix.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Directory for report.txt, report.json and traces.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NDCG_K)]
    k: usize,
    /// Feed NDCG back into the controller after every query.
    #[arg(long)]
    adapt: bool,
    /// Time ingest, build and query on synthetic corpora instead.
    #[arg(long)]
    scale: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [2000, 3000])]
    sizes: Vec<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    docs: usize,
    #[arg(long, default_value_t = 5)]
    pages_per_doc: usize,
    #[arg(long, default_value_t = 120)]
    tokens_per_page: usize,
    #[arg(long, default_value_t = 4)]
    topics: usize,
    /// Total queries, split 150/200/150 across rescue/recovery/reconstruction.
    #[arg(long, default_value_t = 500)]
    queries: usize,
    #[arg(long, default_value_t = 0.5)]
    image_density: f64,
    #[arg(long, default_value_t = 0.4)]
    image_query_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": format!("{e:#}") }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest {
            manifest,
            out,
            config,
            force,
        } => cmd_ingest(cli.json, manifest, out, config.as_deref(), *force),
        Command::Build { index, config } => cmd_build(cli.json, index, config.as_deref()),
        Command::Query(args) => cmd_query(cli.json, args),
        Command::Feedback {
            index,
            query_id,
            reward,
            judgments,
            k,
        } => cmd_feedback(cli.json, index, query_id, *reward, judgments.as_deref(), *k),
        Command::Eval(args) => cmd_eval(cli.json, args),
        Command::Export { index } => cmd_export(cli.json, index),
        Command::Synth(args) => cmd_synth(cli.json, args),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn emit(json_mode: bool, value: Value, text: impl FnOnce() -> String) {
    let body = if json_mode {
        serde_json::to_string_pretty(&value).expect("json value serializes") + "\n"
    } else {
        text()
    };
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(body.as_bytes());
}

fn cmd_ingest(json_mode: bool, manifest: &Path, out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    let config = load_config(config)?;
    let dir = IndexDirectory::new(out);
    if dir.path().exists() && !force {
        bail!("{} already exists; pass --force to replace it", out.display());
    }
    let corpus = load_manifest(manifest)?;
    let providers = config.provider_set()?;
    let store = ingest(&corpus, &providers, &config)?;
    let snapshot = Snapshot::ingested(store, config)?;
    dir.commit(&snapshot, CommitOptions { force, ..Default::default() })?;
    let digest = dir.digest()?;
    let (pages, chunks, images) = (
        snapshot.store.pages.len(),
        snapshot.store.chunks.len(),
        snapshot.store.images.len(),
    );
    emit(
        json_mode,
        json!({ "index": out, "pages": pages, "chunks": chunks, "images": images, "digest": digest }),
        || format!("ingested {pages} pages into {chunks} chunks with {images} images\ndigest {digest}\n"),
    );
    Ok(())
}

fn cmd_build(json_mode: bool, index: &Path, config: Option<&Path>) -> Result<()> {
    let dir = IndexDirectory::new(index);
    let snapshot = dir.open()?;
    let config = match config {
        Some(p) => Config::load(p)?,
        None => snapshot.config.clone(),
    };
    let providers = config.provider_set()?;
    let built = Index::build(snapshot.store, config, &providers)?;
    let digest = built.tree.digest();
    let levels = built.tree.level_sizes();
    let root = built.tree.root().node_id.clone();
    dir.commit(
        &Snapshot::from_index(built),
        CommitOptions {
            force: true,
            ..Default::default()
        },
    )?;
    emit(
        json_mode,
        json!({ "index": index, "levels": levels, "root": root, "tree_digest": digest }),
        || {
            let sizes: Vec<String> = levels.iter().map(usize::to_string).collect();
            format!("built tree with level sizes {} (root {root})\ntree digest {digest}\n", sizes.join(" / "))
        },
    );
    Ok(())
}

fn modality_names(m: &[Modality]) -> String {
    m.iter()
        .map(|x| match x {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Mixed => "mixed",
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn outcome_json(outcome: &QueryOutcome, timings: bool) -> Value {
    let items: Vec<Value> = outcome
        .result
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            json!({
                "rank": i + 1,
                "node_id": it.node_id,
                "score": it.score,
                "breakdown": it.breakdown,
                "level": it.level,
                "modality": it.modality,
                "snippet": it.snippet,
            })
        })
        .collect();
    let mut v = json!({
        "query_id": outcome.query_id,
        "strategy": outcome.result.strategy,
        "routing": outcome.routing(),
        "items": items,
        "response": outcome.response,
    });
    if timings {
        v["elapsed_ms"] = json!(outcome.result.elapsed_ms);
    }
    v
}

fn outcome_text(outcome: &QueryOutcome, timings: bool) -> String {
    let r = outcome.routing();
    let d = r.distribution;
    let mut out = format!("query_id  {}\n", outcome.query_id);
    out.push_str(&format!(
        "routing   phase={} entropy={:.4} band={} strategy={}{}\n",
        r.phase,
        r.entropy,
        r.band,
        r.strategy,
        if r.overridden { " (override)" } else { "" }
    ));
    out.push_str(&format!(
        "classes   factual={:.4} procedural={:.4} analytical={:.4} synthesized={:.4}\n",
        d.factual, d.procedural, d.analytical, d.synthesized
    ));
    if timings {
        out.push_str(&format!("elapsed   {:.3} ms\n", outcome.result.elapsed_ms));
    }
    out.push_str("\nrank  score    level  modality     node_id / snippet\n");
    for (i, it) in outcome.result.items.iter().enumerate() {
        out.push_str(&format!(
            "{:>4}  {:<7.4}  {:>5}  {:<11}  {}\n      {}\n",
            i + 1,
            it.score,
            it.level,
            modality_names(&it.modality),
            it.node_id,
            it.snippet
        ));
    }
    out.push_str("\nresponse\n");
    out.push_str(&outcome.response.text);
    out
}

fn cmd_query(json_mode: bool, args: &QueryArgs) -> Result<()> {
    let phase: Phase = args.phase.parse()?;
    let strategy: Option<Strategy> = args.strategy.as_deref().map(str::parse).transpose()?;
    let dir = IndexDirectory::new(&args.index);
    let index = dir.open()?.into_index()?;
    let state = dir.load_state()?;
    let providers = index.config.provider_set()?;
    let request = QueryRequest {
        id: args.id.clone(),
        text: args.text.clone(),
        phase,
        strategy,
        top_k: args.top_k,
        context: args.context.clone(),
    };
    let outcome = index.query(&providers, &state, &request, None)?;
    let top_k = args.top_k.unwrap_or(index.config.top_k);
    dir.append_trace(&TraceRecord::new(&outcome, &request, top_k, &state))?;
    emit(json_mode, outcome_json(&outcome, args.timings), || {
        outcome_text(&outcome, args.timings)
    });
    Ok(())
}

fn cmd_feedback(
    json_mode: bool,
    index: &Path,
    query_id: &str,
    reward: Option<f64>,
    judgments: Option<&Path>,
    k: usize,
) -> Result<()> {
    let dir = IndexDirectory::new(index);
    let reward = match (reward, judgments) {
        (Some(r), _) => r,
        (None, Some(path)) => {
            let j = JudgmentSet::load(path)?;
            let trace = dir.find_trace(query_id)?;
            let key = trace.request.id.as_deref().unwrap_or(query_id);
            let grades = j
                .grades
                .get(key)
                .with_context(|| format!("no judgments for query `{key}`"))?;
            ndcg(&trace.results, grades, k)?
        }
        (None, None) => bail!("pass --reward or --judgments"),
    };
    let out = dir.feedback(query_id, reward)?;
    emit(
        json_mode,
        json!({
            "query_id": query_id,
            "band": out.band,
            "strategy": out.strategy,
            "reward": out.reward,
            "before": out.before,
            "after": out.after,
        }),
        || {
            format!(
                "{} / {}: {:.6} -> {:.6} (reward {:.4})\n",
                out.band, out.strategy, out.before, out.after, out.reward
            )
        },
    );
    Ok(())
}

fn cmd_eval(json_mode: bool, args: &EvalArgs) -> Result<()> {
    if args.scale {
        let config = load_config(args.config.as_deref())?;
        let scratch;
        let work = match &args.out {
            Some(p) => p.clone(),
            None => {
                scratch = std::env::temp_dir().join(format!("mmtree-scale-{}", std::process::id()));
                scratch.clone()
            }
        };
        let points = scaling_probe(&args.sizes, &config, &work)?;
        if args.out.is_none() {
            let _ = fs::remove_dir_all(&work);
        }
        emit(json_mode, json!({ "scaling": points }), || {
            let mut s = format!(
                "{:>7} {:>11} {:>11} {:>11} {:>11}  levels\n",
                "chunks", "ingest ms", "tree ms", "build ms", "query ms"
            );
            for p in &points {
                let levels: Vec<String> = p.levels.iter().map(usize::to_string).collect();
                s.push_str(&format!(
                    "{:>7} {:>11.1} {:>11.1} {:>11.1} {:>11.3}  {}\n",
                    p.chunks,
                    p.ingest_ms,
                    p.tree_ms,
                    p.build_ms,
                    p.mean_query_ms,
                    levels.join("/")
                ));
            }
            if let [a, .., b] = points.as_slice() {
                s.push_str(&format!(
                    "tree build ratio {}/{}: {:.3}\n",
                    b.chunks,
                    a.chunks,
                    b.tree_ms / a.tree_ms
                ));
            }
            s
        });
        return Ok(());
    }

    let index = args.index.as_deref().expect("clap enforces --index");
    let snapshot = IndexDirectory::new(index).open()?;
    let queries = load_queries(args.queries.as_deref().expect("clap enforces --queries"))?;
    let judgments = JudgmentSet::load(args.judgments.as_deref().expect("clap enforces --judgments"))?;
    let matrix = match &args.matrix {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Configuration::standard_matrix(),
    };
    let providers = snapshot.config.provider_set()?;
    let options = BenchmarkOptions {
        k: args.k,
        adapt: args.adapt,
    };
    let (report, traces) = run_benchmark(
        &snapshot.store,
        &snapshot.config,
        &providers,
        &queries,
        &judgments,
        &matrix,
        options,
    )?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("report.txt"), report.to_table())?;
        fs::write(out.join("report.json"), report.to_json())?;
        let lines: String = traces
            .iter()
            .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
            .collect();
        fs::write(out.join("traces.jsonl"), lines)?;
    }
    let digest = report.digest();
    emit(
        json_mode,
        json!({ "report": report, "digest": digest }),
        || format!("{}digest {digest}\n", report.to_table()),
    );
    Ok(())
}

fn cmd_export(json_mode: bool, index: &Path) -> Result<()> {
    let tree = IndexDirectory::new(index)
        .open()?
        .tree
        .context("index has not been built yet; run `build` first")?;
    let dot = tree.export_structure();
    emit(json_mode, json!({ "format": "dot", "graph": dot }), || dot.clone());
    Ok(())
}

fn cmd_synth(json_mode: bool, args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: args.seed,
        docs: args.docs,
        pages_per_doc: args.pages_per_doc,
        tokens_per_page: args.tokens_per_page,
        image_density: args.image_density,
        topics: args.topics,
        image_query_fraction: args.image_query_fraction,
        ..SynthSpec::default()
    }
    .with_query_total(args.queries);
    let corpus = generate(&spec)?;
    let manifest = corpus.write_to(&args.out)?;
    emit(
        json_mode,
        json!({
            "manifest": manifest,
            "pages": corpus.pages.len(),
            "images": corpus.images.len(),
            "queries": corpus.queries.len(),
            "image_queries": corpus.image_queries.len(),
        }),
        || {
            format!(
                "wrote {} pages, {} images, {} queries ({} image-linked) to {}\n",
                corpus.pages.len(),
                corpus.images.len(),
                corpus.queries.len(),
                corpus.image_queries.len(),
                args.out.display()
            )
        },
    );
    Ok(())
}
