//! Ingest, build and query over an in-memory index.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::controller::{route, Phase, RoutingTrace, Strategy, StrategyState};
use crate::corpus::{Corpus, ImageAsset, PageRecord, TextChunk};
use crate::embedding::{build_projection, fuse, mean_vector, project_visual};
use crate::error::{Error, Result};
use crate::providers::{ProviderSet, TEXT_DIM, VISUAL_DIM};
use crate::retrieval::{
    assemble_response, direct_search, hierarchical_traversal, multimodal_fusion, Response, ResponseGenerator,
    RetrievalResult, TokenSetBuilder,
};
use crate::tree::{build_tree, hex, Tree, TreeNode};
use crate::{FusedEmbedding, ProjectionMatrix, Real, Vector};

const EMBED_BATCH: usize = 64;

/// Chunks, captions and raw embeddings produced by ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub pages: Vec<PageRecord>,
    pub chunks: Vec<TextChunk>,
    pub images: Vec<ImageAsset>,
    /// One `TEXT_DIM` row per chunk.
    pub text_embeddings: Vec<Vector>,
    /// One `VISUAL_DIM` row per image.
    pub visual_embeddings: Vec<Vector>,
}

/// Chunks the corpus, captions and embeds every image, embeds every chunk.
pub fn ingest(corpus: &Corpus, providers: &ProviderSet, config: &Config) -> Result<Store> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let chunks = corpus.chunk(config.window, config.overlap)?;
    if chunks.is_empty() {
        return Err(Error::invalid("corpus has no text to index"));
    }

    let mut images = corpus.images.clone();
    let mut visual_embeddings = Vec::with_capacity(images.len());
    for img in &mut images {
        let bytes = std::fs::read(&img.file_path).map_err(|e| Error::MissingImage {
            image_id: img.image_id.clone(),
            reason: e.to_string(),
        })?;
        let out = providers.embed_image(&img.image_id, &bytes)?;
        img.caption = Some(out.caption);
        visual_embeddings.push(out.embedding);
    }

    let mut text_embeddings = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        text_embeddings.extend(providers.embed_text(&texts)?);
    }

    Ok(Store {
        pages: corpus.pages.clone(),
        chunks,
        images,
        text_embeddings,
        visual_embeddings,
    })
}

impl Store {
    pub fn validate(&self) -> Result<()> {
        let dims = |rows: &[Vector], n: usize, dim: usize, what: &str| -> Result<()> {
            if rows.len() != n {
                return Err(Error::Index(format!("{what}: {} rows for {n} records", rows.len())));
            }
            if let Some(r) = rows.iter().find(|r| r.len() != dim) {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: r.len(),
                });
            }
            Ok(())
        };
        dims(&self.text_embeddings, self.chunks.len(), TEXT_DIM, "text embeddings")?;
        dims(&self.visual_embeddings, self.images.len(), VISUAL_DIM, "visual embeddings")?;
        let known: std::collections::HashSet<&str> = self.images.iter().map(|i| i.image_id.as_str()).collect();
        for c in &self.chunks {
            if let Some(bad) = c.linked_images.iter().find(|i| !known.contains(i.as_str())) {
                return Err(Error::Index(format!("chunk {} links unknown image {bad}", c.chunk_id)));
            }
        }
        Ok(())
    }

    pub fn caption_map(&self) -> HashMap<String, String> {
        self.images
            .iter()
            .filter_map(|i| i.caption.clone().map(|c| (i.image_id.clone(), c)))
            .collect()
    }
}

/// Image id to projected visual embedding.
pub fn project_all(store: &Store, projection: &ProjectionMatrix) -> Result<HashMap<String, Vector>> {
    store
        .images
        .iter()
        .zip(&store.visual_embeddings)
        .map(|(img, v)| Ok((img.image_id.clone(), project_visual(v, projection)?)))
        .collect()
}

/// One fused embedding per chunk: text fused with the mean projected vector of
/// its linked images, or text alone when visual fusion is off or there are
/// no images.
pub fn fuse_chunks(store: &Store, projected: &HashMap<String, Vector>, config: &Config) -> Result<Vec<FusedEmbedding>> {
    let alpha = config.effective_alpha() as Real;
    store
        .chunks
        .iter()
        .zip(&store.text_embeddings)
        .map(|(c, t)| {
            let visuals: Vec<Vector> = if config.visual_fusion {
                c.linked_images.iter().filter_map(|i| projected.get(i).cloned()).collect()
            } else {
                Vec::new()
            };
            let mean = mean_vector(&visuals);
            fuse(t, mean.as_deref(), alpha)
        })
        .collect()
}

pub fn leaf_nodes(store: &Store, fused: &[FusedEmbedding]) -> Vec<TreeNode> {
    store
        .chunks
        .iter()
        .zip(fused)
        .map(|(c, e)| TreeNode::leaf(c.chunk_id.clone(), c.doc_id.clone(), c.text.clone(), c.linked_images.clone(), e.clone()))
        .collect()
}

/// A built, queryable index.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub config: Config,
    pub store: Store,
    pub projection: ProjectionMatrix,
    pub fused: Vec<FusedEmbedding>,
    pub tree: Tree,
}

impl Index {
    pub fn build(store: Store, config: Config, providers: &ProviderSet) -> Result<Self> {
        config.validate()?;
        store.validate()?;
        let projection = build_projection(config.seed);
        let projected = project_all(&store, &projection)?;
        let fused = fuse_chunks(&store, &projected, &config)?;
        let tree = build_tree(leaf_nodes(&store, &fused), providers, &config.tree_config())?;
        Ok(Self {
            config,
            store,
            projection,
            fused,
            tree,
        })
    }

    pub fn projected_visuals(&self) -> Result<HashMap<String, Vector>> {
        project_all(&self.store, &self.projection)
    }

    /// Routes (unless overridden), retrieves, and assembles a response.
    pub fn query(
        &self,
        providers: &ProviderSet,
        state: &StrategyState,
        request: &QueryRequest,
        generator: Option<&dyn ResponseGenerator>,
    ) -> Result<QueryOutcome> {
        let top_k = request.top_k.unwrap_or(self.config.top_k);
        if top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        let profile = self.config.phase_priors.profile(request.phase);
        let mut routing = route(
            &request.text,
            &request.context,
            state,
            &profile,
            &self.config.thresholds,
            providers,
        )?;
        if let Some(forced) = request.strategy {
            routing.strategy = forced;
            routing.overridden = true;
        }

        let embedding = providers
            .embed_text(std::slice::from_ref(&request.text))?
            .pop()
            .expect("one embedding per input");
        let mut result = match routing.strategy {
            Strategy::DirectSearch => direct_search(&embedding, &self.tree, top_k)?,
            Strategy::HierarchicalTraversal => hierarchical_traversal(&embedding, &self.tree, self.config.beam, top_k)?,
            Strategy::MultimodalFusion => {
                let captions = self.store.caption_map();
                let projected = self.projected_visuals()?;
                let tokens = TokenSetBuilder {
                    providers,
                    captions: &captions,
                    projected_visuals: &projected,
                    use_visual: self.config.visual_fusion,
                };
                multimodal_fusion(&request.text, &embedding, &self.tree, &tokens, top_k)?
            }
        };
        result.routing = Some(routing);
        let response = assemble_response(&request.text, &result, &profile, generator)?;
        let query_id = request.id.clone().unwrap_or_else(|| query_id(request, top_k, state));
        Ok(QueryOutcome {
            query_id,
            result,
            response,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    /// Caller-chosen id; derived from the request when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default = "neutral")]
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
}

fn neutral() -> Phase {
    Phase::Neutral
}

impl QueryRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            id: None,
            text: text.into(),
            phase: Phase::Neutral,
            strategy: None,
            top_k: None,
            context: Vec::new(),
        }
    }
}

/// Stable id of a request against a given controller state.
pub fn query_id(request: &QueryRequest, top_k: usize, state: &StrategyState) -> String {
    let key = serde_json::json!({
        "text": request.text,
        "phase": request.phase,
        "strategy": request.strategy,
        "top_k": top_k,
        "context": request.context,
        "updates": state.update_count,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    format!("q-{}", &hex(&digest)[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub result: RetrievalResult,
    pub response: Response,
}

impl QueryOutcome {
    pub fn routing(&self) -> &RoutingTrace {
        self.result.routing.as_ref().expect("query always records routing")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::EntropyBand;
    use crate::corpus::load_manifest;
    use std::io::Write;

    fn fixture(dir: &std::path::Path) -> Corpus {
        std::fs::write(dir.join("a.png"), "flooded pump station photograph").unwrap();
        let mut m = std::fs::File::create(dir.join("m.jsonl")).unwrap();
        writeln!(m, r#"{{"doc_id":"d1","page_no":1,"text":"Close the gas valve before leaving. Check for leaks.","image_refs":["img1"]}}"#).unwrap();
        writeln!(m, r#"{{"doc_id":"d1","page_no":2,"text":"Shelter capacity planning for evacuees and supplies."}}"#).unwrap();
        writeln!(m, r#"{{"doc_id":"d2","page_no":1,"text":"Pump stations flood when levees overtop."}}"#).unwrap();
        std::fs::write(dir.join("m.assets.jsonl"), "{\"image_id\":\"img1\",\"file_path\":\"a.png\"}\n").unwrap();
        load_manifest(&dir.join("m.jsonl")).unwrap()
    }

    #[test]
    fn ingest_build_query() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture(dir.path());
        let cfg = Config::default();
        let providers = cfg.provider_set().unwrap();
        let store = ingest(&corpus, &providers, &cfg).unwrap();
        assert_eq!(store.chunks.len(), 3);
        assert_eq!(store.images[0].caption.as_deref(), Some("flooded pump station photograph"));
        assert_eq!(store, ingest(&corpus, &providers, &cfg).unwrap());

        let index = Index::build(store, cfg.clone(), &providers).unwrap();
        assert_eq!(index.tree.leaves().count(), 3);
        assert!(index.fused[0].has_visual);
        assert!(!index.fused[1].has_visual);

        let state = cfg.fresh_state();
        let mut req = QueryRequest::new("How do I close the gas valve step by step?");
        req.phase = Phase::Rescue;
        let out = index.query(&providers, &state, &req, None).unwrap();
        assert_eq!(out.routing().band, EntropyBand::Low);
        assert_eq!(out.result.strategy, Strategy::DirectSearch);
        assert_eq!(out.result.items[0].node_id, "d1:p1:c0");
        assert!(out.response.text.starts_with("1. "));
        let again = index.query(&providers, &state, &req, None).unwrap();
        assert_eq!(out.result.without_timing(), again.result.without_timing());
        assert_eq!((&out.query_id, &out.response), (&again.query_id, &again.response));

        req.strategy = Some(Strategy::MultimodalFusion);
        let forced = index.query(&providers, &state, &req, None).unwrap();
        assert!(forced.routing().overridden);
        assert_eq!(forced.result.strategy, Strategy::MultimodalFusion);
        assert_ne!(forced.query_id, out.query_id);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = ingest(&Corpus::default(), &ProviderSet::local(0), &Config::default()).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn text_only_config_ignores_images() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture(dir.path());
        let cfg = Config {
            visual_fusion: false,
            ..Config::default()
        };
        let providers = cfg.provider_set().unwrap();
        let store = ingest(&corpus, &providers, &cfg).unwrap();
        let index = Index::build(store.clone(), cfg, &providers).unwrap();
        assert!(index.fused.iter().all(|f| !f.has_visual));
        assert_eq!(index.fused[0].vector, store.text_embeddings[0]);
    }
}
