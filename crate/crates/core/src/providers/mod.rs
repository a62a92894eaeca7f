//! Capability providers: text embedding, image captioning and embedding,
//! summarization, and query classification.
//!
//! Every provider sits behind a small trait. [`ProviderSet`] bundles one of
//! each and enforces the wire contract (dimensions, non-empty inputs,
//! distribution validity) regardless of whether the backend is local or
//! remote.

mod hash;
mod local;
mod remote;
pub mod schema;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use hash::{feature_tokens, hash_embed, stable_hash};
pub use local::{
    is_class_keyword,
    LocalClassifier, LocalImageEmbedder, LocalSummarizer, LocalTextEmbedder,
};
pub use remote::RemoteProvider;

use crate::error::ProviderError;

pub const TEXT_DIM: usize = 1024;
pub const VISUAL_DIM: usize = 768;

pub type ProviderResult<T> = std::result::Result<T, ProviderError>;

/// Probability over the four query classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub factual: f64,
    pub procedural: f64,
    pub analytical: f64,
    pub synthesized: f64,
}

impl ClassDistribution {
    pub const LABELS: [&'static str; 4] = ["factual", "procedural", "analytical", "synthesized"];

    pub fn uniform() -> Self {
        Self::from_array([0.25; 4])
    }

    pub fn from_array(p: [f64; 4]) -> Self {
        Self {
            factual: p[0],
            procedural: p[1],
            analytical: p[2],
            synthesized: p[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.factual, self.procedural, self.analytical, self.synthesized]
    }

    /// Checks each probability is in `[0, 1]` and the sum is 1 within `tol`.
    pub fn validate(&self, tol: f64) -> ProviderResult<()> {
        let p = self.as_array();
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(ProviderError::ContractViolation(format!(
                "class probabilities out of range: {p:?}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(ProviderError::ContractViolation(format!(
                "class probabilities sum to {sum}"
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        let p = self.as_array();
        (0..4).fold(0, |best, i| if p[i] > p[best] { i } else { best })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEmbedding {
    pub caption: String,
    pub embedding: Vec<f32>,
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f32>>>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image_id: &str, bytes: &[u8]) -> ProviderResult<ImageEmbedding>;
}

pub trait Summarizer: Send + Sync {
    fn summarize(&self, texts: &[String], budget: usize) -> ProviderResult<String>;
}

pub trait QueryClassifier: Send + Sync {
    fn classify_query(&self, query: &str, context: &[String]) -> ProviderResult<ClassDistribution>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    TextEmbed,
    ImageEmbed,
    Summarize,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    LocalDeterministic,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub kind: ProviderKind,
    pub transport: Transport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

impl ProviderEndpoint {
    pub fn local(kind: ProviderKind) -> Self {
        Self {
            kind,
            transport: Transport::LocalDeterministic,
            address: None,
            timeout_ms: 30_000,
            bearer_token: None,
        }
    }

    pub fn validate(&self) -> ProviderResult<()> {
        if self.timeout_ms == 0 {
            return Err(ProviderError::Precondition("timeout must be positive".into()));
        }
        if self.transport == Transport::RemoteHttp && self.address.is_none() {
            return Err(ProviderError::Precondition(format!(
                "remote {:?} provider needs an address",
                self.kind
            )));
        }
        Ok(())
    }
}

/// One provider per capability, with contract checks applied to every call.
#[derive(Clone)]
pub struct ProviderSet {
    text: Arc<dyn TextEmbedder>,
    image: Arc<dyn ImageEmbedder>,
    summarizer: Arc<dyn Summarizer>,
    classifier: Arc<dyn QueryClassifier>,
}

impl std::fmt::Debug for ProviderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderSet").finish_non_exhaustive()
    }
}

impl ProviderSet {
    pub fn new(
        text: Arc<dyn TextEmbedder>,
        image: Arc<dyn ImageEmbedder>,
        summarizer: Arc<dyn Summarizer>,
        classifier: Arc<dyn QueryClassifier>,
    ) -> Self {
        Self {
            text,
            image,
            summarizer,
            classifier,
        }
    }

    /// All four capabilities backed by the deterministic local implementations.
    pub fn local(seed: u64) -> Self {
        Self::new(
            Arc::new(LocalTextEmbedder::new(seed)),
            Arc::new(LocalImageEmbedder::new(seed)),
            Arc::new(LocalSummarizer),
            Arc::new(LocalClassifier::default()),
        )
    }

    pub fn from_endpoints(endpoints: &[ProviderEndpoint], seed: u64) -> ProviderResult<Self> {
        let mut set = Self::local(seed);
        for ep in endpoints {
            ep.validate()?;
            if ep.transport == Transport::LocalDeterministic {
                continue;
            }
            let remote = Arc::new(RemoteProvider::from_endpoint(ep)?);
            match ep.kind {
                ProviderKind::TextEmbed => set.text = remote,
                ProviderKind::ImageEmbed => set.image = remote,
                ProviderKind::Summarize => set.summarizer = remote,
                ProviderKind::Classify => set.classifier = remote,
            }
        }
        Ok(set)
    }

    pub fn with_classifier(mut self, classifier: Arc<dyn QueryClassifier>) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn Summarizer>) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn embed_text(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Err(ProviderError::Precondition("embed_text needs at least one text".into()));
        }
        let out = self.text.embed_text(texts)?;
        schema::check_vectors(&out, texts.len(), TEXT_DIM)?;
        Ok(out)
    }

    pub fn embed_image(&self, image_id: &str, bytes: &[u8]) -> ProviderResult<ImageEmbedding> {
        if bytes.is_empty() {
            return Err(ProviderError::Precondition(format!("image `{image_id}` has no bytes")));
        }
        let out = self.image.embed_image(image_id, bytes)?;
        schema::check_vectors(std::slice::from_ref(&out.embedding), 1, VISUAL_DIM)?;
        Ok(out)
    }

    pub fn summarize(&self, texts: &[String], budget: usize) -> ProviderResult<String> {
        if texts.is_empty() {
            return Err(ProviderError::Precondition("summarize needs at least one text".into()));
        }
        if budget == 0 {
            return Err(ProviderError::Precondition("summary budget must be positive".into()));
        }
        let out = self.summarizer.summarize(texts, budget)?;
        let used = crate::corpus::token_spans(&out).len();
        if used > budget {
            return Err(ProviderError::ContractViolation(format!(
                "summary has {used} tokens, budget {budget}"
            )));
        }
        Ok(out)
    }

    pub fn classify_query(&self, query: &str, context: &[String]) -> ProviderResult<ClassDistribution> {
        if query.trim().is_empty() {
            return Err(ProviderError::Precondition("query must be non-empty".into()));
        }
        let dist = self.classifier.classify_query(query, context)?;
        dist.validate(1e-9)?;
        Ok(dist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct WrongDim;
    impl TextEmbedder for WrongDim {
        fn embed_text(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| vec![0.0; 768]).collect())
        }
    }
    impl ImageEmbedder for WrongDim {
        fn embed_image(&self, _: &str, _: &[u8]) -> ProviderResult<ImageEmbedding> {
            Ok(ImageEmbedding {
                caption: String::new(),
                embedding: vec![0.0; 1024],
            })
        }
    }

    #[test]
    fn dimension_violations_are_caught() {
        let set = ProviderSet::local(1);
        let wrong = ProviderSet::new(
            Arc::new(WrongDim),
            Arc::new(WrongDim),
            Arc::new(LocalSummarizer),
            Arc::new(LocalClassifier::default()),
        );
        assert!(set.embed_text(&["a".into()]).is_ok());
        assert!(matches!(
            wrong.embed_text(&["a".into()]),
            Err(ProviderError::ContractViolation(_))
        ));
        assert!(matches!(
            wrong.embed_image("i", b"x"),
            Err(ProviderError::ContractViolation(_))
        ));
    }

    #[test]
    fn preconditions() {
        let set = ProviderSet::local(1);
        assert!(matches!(set.embed_text(&[]), Err(ProviderError::Precondition(_))));
        assert!(matches!(set.embed_image("i", b""), Err(ProviderError::Precondition(_))));
        assert!(matches!(
            set.summarize(&["a".into()], 0),
            Err(ProviderError::Precondition(_))
        ));
        assert!(matches!(set.classify_query("  ", &[]), Err(ProviderError::Precondition(_))));
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = ProviderEndpoint::local(ProviderKind::Classify);
        assert!(ep.validate().is_ok());
        ep.transport = Transport::RemoteHttp;
        assert!(ep.validate().is_err());
        ep.address = Some("http://127.0.0.1:1".into());
        assert!(ep.validate().is_ok());
        ep.timeout_ms = 0;
        assert!(ep.validate().is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::uniform().validate(1e-9).is_ok());
        assert!(ClassDistribution::from_array([0.5, 0.5, 0.5, 0.0]).validate(1e-9).is_err());
        assert!(ClassDistribution::from_array([1.5, -0.5, 0.0, 0.0]).validate(1e-9).is_err());
        assert_eq!(ClassDistribution::from_array([0.1, 0.6, 0.2, 0.1]).argmax(), 1);
    }
}
