use std::time::Duration;

use base64::Engine;
use serde_json::Value;

use super::schema;
use super::{
    ClassDistribution, ImageEmbedder, ImageEmbedding, ProviderEndpoint, ProviderResult,
    QueryClassifier, Summarizer, TextEmbedder,
};
use crate::error::ProviderError;

/// Environment variable that replaces the address of every remote endpoint.
pub const ADDRESS_ENV: &str = "MMTREE_PROVIDER_URL";

/// HTTP client for a provider service speaking the JSON wire contract in
/// [`schema`].
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    base: String,
    bearer: Option<String>,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(base: impl Into<String>, timeout: Duration, bearer: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            bearer,
            agent,
        }
    }

    pub fn from_endpoint(ep: &ProviderEndpoint) -> ProviderResult<Self> {
        let address = std::env::var(ADDRESS_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| ep.address.clone())
            .ok_or_else(|| ProviderError::Precondition("remote provider needs an address".into()))?;
        Ok(Self::new(
            address,
            Duration::from_millis(ep.timeout_ms),
            ep.bearer_token.clone(),
        ))
    }

    fn post(&self, path: &str, body: &Value) -> ProviderResult<Value> {
        let url = format!("{}{}", self.base, path);
        let mut req = self.agent.post(&url);
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        if status != 200 {
            return Err(ProviderError::Transport(format!("{url}: HTTP {status}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| ProviderError::ContractViolation(format!("{url}: {e}")))
    }
}

impl TextEmbedder for RemoteProvider {
    fn embed_text(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f32>>> {
        let v = self.post("/embed_text", &schema::embed_text_request(texts))?;
        schema::parse_embed_text_response(&v, texts.len())
    }
}

impl ImageEmbedder for RemoteProvider {
    fn embed_image(&self, image_id: &str, bytes: &[u8]) -> ProviderResult<ImageEmbedding> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        let v = self.post("/embed_image", &schema::embed_image_request(image_id, &b64))?;
        schema::parse_embed_image_response(&v)
    }
}

impl Summarizer for RemoteProvider {
    fn summarize(&self, texts: &[String], budget: usize) -> ProviderResult<String> {
        let v = self.post("/summarize", &schema::summarize_request(texts, budget))?;
        schema::parse_summarize_response(&v)
    }
}

impl QueryClassifier for RemoteProvider {
    fn classify_query(&self, query: &str, context: &[String]) -> ProviderResult<ClassDistribution> {
        let v = self.post("/classify", &schema::classify_request(query, context))?;
        schema::parse_classify_response(&v)
    }
}
