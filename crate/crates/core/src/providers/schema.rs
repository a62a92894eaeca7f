//! Wire schema for remote providers.
//!
//! Request and response bodies are UTF-8 JSON posted to four endpoints:
//!
//! | endpoint       | request                              | response                                   |
//! |----------------|--------------------------------------|--------------------------------------------|
//! | `/embed_text`  | `{"texts": [..]}`                    | `{"embeddings": [[f32 x 1024], ..]}`       |
//! | `/embed_image` | `{"image_id": .., "image_b64": ..}`  | `{"caption": .., "embedding": [f32 x 768]}`|
//! | `/summarize`   | `{"texts": [..], "budget": n}`       | `{"summary": ..}`                          |
//! | `/classify`    | `{"query": .., "context": [..]}`     | `{"distribution": {"factual": .., ..}}`    |
//!
//! The validators here are shared by the HTTP client and by conformance
//! tests of any server implementing the contract.

use serde_json::{json, Value};

use super::{ClassDistribution, ImageEmbedding, ProviderResult, TEXT_DIM, VISUAL_DIM};
use crate::error::ProviderError;

fn violation(msg: impl Into<String>) -> ProviderError {
    ProviderError::ContractViolation(msg.into())
}

pub fn embed_text_request(texts: &[String]) -> Value {
    json!({ "texts": texts })
}

pub fn embed_image_request(image_id: &str, image_b64: &str) -> Value {
    json!({ "image_id": image_id, "image_b64": image_b64 })
}

pub fn summarize_request(texts: &[String], budget: usize) -> Value {
    json!({ "texts": texts, "budget": budget })
}

pub fn classify_request(query: &str, context: &[String]) -> Value {
    json!({ "query": query, "context": context })
}

pub fn check_vectors(vectors: &[Vec<f32>], count: usize, dim: usize) -> ProviderResult<()> {
    if vectors.len() != count {
        return Err(violation(format!(
            "expected {count} vectors, got {}",
            vectors.len()
        )));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(violation(format!("expected dimension {dim}, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(violation("non-finite embedding component"));
        }
    }
    Ok(())
}

fn float_vec(v: &Value, what: &str) -> ProviderResult<Vec<f32>> {
    let arr = v
        .as_array()
        .ok_or_else(|| violation(format!("{what} is not an array")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| violation(format!("{what} holds a non-number")))
        })
        .collect()
}

fn field<'a>(v: &'a Value, key: &str) -> ProviderResult<&'a Value> {
    v.get(key)
        .ok_or_else(|| violation(format!("response is missing `{key}`")))
}

pub fn parse_embed_text_response(v: &Value, count: usize) -> ProviderResult<Vec<Vec<f32>>> {
    let rows = field(v, "embeddings")?
        .as_array()
        .ok_or_else(|| violation("`embeddings` is not an array"))?;
    let out = rows
        .iter()
        .map(|r| float_vec(r, "embedding"))
        .collect::<ProviderResult<Vec<_>>>()?;
    check_vectors(&out, count, TEXT_DIM)?;
    Ok(out)
}

pub fn parse_embed_image_response(v: &Value) -> ProviderResult<ImageEmbedding> {
    let caption = field(v, "caption")?
        .as_str()
        .ok_or_else(|| violation("`caption` is not a string"))?
        .to_string();
    let embedding = float_vec(field(v, "embedding")?, "embedding")?;
    check_vectors(std::slice::from_ref(&embedding), 1, VISUAL_DIM)?;
    Ok(ImageEmbedding { caption, embedding })
}

pub fn parse_summarize_response(v: &Value) -> ProviderResult<String> {
    Ok(field(v, "summary")?
        .as_str()
        .ok_or_else(|| violation("`summary` is not a string"))?
        .to_string())
}

/// Remote distributions are accepted within 1e-6 of unit mass, then
/// renormalized so downstream checks can use the strict tolerance.
pub fn parse_classify_response(v: &Value) -> ProviderResult<ClassDistribution> {
    let d = field(v, "distribution")?;
    let mut p = [0.0; 4];
    for (slot, label) in p.iter_mut().zip(ClassDistribution::LABELS) {
        *slot = field(d, label)?
            .as_f64()
            .ok_or_else(|| violation(format!("`{label}` is not a number")))?;
    }
    let raw = ClassDistribution::from_array(p);
    raw.validate(1e-6)?;
    let sum: f64 = p.iter().sum();
    Ok(ClassDistribution::from_array(p.map(|x| x / sum)))
}
