use std::collections::HashMap;

use super::hash::{add_feature, feature_tokens, hash_embed};
use super::{
    ClassDistribution, ImageEmbedder, ImageEmbedding, ProviderResult, QueryClassifier, Summarizer,
    TextEmbedder, TEXT_DIM, VISUAL_DIM,
};
use crate::corpus::token_spans;
use crate::scalar::normalize_in_place;

/// Salt separating the visual hash space from the text one.
const VISUAL_SALT: u64 = 0x5649_5355_414c;

#[derive(Debug, Clone)]
pub struct LocalTextEmbedder {
    seed: u64,
}

impl LocalTextEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl TextEmbedder for LocalTextEmbedder {
    fn embed_text(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| hash_embed(t, TEXT_DIM, self.seed))
            .collect())
    }
}

/// Treats UTF-8 image payloads as their own caption; binary payloads get an
/// empty caption and a vector hashed from byte 4-grams.
#[derive(Debug, Clone)]
pub struct LocalImageEmbedder {
    seed: u64,
}

impl LocalImageEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl ImageEmbedder for LocalImageEmbedder {
    fn embed_image(&self, _image_id: &str, bytes: &[u8]) -> ProviderResult<ImageEmbedding> {
        let caption = std::str::from_utf8(bytes)
            .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let seed = self.seed ^ VISUAL_SALT;
        let embedding = if feature_tokens(&caption).is_empty() {
            let mut v = vec![0.0f32; VISUAL_DIM];
            for gram in bytes.windows(bytes.len().clamp(1, 4)) {
                add_feature(&mut v, seed, gram);
            }
            normalize_in_place(&mut v);
            v
        } else {
            hash_embed(&caption, VISUAL_DIM, seed)
        };
        Ok(ImageEmbedding { caption, embedding })
    }
}

/// Ordered concatenation of the inputs, cut after `budget` tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalSummarizer;

impl Summarizer for LocalSummarizer {
    fn summarize(&self, texts: &[String], budget: usize) -> ProviderResult<String> {
        let joined = texts.join("\n");
        let spans = token_spans(&joined);
        if spans.len() <= budget {
            return Ok(joined);
        }
        let end = spans[budget - 1].end;
        Ok(joined[..end].to_string())
    }
}

/// Keyword-table classifier.
///
/// Each query (and context tag) token that appears in a class table adds one
/// hit to that class; the distribution is the add-`smoothing` normalization
/// of the hit counts. Queries with no hits are uniform.
#[derive(Debug, Clone)]
pub struct LocalClassifier {
    table: HashMap<String, usize>,
    smoothing: f64,
}

const FACTUAL: &[&str] = &[
    "what", "where", "when", "who", "which", "list", "location", "locations", "number", "count",
    "name", "status", "capacity",
];
const PROCEDURAL: &[&str] = &[
    "how", "steps", "step", "procedure", "procedures", "shut", "turn", "install", "evacuate",
    "operate", "repair", "secure", "instructions", "checklist",
];
const ANALYTICAL: &[&str] = &[
    "why", "analyze", "analyse", "compare", "impact", "cause", "causes", "assess", "evaluate",
    "trend", "trends", "risk", "tradeoff",
];
const SYNTHESIZED: &[&str] = &[
    "plan", "planning", "strategy", "overall", "summarize", "recommend", "coordinate",
    "reconstruction", "integrate", "longterm", "synthesis", "prioritize",
];

/// Whether the local classifier counts `token` towards any class.
pub fn is_class_keyword(token: &str) -> bool {
    [FACTUAL, PROCEDURAL, ANALYTICAL, SYNTHESIZED]
        .iter()
        .any(|table| table.contains(&token))
}

impl Default for LocalClassifier {
    fn default() -> Self {
        let mut table = HashMap::new();
        for (class, words) in [FACTUAL, PROCEDURAL, ANALYTICAL, SYNTHESIZED].iter().enumerate() {
            for w in *words {
                table.insert((*w).to_string(), class);
            }
        }
        Self {
            table,
            smoothing: 0.05,
        }
    }
}

impl LocalClassifier {
    pub fn hits(&self, query: &str, context: &[String]) -> [usize; 4] {
        let mut hits = [0usize; 4];
        let ctx = context.iter().flat_map(|c| feature_tokens(c));
        for tok in feature_tokens(query).into_iter().chain(ctx) {
            if let Some(&class) = self.table.get(&tok) {
                hits[class] += 1;
            }
        }
        hits
    }
}

impl QueryClassifier for LocalClassifier {
    fn classify_query(&self, query: &str, context: &[String]) -> ProviderResult<ClassDistribution> {
        let hits = self.hits(query, context);
        let total: usize = hits.iter().sum();
        if total == 0 {
            return Ok(ClassDistribution::uniform());
        }
        let denom = total as f64 + 4.0 * self.smoothing;
        let mut p = hits.map(|h| (h as f64 + self.smoothing) / denom);
        // Push rounding residue into the largest class so the sum is exact to 1e-15.
        let residue = 1.0 - p.iter().sum::<f64>();
        let top = ClassDistribution::from_array(p).argmax();
        p[top] += residue;
        Ok(ClassDistribution::from_array(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_embedder_is_deterministic_and_zero_on_empty() {
        let e = LocalTextEmbedder::new(3);
        let out = e.embed_text(&["".into(), "gas".into(), "gas".into()]).unwrap();
        assert_eq!(out[0].len(), TEXT_DIM);
        assert!(out[0].iter().all(|&x| x == 0.0));
        assert_eq!(out[1], out[2]);
    }

    #[test]
    fn image_embedder_is_deterministic() {
        let e = LocalImageEmbedder::new(3);
        let a = e.embed_image("i", b"collapsed bridge span").unwrap();
        let b = e.embed_image("i", b"collapsed bridge span").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.caption, "collapsed bridge span");
        assert_eq!(a.embedding.len(), VISUAL_DIM);

        let bin = e.embed_image("i", &[0xff, 0x00, 0x12, 0x99, 0x10]).unwrap();
        assert!(bin.caption.is_empty());
        let n: f32 = bin.embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn summarizer_truncates() {
        let s = LocalSummarizer;
        assert_eq!(s.summarize(&["Shut off gas.".into()], 10).unwrap(), "Shut off gas.");
        let out = s
            .summarize(&["open the valve".into(), "close the door".into()], 4)
            .unwrap();
        assert_eq!(out, "open the valve\nclose");
        let out = s.summarize(&["a, b".into()], 2).unwrap();
        assert_eq!(out, "a,");
    }

    #[test]
    fn classifier_examples() {
        let c = LocalClassifier::default();
        let d = c.classify_query("how to shut off gas line", &[]).unwrap();
        assert_eq!(d.argmax(), 1);
        d.validate(1e-12).unwrap();

        let u = c.classify_query("tsunami debris", &[]).unwrap();
        assert_eq!(u, ClassDistribution::uniform());

        let again = c.classify_query("how to shut off gas line", &[]).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn context_tags_contribute() {
        let c = LocalClassifier::default();
        let d = c.classify_query("bridge", &["compare".into()]).unwrap();
        assert_eq!(d.argmax(), 2);
    }
}
