//! Deterministic synthetic corpora with known topic structure, plus queries
//! and judgments derived from it.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::Phase;
use crate::corpus::{chunk_page, PageRecord, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::eval::{normalize_label, queries_to_jsonl, JudgmentSet};
use crate::pipeline::QueryRequest;
use crate::providers::is_class_keyword;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SHARED_VOCAB: usize = 30;
const LABELS_PER_TOPIC: usize = 3;
const ANCHOR_REPEATS: usize = 3;
const GOLD_GRADE: u32 = 3;
const TOPIC_GRADE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub docs: usize,
    pub pages_per_doc: usize,
    pub tokens_per_page: usize,
    /// Probability that a page carries one image.
    pub image_density: f64,
    pub topics: usize,
    /// Query counts for rescue, recovery and reconstruction.
    pub phase_mix: [usize; 3],
    /// Fraction of queries whose gold evidence is only findable through an
    /// image caption.
    pub image_query_fraction: f64,
    /// Fraction of shared filler words in page bodies.
    pub filler_fraction: f64,
    /// Distinct words per topic.
    pub topic_vocabulary: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            docs: 12,
            pages_per_doc: 5,
            tokens_per_page: 120,
            image_density: 0.5,
            topics: 4,
            phase_mix: [150, 200, 150],
            image_query_fraction: 0.4,
            filler_fraction: 0.0,
            topic_vocabulary: 12,
        }
    }
}

impl SynthSpec {
    pub fn total_queries(&self) -> usize {
        self.phase_mix.iter().sum()
    }

    /// Scales the 150/200/150 proportions to `total` queries.
    pub fn with_query_total(mut self, total: usize) -> Self {
        let rescue = total * 150 / 500;
        let reconstruction = total * 150 / 500;
        self.phase_mix = [rescue, total - rescue - reconstruction, reconstruction];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.topics == 0 && self.docs > 0 {
            return Err(Error::invalid("at least one topic is needed"));
        }
        if !unit(self.image_density) || !unit(self.image_query_fraction) || !unit(self.filler_fraction) {
            return Err(Error::invalid("densities and fractions must lie in [0, 1]"));
        }
        if self.topic_vocabulary < 2 {
            return Err(Error::invalid("topics need at least 2 words"));
        }
        if self.tokens_per_page < 8 {
            return Err(Error::invalid("pages need at least 8 tokens"));
        }
        if self.total_queries() > 0 && self.docs * self.pages_per_doc == 0 {
            return Err(Error::invalid("queries need at least one page"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    /// Relative to the output directory.
    pub file_path: PathBuf,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pages: Vec<PageRecord>,
    pub images: Vec<SynthImage>,
    pub queries: Vec<QueryRequest>,
    pub judgments: JudgmentSet,
    /// Topic of every page, keyed by `(doc_id, page_no)`.
    pub page_topics: BTreeMap<(String, u32), usize>,
    /// Ids of queries that need caption evidence.
    pub image_queries: Vec<String>,
}

impl SynthCorpus {
    /// Topic of a chunk id of the form `doc:pN:cM`.
    pub fn topic_of_chunk(&self, chunk_id: &str) -> Option<usize> {
        let mut parts = chunk_id.split(':');
        let doc = parts.next()?;
        let page: u32 = parts.next()?.strip_prefix('p')?.parse().ok()?;
        self.page_topics.get(&(doc.to_string(), page)).copied()
    }

    /// Writes `manifest.jsonl`, `manifest.assets.jsonl`, `images/`,
    /// `queries.jsonl` and `judgments.jsonl`; returns the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let io = |p: &Path, e| Error::io(p, e);
        std::fs::create_dir_all(dir.join("images")).map_err(|e| io(dir, e))?;
        let mut manifest = String::new();
        for p in &self.pages {
            manifest.push_str(&serde_json::to_string(p)?);
            manifest.push('\n');
        }
        let mut assets = String::new();
        for img in &self.images {
            let path = dir.join(&img.file_path);
            std::fs::write(&path, &img.bytes).map_err(|e| io(&path, e))?;
            assets.push_str(&serde_json::to_string(&serde_json::json!({
                "image_id": img.image_id,
                "file_path": img.file_path,
            }))?);
            assets.push('\n');
        }
        let files = [
            ("manifest.jsonl", manifest),
            ("manifest.assets.jsonl", assets),
            ("queries.jsonl", queries_to_jsonl(&self.queries)),
            ("judgments.jsonl", self.judgments.to_jsonl()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
        Ok(dir.join("manifest.jsonl"))
    }
}

struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(&mut self.rng).unwrap() as char,
                        *VOWELS.choose(&mut self.rng).unwrap() as char,
                    ]
                })
                .collect();
            if !is_class_keyword(&w) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, syllables: usize) -> Vec<String> {
        (0..n).map(|_| self.word(syllables)).collect()
    }
}

struct Page {
    record: PageRecord,
    topic: usize,
    anchor: String,
    visual: Option<String>,
    label: String,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Builds the corpus, queries and judgments for `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut words = WordSource {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        used: HashSet::new(),
    };
    let vocab: Vec<Vec<String>> = (0..spec.topics).map(|_| words.words(spec.topic_vocabulary, 3)).collect();
    let shared = words.words(SHARED_VOCAB, 2);
    let labels: Vec<Vec<String>> = (0..spec.topics)
        .map(|_| (0..LABELS_PER_TOPIC).map(|_| format!("{} {}", capitalize(&words.word(3)), words.word(3))).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_C0DE);

    let mut pages = Vec::new();
    let mut images = Vec::new();
    for d in 0..spec.docs {
        let topic = d % spec.topics;
        let doc_id = format!("doc{d:03}");
        for p in 1..=spec.pages_per_doc {
            let label = labels[topic][rng.random_range(0..LABELS_PER_TOPIC)].clone();
            let anchor = words.word(4);
            let heading_len = label.split_whitespace().count() + 1;
            let body_len = spec.tokens_per_page.saturating_sub(heading_len + ANCHOR_REPEATS).max(1);
            // Every page of a topic carries the same word bag, so pages of one
            // topic differ only by label, anchor, order and filler.
            let mut body: Vec<String> = (0..body_len)
                .map(|i| vocab[topic][i % spec.topic_vocabulary].clone())
                .collect();
            for w in body.iter_mut() {
                if rng.random_bool(spec.filler_fraction) {
                    *w = shared.choose(&mut rng).unwrap().clone();
                }
            }
            body.shuffle(&mut rng);
            for _ in 0..ANCHOR_REPEATS {
                let at = rng.random_range(0..=body.len());
                body.insert(at, anchor.clone());
            }
            let text = format!("{label}: {}.", body.join(" "));

            let (image_refs, visual) = if rng.random_bool(spec.image_density) {
                let image_id = format!("img-{doc_id}-p{p}");
                let keyword = words.word(4);
                let caption = format!(
                    "photograph {keyword} {} {}",
                    vocab[topic].choose(&mut rng).unwrap(),
                    vocab[topic].choose(&mut rng).unwrap()
                );
                images.push(SynthImage {
                    image_id: image_id.clone(),
                    file_path: PathBuf::from("images").join(format!("{image_id}.txt")),
                    bytes: caption.into_bytes(),
                });
                (vec![image_id], Some(keyword))
            } else {
                (Vec::new(), None)
            };
            pages.push(Page {
                record: PageRecord {
                    doc_id: doc_id.clone(),
                    page_no: p as u32,
                    text,
                    section_breaks: Vec::new(),
                    image_refs,
                },
                topic,
                anchor,
                visual,
                label,
            });
        }
    }

    let chunk_ids: Vec<Vec<(String, String)>> = pages
        .iter()
        .map(|p| {
            chunk_page(&p.record, DEFAULT_WINDOW, DEFAULT_OVERLAP)
                .map(|cs| cs.into_iter().map(|c| (c.chunk_id, c.text)).collect())
        })
        .collect::<Result<_>>()?;

    let mut phases: Vec<Phase> = Vec::new();
    for (phase, &n) in Phase::OPERATIONAL.iter().zip(&spec.phase_mix) {
        phases.extend(std::iter::repeat_n(*phase, n));
    }
    phases.shuffle(&mut rng);

    let with_images: Vec<usize> = (0..pages.len()).filter(|&i| pages[i].visual.is_some()).collect();
    let mut queries = Vec::new();
    let mut judgments = JudgmentSet::default();
    let mut image_queries = Vec::new();
    for (qi, phase) in phases.into_iter().enumerate() {
        let id = format!("q{qi:04}");
        let image_linked = !with_images.is_empty() && rng.random_bool(spec.image_query_fraction);
        let target = if image_linked {
            *with_images.choose(&mut rng).unwrap()
        } else {
            rng.random_range(0..pages.len())
        };
        let page = &pages[target];
        let topic_words: Vec<&String> = vocab[page.topic].choose_multiple(&mut rng, 2).collect();
        let text = if image_linked {
            image_queries.push(id.clone());
            format!(
                "{} {} {}",
                topic_words[0],
                page.visual.as_deref().unwrap(),
                topic_words[1]
            )
        } else {
            format!("How to {} {} steps?", topic_words[0], page.anchor)
        };

        for (pi, other) in pages.iter().enumerate() {
            if other.topic != page.topic {
                continue;
            }
            for (cid, ctext) in &chunk_ids[pi] {
                let gold = pi == target && (image_linked || ctext.contains(&page.anchor));
                judgments.grade(&id, cid, if gold { GOLD_GRADE } else { TOPIC_GRADE });
                if gold {
                    judgments.evidence.entry(id.clone()).or_default().insert(cid.clone());
                }
            }
        }
        judgments
            .subtasks
            .entry(id.clone())
            .or_default()
            .insert(normalize_label(&page.label));

        let mut q = QueryRequest::new(text);
        q.id = Some(id);
        q.phase = phase;
        queries.push(q);
    }

    Ok(SynthCorpus {
        page_topics: pages
            .iter()
            .map(|p| ((p.record.doc_id.clone(), p.record.page_no), p.topic))
            .collect(),
        pages: pages.into_iter().map(|p| p.record).collect(),
        images,
        queries,
        judgments,
        image_queries,
    })
}
