//! Page-manifest ingestion and structure-aware chunking.
//!
//! A corpus is described by two line-delimited JSON files living side by side:
//!
//! * `<name>.jsonl`: one page per line with `doc_id`, `page_no`, `text`,
//!   `section_breaks` (token offsets) and `image_refs` (image ids).
//! * `<name>.assets.jsonl`: one image per line with `image_id` and
//!   `file_path` (relative paths resolve against the manifest directory).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 800;
pub const DEFAULT_OVERLAP: usize = 150;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub doc_id: String,
    pub page_no: u32,
    pub text: String,
    #[serde(default)]
    pub section_breaks: Vec<usize>,
    #[serde(default)]
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub page_no: u32,
    /// Half-open token span within the page.
    pub token_span: (usize, usize),
    pub text: String,
    pub linked_images: Vec<String>,
}

impl TextChunk {
    pub fn len(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub image_id: String,
    pub doc_id: String,
    pub page_no: u32,
    pub file_path: PathBuf,
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pages: Vec<PageRecord>,
    pub images: Vec<ImageAsset>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageAsset> {
        self.images.iter().find(|a| a.image_id == image_id)
    }

    /// Chunks every page and links page images, in page order.
    pub fn chunk(&self, window: usize, overlap: usize) -> Result<Vec<TextChunk>> {
        let mut out = Vec::new();
        for page in &self.pages {
            let chunks = chunk_page(page, window, overlap)?;
            out.extend(associate_images(page, chunks));
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct AssetRecord {
    image_id: String,
    file_path: PathBuf,
}

/// Path of the assets table that accompanies `manifest`.
pub fn assets_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.with_file_name(format!("{stem}.assets.jsonl"))
}

pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut assets: HashMap<String, PathBuf> = HashMap::new();
    let apath = assets_path(path);
    if apath.exists() {
        let araw = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
        for (i, line) in araw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: AssetRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: apath.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let resolved = if rec.file_path.is_absolute() {
                rec.file_path
            } else {
                base.join(rec.file_path)
            };
            if assets.insert(rec.image_id.clone(), resolved).is_some() {
                return Err(Error::DuplicateImage(rec.image_id));
            }
        }
    }

    let mut pages = Vec::new();
    let mut seen_pages = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let page: PageRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        validate_page(&page).map_err(bad)?;
        if !seen_pages.insert((page.doc_id.clone(), page.page_no)) {
            return Err(bad(format!(
                "duplicate page {} of `{}`",
                page.page_no, page.doc_id
            )));
        }
        pages.push(page);
    }
    pages.sort_by(|a, b| (&a.doc_id, a.page_no).cmp(&(&b.doc_id, b.page_no)));

    let mut images: Vec<ImageAsset> = Vec::new();
    let mut linked = HashSet::new();
    for page in &pages {
        for image_id in &page.image_refs {
            if !linked.insert(image_id.clone()) {
                continue;
            }
            let file_path = assets.get(image_id).ok_or_else(|| Error::MissingImage {
                image_id: image_id.clone(),
                reason: "not listed in the assets table".into(),
            })?;
            if !file_path.is_file() {
                return Err(Error::MissingImage {
                    image_id: image_id.clone(),
                    reason: format!("file {} does not exist", file_path.display()),
                });
            }
            images.push(ImageAsset {
                image_id: image_id.clone(),
                doc_id: page.doc_id.clone(),
                page_no: page.page_no,
                file_path: file_path.clone(),
                caption: None,
            });
        }
    }

    Ok(Corpus { pages, images })
}

fn validate_page(page: &PageRecord) -> std::result::Result<(), String> {
    if page.page_no == 0 {
        return Err("page_no must be >= 1".into());
    }
    let n = tokenize(&page.text).len();
    let mut prev: Option<usize> = None;
    for &b in &page.section_breaks {
        if prev.is_some_and(|p| b <= p) {
            return Err("section_breaks must be strictly increasing".into());
        }
        if b > n {
            return Err(format!("section break {b} exceeds token count {n}"));
        }
        prev = Some(b);
    }
    Ok(())
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Byte ranges of each token in `text`.
///
/// Tokens are maximal runs of alphanumeric characters; every other
/// non-whitespace character is a token on its own.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            spans.push(s..i);
        }
        if is_punct(c) {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

/// Splits a page into overlapping token windows.
///
/// Windows advance by `window - overlap` and restart at every section break,
/// so no chunk straddles two sections. A short tail window is kept.
pub fn chunk_page(page: &PageRecord, window: usize, overlap: usize) -> Result<Vec<TextChunk>> {
    if window == 0 || overlap >= window {
        return Err(Error::invalid(format!(
            "chunk window {window} must exceed overlap {overlap}"
        )));
    }
    let spans = token_spans(&page.text);
    let n = spans.len();
    let stride = window - overlap;

    let mut bounds = vec![0];
    bounds.extend(page.section_breaks.iter().copied().filter(|&b| b > 0 && b < n));
    bounds.push(n);

    let mut chunks = Vec::new();
    for section in bounds.windows(2) {
        let (sec_start, sec_end) = (section[0], section[1]);
        let mut start = sec_start;
        while start < sec_end {
            let end = (start + window).min(sec_end);
            chunks.push(TextChunk {
                chunk_id: format!("{}:p{}:c{}", page.doc_id, page.page_no, chunks.len()),
                doc_id: page.doc_id.clone(),
                page_no: page.page_no,
                token_span: (start, end),
                text: page.text[spans[start].start..spans[end - 1].end].to_string(),
                linked_images: Vec::new(),
            });
            if end == sec_end {
                break;
            }
            start += stride;
        }
    }
    Ok(chunks)
}

/// Links every image on the page to every chunk of that page.
pub fn associate_images(page: &PageRecord, mut chunks: Vec<TextChunk>) -> Vec<TextChunk> {
    for chunk in &mut chunks {
        debug_assert_eq!(chunk.doc_id, page.doc_id);
        chunk.linked_images = page.image_refs.clone();
    }
    chunks
}
