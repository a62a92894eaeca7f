//! On-disk index directory.
//!
//! Immutable files are written into a temporary sibling directory and
//! swapped in with a rename, so a reader sees either the previous index, the
//! new one, or (briefly) none. `meta.json` is written last and lists the
//! SHA-256 of every immutable file. `controller.toml` and `traces.jsonl` are
//! the only files that change after a commit.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::controller::{EntropyBand, RoutingTrace, Strategy, StrategyState};
use crate::corpus::{ImageAsset, PageRecord, TextChunk};
use crate::embedding::ProjectionMatrix as Projection;
use crate::error::{Error, Result};
use crate::pipeline::{fuse_chunks, project_all, Index, QueryOutcome, QueryRequest, Store};
use crate::providers::{TEXT_DIM, VISUAL_DIM};
use crate::tree::{hex, NodeRecord, Tree};
use crate::{FusedEmbedding, ProjectionMatrix, Real, Vector};

pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const CONFIG: &str = "config.toml";
const PAGES: &str = "pages.jsonl";
const CHUNKS: &str = "chunks.jsonl";
const IMAGES: &str = "images.jsonl";
const TEXT_BLOB: &str = "text.f32";
const VISUAL_BLOB: &str = "visual.f32";
const FUSED_BLOB: &str = "fused.f32";
const PROJECTION: &str = "projection.bin";
const TREE_TABLE: &str = "tree.jsonl";
const TREE_BLOB: &str = "tree.f32";
const CONTROLLER: &str = "controller.toml";
const TRACES: &str = "traces.jsonl";
const PROJECTION_MAGIC: &[u8; 4] = b"MMPJ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub chunks: usize,
    pub images: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub built: bool,
    /// Tree levels that could not be split and were summarized whole.
    #[serde(default)]
    pub degenerate_levels: Vec<usize>,
    /// File name to SHA-256 hex, for every immutable file.
    pub files: BTreeMap<String, String>,
}

/// Everything an index directory holds apart from the mutable controller
/// state and trace log. `tree` is absent between ingest and build.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub config: Config,
    pub store: Store,
    pub projection: ProjectionMatrix,
    pub fused: Vec<FusedEmbedding>,
    pub tree: Option<Tree>,
}

impl Snapshot {
    /// Ingested store plus projection and fused leaf embeddings.
    pub fn ingested(store: Store, config: Config) -> Result<Self> {
        config.validate()?;
        store.validate()?;
        let projection = crate::embedding::build_projection(config.seed);
        let fused = fuse_chunks(&store, &project_all(&store, &projection)?, &config)?;
        Ok(Self {
            config,
            store,
            projection,
            fused,
            tree: None,
        })
    }

    pub fn from_index(index: Index) -> Self {
        Self {
            config: index.config,
            store: index.store,
            projection: index.projection,
            fused: index.fused,
            tree: Some(index.tree),
        }
    }

    pub fn into_index(self) -> Result<Index> {
        let tree = self
            .tree
            .ok_or_else(|| Error::Index("index has not been built yet; run `build` first".into()))?;
        Ok(Index {
            config: self.config,
            store: self.store,
            projection: self.projection,
            fused: self.fused,
            tree,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub request: QueryRequest,
    pub top_k: usize,
    pub routing: RoutingTrace,
    pub results: Vec<String>,
    pub citations: Vec<String>,
    /// Controller updates applied before this query ran.
    pub state_updates: u64,
}

impl TraceRecord {
    pub fn new(outcome: &QueryOutcome, request: &QueryRequest, top_k: usize, state: &StrategyState) -> Self {
        Self {
            query_id: outcome.query_id.clone(),
            request: request.clone(),
            top_k,
            routing: outcome.routing().clone(),
            results: outcome.result.node_ids(),
            citations: outcome.response.citations.clone(),
            state_updates: state.update_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub band: EntropyBand,
    pub strategy: Strategy,
    pub reward: f64,
    pub before: f64,
    pub after: f64,
}

/// Test hooks for commit.
#[derive(Debug, Clone, Copy, Default)]
pub struct CommitOptions {
    /// Replace an existing index.
    pub force: bool,
    /// Stop after writing this many files, leaving the staging directory
    /// behind as a killed process would.
    pub interrupt_after: Option<usize>,
}

/// Exclusive writer lock, held as `<dir>.lock` next to the index.
#[derive(Debug)]
pub struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = sibling(dir, "", ".lock");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Index(format!(
                "{} is locked by another writer (remove {} if no writer is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sibling(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "index".into());
    dir.with_file_name(format!("{prefix}{name}{suffix}"))
}

fn unique_suffix() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{}-{nanos}", std::process::id())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], name: &str) -> Result<Vec<T>> {
    bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace))
        .map(|(i, l)| serde_json::from_slice(l).map_err(|e| Error::Index(format!("{name} line {}: {e}", i + 1))))
        .collect()
}

fn f32_blob<'a>(rows: impl Iterator<Item = &'a Vector>) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn parse_f32_rows(bytes: &[u8], rows: usize, dim: usize, name: &str) -> Result<Vec<Vector>> {
    if bytes.len() != rows * dim * 4 {
        return Err(Error::Index(format!(
            "{name}: expected {} bytes for {rows}x{dim}, found {}",
            rows * dim * 4,
            bytes.len()
        )));
    }
    let values: Vec<Real> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(if dim == 0 {
        vec![Vec::new(); rows]
    } else {
        values.chunks(dim).map(<[Real]>::to_vec).collect()
    })
}

/// Header (magic, u32 rows, u32 cols, u64 seed) then row-major `f32`.
pub fn projection_bytes(p: &ProjectionMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * p.entries().len());
    out.extend_from_slice(PROJECTION_MAGIC);
    out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
    out.extend_from_slice(&p.seed().to_le_bytes());
    for x in p.entries() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn parse_projection(bytes: &[u8]) -> Result<ProjectionMatrix> {
    if bytes.len() < 20 || &bytes[..4] != PROJECTION_MAGIC {
        return Err(Error::Index("projection.bin has a bad header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = parse_f32_rows(&bytes[20..], 1, rows * cols, PROJECTION)?;
    Projection::from_parts(rows, cols, body.into_iter().next().unwrap_or_default(), seed)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
    f.sync_all().map_err(|e| Error::io(&path, e))
}

/// Writes `bytes` to `dir/name` through a temp file and a rename.
fn replace_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = format!(".{name}.tmp-{}", unique_suffix());
    write_file(dir, &tmp, bytes)?;
    let (from, to) = (dir.join(&tmp), dir.join(name));
    fs::rename(&from, &to).map_err(|e| {
        let _ = fs::remove_file(&from);
        Error::io(&to, e)
    })
}

/// Handle on an index directory.
#[derive(Debug, Clone)]
pub struct IndexDirectory {
    path: PathBuf,
}

impl IndexDirectory {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.join(META).exists()
    }

    /// Atomically replaces the immutable part of the index. Controller state
    /// and traces survive a replacement; a fresh index gets the config's
    /// canonical state.
    pub fn commit(&self, snapshot: &Snapshot, options: CommitOptions) -> Result<Meta> {
        let _lock = WriterLock::acquire(&self.path)?;
        if self.path.exists() && !options.force {
            return Err(Error::Index(format!(
                "{} already exists; pass --force to replace it",
                self.path.display()
            )));
        }
        self.remove_stale_staging();
        let staging = sibling(&self.path, ".", &format!(".tmp-{}", unique_suffix()));
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        match self.stage(&staging, snapshot, options.interrupt_after) {
            Ok(meta) => {
                self.swap_in(&staging)?;
                Ok(meta)
            }
            Err(e) => {
                if options.interrupt_after.is_none() {
                    let _ = fs::remove_dir_all(&staging);
                }
                Err(e)
            }
        }
    }

    fn remove_stale_staging(&self) {
        let (Some(parent), Some(name)) = (self.path.parent(), self.path.file_name()) else {
            return;
        };
        let prefix = format!(".{}.tmp-", name.to_string_lossy());
        let parent = if parent.as_os_str().is_empty() { Path::new(".") } else { parent };
        if let Ok(entries) = fs::read_dir(parent) {
            for e in entries.flatten() {
                if e.file_name().to_string_lossy().starts_with(&prefix) {
                    let _ = fs::remove_dir_all(e.path());
                }
            }
        }
    }

    fn stage(&self, staging: &Path, s: &Snapshot, interrupt_after: Option<usize>) -> Result<Meta> {
        let mut files: Vec<(&str, Vec<u8>)> = vec![
            (CONFIG, s.config.to_toml().into_bytes()),
            (PAGES, jsonl(&s.store.pages)),
            (CHUNKS, jsonl(&s.store.chunks)),
            (IMAGES, jsonl(&s.store.images)),
            (TEXT_BLOB, f32_blob(s.store.text_embeddings.iter())),
            (VISUAL_BLOB, f32_blob(s.store.visual_embeddings.iter())),
            (FUSED_BLOB, f32_blob(s.fused.iter().map(|f| &f.vector))),
            (PROJECTION, projection_bytes(&s.projection)),
        ];
        if let Some(tree) = &s.tree {
            let (table, blob) = tree.canonical_bytes();
            files.push((TREE_TABLE, table));
            files.push((TREE_BLOB, blob));
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            chunks: s.store.chunks.len(),
            images: s.store.images.len(),
            text_dim: TEXT_DIM,
            visual_dim: VISUAL_DIM,
            built: s.tree.is_some(),
            degenerate_levels: s.tree.as_ref().map(|t| t.degenerate_levels.clone()).unwrap_or_default(),
            files: files.iter().map(|(n, b)| (n.to_string(), sha256_hex(b))).collect(),
        };

        let controller = match fs::read(self.path.join(CONTROLLER)) {
            Ok(bytes) => bytes,
            Err(_) => state_toml(&s.config.fresh_state()).into_bytes(),
        };
        let traces = fs::read(self.path.join(TRACES)).unwrap_or_default();
        files.push((CONTROLLER, controller));
        files.push((TRACES, traces));
        let meta_bytes = serde_json::to_vec_pretty(&meta)?;
        files.push((META, meta_bytes));

        for (i, (name, bytes)) in files.iter().enumerate() {
            if interrupt_after == Some(i) {
                return Err(Error::Index(format!("commit interrupted before writing {name}")));
            }
            write_file(staging, name, bytes)?;
        }
        if interrupt_after == Some(files.len()) {
            return Err(Error::Index("commit interrupted before the final rename".into()));
        }
        Ok(meta)
    }

    fn swap_in(&self, staging: &Path) -> Result<()> {
        if self.path.exists() {
            let old = sibling(&self.path, ".", &format!(".old-{}", unique_suffix()));
            fs::rename(&self.path, &old).map_err(|e| Error::io(&self.path, e))?;
            fs::rename(staging, &self.path).map_err(|e| Error::io(&self.path, e))?;
            let _ = fs::remove_dir_all(&old);
        } else {
            fs::rename(staging, &self.path).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn meta(&self) -> Result<Meta> {
        let path = self.path.join(META);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Index(format!("{} is not an index directory (no {META})", self.path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_slice(&bytes).map_err(|e| Error::Index(format!("{META}: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: v.format_version,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| Error::Index(format!("{META}: {e}")))
    }

    /// Digest over every immutable file's digest.
    pub fn digest(&self) -> Result<String> {
        let meta = self.meta()?;
        Ok(sha256_hex(serde_json::to_string(&meta.files)?.as_bytes()))
    }

    fn read_verified(&self, meta: &Meta, name: &str) -> Result<Vec<u8>> {
        let path = self.path.join(name);
        let want = meta
            .files
            .get(name)
            .ok_or_else(|| Error::Index(format!("{META} does not list {name}")))?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(Error::Index(format!("{name} is corrupt (digest {got}, expected {want})")));
        }
        Ok(bytes)
    }

    /// Loads and cross-checks every immutable file.
    pub fn open(&self) -> Result<Snapshot> {
        let meta = self.meta()?;
        let read = |name: &str| self.read_verified(&meta, name);

        let config = Config::from_toml(
            std::str::from_utf8(&read(CONFIG)?).map_err(|e| Error::Index(format!("{CONFIG}: {e}")))?,
        )?;
        let pages: Vec<PageRecord> = parse_jsonl(&read(PAGES)?, PAGES)?;
        let chunks: Vec<TextChunk> = parse_jsonl(&read(CHUNKS)?, CHUNKS)?;
        let images: Vec<ImageAsset> = parse_jsonl(&read(IMAGES)?, IMAGES)?;
        if chunks.len() != meta.chunks || images.len() != meta.images {
            return Err(Error::Index("record counts disagree with meta.json".into()));
        }
        let store = Store {
            pages,
            text_embeddings: parse_f32_rows(&read(TEXT_BLOB)?, chunks.len(), meta.text_dim, TEXT_BLOB)?,
            visual_embeddings: parse_f32_rows(&read(VISUAL_BLOB)?, images.len(), meta.visual_dim, VISUAL_BLOB)?,
            chunks,
            images,
        };
        store.validate()?;

        let projection = parse_projection(&read(PROJECTION)?)?;
        if projection.seed() != config.seed || projection.rows() != TEXT_DIM || projection.cols() != VISUAL_DIM {
            return Err(Error::Index("projection does not match the configured seed and dimensions".into()));
        }
        let fused_rows = parse_f32_rows(&read(FUSED_BLOB)?, store.chunks.len(), TEXT_DIM, FUSED_BLOB)?;
        let fused = fuse_chunks(&store, &project_all(&store, &projection)?, &config)?;
        if fused.iter().map(|f| &f.vector).ne(fused_rows.iter()) {
            return Err(Error::Index("fused embeddings do not match text, visual and projection".into()));
        }

        let tree = if meta.built {
            let records: Vec<NodeRecord> = parse_jsonl(&read(TREE_TABLE)?, TREE_TABLE)?;
            let blob = read(TREE_BLOB)?;
            let mut offset = 0;
            let mut nodes = Vec::with_capacity(records.len());
            for r in records {
                let len = r.dim * 4;
                let slice = blob
                    .get(offset..offset + len)
                    .ok_or_else(|| Error::Index(format!("{TREE_BLOB} is shorter than the node table")))?;
                offset += len;
                let v = parse_f32_rows(slice, 1, r.dim, TREE_BLOB)?.pop().unwrap_or_default();
                nodes.push(r.into_node(v));
            }
            if offset != blob.len() {
                return Err(Error::Index(format!("{TREE_BLOB} has trailing bytes")));
            }
            let tree = Tree::from_nodes(nodes, meta.degenerate_levels.clone())?;
            let leaves: HashSet<&str> = tree.leaves().map(|n| n.node_id.as_str()).collect();
            for (c, f) in store.chunks.iter().zip(&fused) {
                let leaf = tree
                    .node(&c.chunk_id)
                    .filter(|n| n.is_leaf())
                    .ok_or_else(|| Error::Index(format!("chunk {} has no leaf node", c.chunk_id)))?;
                if leaf.embedding != *f {
                    return Err(Error::Index(format!("leaf {} embedding differs from the store", c.chunk_id)));
                }
            }
            if leaves.len() != store.chunks.len() {
                return Err(Error::Index("tree has leaves without chunks".into()));
            }
            Some(tree)
        } else {
            None
        };

        Ok(Snapshot {
            config,
            store,
            projection,
            fused,
            tree,
        })
    }

    pub fn load_state(&self) -> Result<StrategyState> {
        let path = self.path.join(CONTROLLER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: StrategyState = toml::from_str(&text).map_err(|e| Error::Index(format!("{CONTROLLER}: {e}")))?;
        state.validate()?;
        Ok(state)
    }

    pub fn save_state(&self, state: &StrategyState) -> Result<()> {
        replace_file(&self.path, CONTROLLER, state_toml(state).as_bytes())
    }

    /// Appends one trace line. Lines are short single writes to an
    /// append-mode file, so concurrent readers never see a partial record.
    pub fn append_trace(&self, record: &TraceRecord) -> Result<()> {
        let path = self.path.join(TRACES);
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&path, e))
    }

    pub fn traces(&self) -> Result<Vec<TraceRecord>> {
        let path = self.path.join(TRACES);
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Index(format!("{TRACES} line {}: {e}", i + 1)))?);
        }
        Ok(out)
    }

    /// Most recent trace with this id.
    pub fn find_trace(&self, query_id: &str) -> Result<TraceRecord> {
        self.traces()?
            .into_iter()
            .rev()
            .find(|t| t.query_id == query_id)
            .ok_or_else(|| Error::invalid(format!("unknown query id `{query_id}`")))
    }

    /// Applies the EMA update to the band and strategy recorded for the query.
    pub fn feedback(&self, query_id: &str, reward: f64) -> Result<FeedbackOutcome> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::invalid(format!("reward {reward} outside [0, 1]")));
        }
        let _lock = WriterLock::acquire(&self.path)?;
        let trace = self.find_trace(query_id)?;
        let mut state = self.load_state()?;
        let (band, strategy) = (trace.routing.band, trace.routing.strategy);
        let before = state.score(band, strategy);
        let after = state.update(band, strategy, reward)?;
        self.save_state(&state)?;
        Ok(FeedbackOutcome {
            band,
            strategy,
            reward,
            before,
            after,
        })
    }
}

fn state_toml(state: &StrategyState) -> String {
    toml::to_string(state).expect("controller state is representable as TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::build_projection_with_dims;

    #[test]
    fn projection_round_trip() {
        let p = build_projection_with_dims::<Real>(6, 4, 9);
        assert_eq!(parse_projection(&projection_bytes(&p)).unwrap(), p);
        assert!(parse_projection(b"MMPJ").is_err());
    }

    #[test]
    fn blob_shapes_are_checked() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = f32_blob(rows.iter());
        assert_eq!(parse_f32_rows(&b, 2, 2, "x").unwrap(), rows);
        assert!(parse_f32_rows(&b, 3, 2, "x").is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let idx = dir.path().join("idx");
        let held = WriterLock::acquire(&idx).unwrap();
        assert!(WriterLock::acquire(&idx).is_err());
        drop(held);
        assert!(WriterLock::acquire(&idx).is_ok());
    }
}
