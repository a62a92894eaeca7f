//! Index directories: round trips, atomic replacement, and corruption checks.

use std::fs;
use std::path::Path;

use mmtree_core::config::Config;
use mmtree_core::corpus::load_manifest;
use mmtree_core::error::Error;
use mmtree_core::index::{CommitOptions, IndexDirectory, Snapshot, TraceRecord};
use mmtree_core::pipeline::{ingest, Index, QueryRequest};
use mmtree_core::synth::{generate, SynthSpec};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        docs: 6,
        pages_per_doc: 3,
        topics: 3,
        ..SynthSpec::default()
    }
    .with_query_total(12)
}

fn built_index(work: &Path, seed: u64) -> Index {
    let synth = generate(&small_spec(seed)).unwrap();
    let manifest = synth.write_to(&work.join(format!("corpus-{seed}"))).unwrap();
    let corpus = load_manifest(&manifest).unwrap();
    let config = Config::default();
    let providers = config.provider_set().unwrap();
    let store = ingest(&corpus, &providers, &config).unwrap();
    Index::build(store, config, &providers).unwrap()
}

fn force() -> CommitOptions {
    CommitOptions {
        force: true,
        ..Default::default()
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let work = tempfile::tempdir().unwrap();
    let index = built_index(work.path(), 3);
    let dir = IndexDirectory::new(work.path().join("idx"));
    let snapshot = Snapshot::from_index(index.clone());
    dir.commit(&snapshot, CommitOptions::default()).unwrap();

    let loaded = dir.open().unwrap();
    assert_eq!(loaded, snapshot);
    let reopened = loaded.into_index().unwrap();
    assert_eq!(reopened.tree.digest(), index.tree.digest());
    for (a, b) in reopened.tree.nodes().iter().zip(index.tree.nodes()) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.embedding.vector), bits(&b.embedding.vector));
    }

    let providers = index.config.provider_set().unwrap();
    let state = dir.load_state().unwrap();
    let q = QueryRequest::new("how to reach the exit steps");
    let before = index.query(&providers, &state, &q, None).unwrap();
    let after = reopened.query(&providers, &state, &q, None).unwrap();
    assert_eq!(before.result.without_timing(), after.result.without_timing());
    assert_eq!(before.query_id, after.query_id);
}

#[test]
fn ingest_only_snapshot_round_trips_without_a_tree() {
    let work = tempfile::tempdir().unwrap();
    let index = built_index(work.path(), 4);
    let snapshot = Snapshot::ingested(index.store.clone(), index.config.clone()).unwrap();
    let dir = IndexDirectory::new(work.path().join("idx"));
    let meta = dir.commit(&snapshot, CommitOptions::default()).unwrap();
    assert!(!meta.built);
    let loaded = dir.open().unwrap();
    assert!(loaded.tree.is_none());
    assert_eq!(loaded.fused, index.fused);
    assert!(matches!(loaded.into_index(), Err(Error::Index(_))));
}

#[test]
fn digests_are_deterministic() {
    let work = tempfile::tempdir().unwrap();
    let a = IndexDirectory::new(work.path().join("a"));
    let b = IndexDirectory::new(work.path().join("b"));
    a.commit(&Snapshot::from_index(built_index(work.path(), 5)), CommitOptions::default())
        .unwrap();
    b.commit(&Snapshot::from_index(built_index(work.path(), 5)), CommitOptions::default())
        .unwrap();
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    for name in ["tree.jsonl", "tree.f32", "fused.f32", "chunks.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }

    let c = IndexDirectory::new(work.path().join("c"));
    c.commit(&Snapshot::from_index(built_index(work.path(), 6)), CommitOptions::default())
        .unwrap();
    assert_ne!(a.digest().unwrap(), c.digest().unwrap());
}

#[test]
fn existing_index_needs_force() {
    let work = tempfile::tempdir().unwrap();
    let snapshot = Snapshot::from_index(built_index(work.path(), 7));
    let dir = IndexDirectory::new(work.path().join("idx"));
    dir.commit(&snapshot, CommitOptions::default()).unwrap();
    let digest = dir.digest().unwrap();
    let err = dir.commit(&snapshot, CommitOptions::default()).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    assert_eq!(dir.digest().unwrap(), digest);
    dir.commit(&snapshot, force()).unwrap();
    assert_eq!(dir.digest().unwrap(), digest);
}

#[test]
fn interrupted_commit_leaves_old_index_or_none() {
    let work = tempfile::tempdir().unwrap();
    let first = Snapshot::from_index(built_index(work.path(), 8));
    let second = Snapshot::from_index(built_index(work.path(), 9));

    // Fresh directory: every interruption point leaves nothing behind at the
    // target path.
    for step in 0..=15 {
        let dir = IndexDirectory::new(work.path().join(format!("fresh-{step}")));
        let opts = CommitOptions {
            force: false,
            interrupt_after: Some(step),
        };
        if dir.commit(&first, opts).is_err() {
            assert!(!dir.path().exists(), "step {step}");
            assert!(dir.open().is_err());
        } else {
            assert!(dir.open().is_ok());
        }
    }

    // Existing index: it stays intact and readable after every interruption.
    let dir = IndexDirectory::new(work.path().join("live"));
    dir.commit(&first, CommitOptions::default()).unwrap();
    let digest = dir.digest().unwrap();
    let mut interrupted = 0;
    for step in 0..=15 {
        let opts = CommitOptions {
            force: true,
            interrupt_after: Some(step),
        };
        if dir.commit(&second, opts).is_err() {
            interrupted += 1;
            assert_eq!(dir.digest().unwrap(), digest, "step {step}");
            assert_eq!(dir.open().unwrap(), first);
        }
    }
    assert!(interrupted >= 10);

    // The next real commit clears staging leftovers and lands.
    dir.commit(&second, force()).unwrap();
    assert_eq!(dir.open().unwrap(), second);
    let leftovers = fs::read_dir(work.path())
        .unwrap()
        .flatten()
        .filter(|e| e.file_name().to_string_lossy().starts_with(".live."))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn controller_state_and_traces_survive_rebuild() {
    let work = tempfile::tempdir().unwrap();
    let index = built_index(work.path(), 10);
    let dir = IndexDirectory::new(work.path().join("idx"));
    dir.commit(&Snapshot::from_index(index.clone()), CommitOptions::default())
        .unwrap();

    let providers = index.config.provider_set().unwrap();
    let state = dir.load_state().unwrap();
    let request = QueryRequest::new("what is the valve");
    let out = index.query(&providers, &state, &request, None).unwrap();
    dir.append_trace(&TraceRecord::new(&out, &request, index.config.top_k, &state))
        .unwrap();
    let fb = dir.feedback(&out.query_id, 1.0).unwrap();
    assert!((fb.after - (0.9 * fb.before + 0.1)).abs() < 1e-12);

    dir.commit(&Snapshot::from_index(index), force()).unwrap();
    let state = dir.load_state().unwrap();
    assert_eq!(state.score(fb.band, fb.strategy), fb.after);
    assert_eq!(dir.traces().unwrap().len(), 1);
    assert!(dir.feedback(&out.query_id, 1.5).is_err());
    assert!(dir.feedback("q-missing", 0.5).is_err());
}

#[test]
fn version_mismatch_is_reported() {
    let work = tempfile::tempdir().unwrap();
    let dir = IndexDirectory::new(work.path().join("idx"));
    dir.commit(&Snapshot::from_index(built_index(work.path(), 11)), CommitOptions::default())
        .unwrap();
    let meta_path = dir.path().join("meta.json");
    let text = fs::read_to_string(&meta_path).unwrap();
    fs::write(&meta_path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    match dir.open() {
        Err(Error::Version { found: 99, expected: 1 }) => {}
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn corruption_is_detected() {
    let work = tempfile::tempdir().unwrap();
    let snapshot = Snapshot::from_index(built_index(work.path(), 12));
    for name in ["tree.f32", "fused.f32", "chunks.jsonl", "projection.bin", "config.toml"] {
        let dir = IndexDirectory::new(work.path().join(format!("idx-{name}")));
        dir.commit(&snapshot, CommitOptions::default()).unwrap();
        let path = dir.path().join(name);
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = dir.open().unwrap_err();
        assert!(err.to_string().contains("corrupt"), "{name}: {err}");
    }
}

#[test]
fn missing_directory_is_not_an_index() {
    let work = tempfile::tempdir().unwrap();
    let err = IndexDirectory::new(work.path().join("nope")).open().unwrap_err();
    assert!(err.to_string().contains("not an index directory"), "{err}");
}
