//! Replays the checked-in fuzz corpus through the same entry points the
//! fuzz targets exercise.

use std::path::PathBuf;

use orient_attn::config::{echo_json, parse_config_str};
use orient_attn::model::Model;
use orient_attn::snapshot::Snapshot;
use orient_attn::synth::parse_manifest;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

#[test]
fn snapshot_corpus() {
    for (name, bytes) in corpus("snapshot_decode") {
        let decoded = Snapshot::decode(&bytes);
        let expect_ok = name.starts_with("checkpoint") || name == "two_tensors" || name == "empty";
        assert_eq!(decoded.is_ok(), expect_ok, "{name}: {decoded:?}");
        if let Ok(snap) = decoded {
            assert_eq!(snap.encode(), bytes, "{name}");
            let model = Model::from_snapshot(&snap);
            assert_eq!(model.is_ok(), name.starts_with("checkpoint"), "{name}");
        }
    }
}

#[test]
fn config_corpus() {
    for (name, bytes) in corpus("config_parse") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let mut parts = text.split('\0');
        let json = parts.next().unwrap();
        let overrides: Vec<String> = parts.map(str::to_string).collect();
        let parsed = parse_config_str(json, &overrides, None);
        let expect_ok =
            ["defaults_echo", "empty_object", "nested", "with_overrides"].contains(&name.as_str());
        assert_eq!(parsed.is_ok(), expect_ok, "{name}: {parsed:?}");
        if let Ok(c) = parsed {
            assert_eq!(
                parse_config_str(&echo_json(&c).unwrap(), &[], None).unwrap(),
                c
            );
        }
    }
}

#[test]
fn manifest_corpus() {
    for (name, bytes) in corpus("manifest_parse") {
        let parsed = std::str::from_utf8(&bytes).map(parse_manifest);
        let ok = matches!(parsed, Ok(Ok(_)));
        assert_eq!(ok, name == "valid", "{name}");
    }
}

/// Applies `(position, byte)` overwrites and an optional truncation.
fn mutate(seed: &[u8], edits: &[(usize, u8)], cut: Option<usize>) -> Vec<u8> {
    let mut out = seed.to_vec();
    if out.is_empty() {
        return edits.iter().map(|&(_, b)| b).collect();
    }
    for &(pos, b) in edits {
        let i = pos % out.len();
        out[i] = b;
    }
    if let Some(c) = cut {
        out.truncate(c % (out.len() + 1));
    }
    out
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(300))]

    #[test]
    fn mutated_inputs_never_panic(
        pick in 0usize..64,
        edits in proptest::collection::vec((0usize..8192, proptest::prelude::any::<u8>()), 0..6),
        cut in proptest::option::of(0usize..8192),
    ) {
        let snaps = corpus("snapshot_decode");
        let (_, seed) = &snaps[pick % snaps.len()];
        if let Ok(snap) = Snapshot::decode(&mutate(seed, &edits, cut)) {
            let _ = Model::from_snapshot(&snap);
        }
        let configs = corpus("config_parse");
        let (_, seed) = &configs[pick % configs.len()];
        if let Ok(text) = String::from_utf8(mutate(seed, &edits, cut)) {
            let mut parts = text.split('\0');
            let json = parts.next().unwrap_or("");
            let overrides: Vec<String> = parts.map(str::to_string).collect();
            let _ = parse_config_str(json, &overrides, None);
        }
        let manifests = corpus("manifest_parse");
        let (_, seed) = &manifests[pick % manifests.len()];
        if let Ok(text) = String::from_utf8(mutate(seed, &edits, cut)) {
            let _ = parse_manifest(&text);
        }
    }
}
