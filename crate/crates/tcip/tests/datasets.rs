//! Synthetic dataset directories and their manifest.

use std::fs;
use std::path::Path;

use tcip::dataset::{self, MANIFEST};
use tcip_core::synth::SynthSpec;

fn manifest_schema() -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/manifest.schema.json");
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::JSONSchema::compile(&value).unwrap()
}

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        grid_size: 16,
        num_blobs: 5,
        seed,
        ..SynthSpec::default()
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn two_pairs_are_listed_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = dataset::write_synthetic(a.path(), &small(7), 2).unwrap();
    dataset::write_synthetic(b.path(), &small(7), 2).unwrap();
    assert_eq!(m.pairs.len(), 2);
    assert_eq!(m.pairs[0].id, "pair_000");
    assert_eq!((m.pairs[0].seed, m.pairs[1].seed), (7, 8));
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 1 + 2 * 10);
    assert_eq!(sa, sb);

    let loaded = dataset::load_dataset(a.path()).unwrap();
    let generated = dataset::generate(&small(7), 2).unwrap();
    assert_eq!(loaded[1].fixed, generated[1].fixed);
    assert_eq!(loaded[1].moving_labels, generated[1].moving_labels);
}

#[test]
fn zero_pairs_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::write_synthetic(dir.path(), &small(0), 0).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(dataset::read_manifest(dir.path()).unwrap(), m);
    assert!(dataset::load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn manifest_matches_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    dataset::write_synthetic(dir.path(), &small(3), 2).unwrap();
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
    let schema = manifest_schema();
    assert!(schema.is_valid(&value));
    let mut bad = value.clone();
    bad["pairs"][0]["extra"] = 1.into();
    assert!(!schema.is_valid(&bad));
}

#[test]
fn unwritable_target_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    assert!(dataset::write_synthetic(&file.join("sub"), &small(0), 1).is_err());
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { grid_size: 20, ..small(0) };
    assert!(dataset::write_synthetic(dir.path(), &spec, 1).is_err());
}
