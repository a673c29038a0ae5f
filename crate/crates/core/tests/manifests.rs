//! The committed manifests are generated from `corpus`; regenerate with
//! `DOOLY_BLESS=1 cargo test -p dooly-core --test manifests`.

use std::fs;
use std::path::PathBuf;

use dooly_core::corpus::{corpus_manifest, coverage_fixtures, fixtures_manifest, serving_manifest};
use dooly_core::modelir::{load_manifest, CorpusManifest};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../manifests")
}

fn committed() -> Vec<(&'static str, CorpusManifest)> {
    let fixtures = coverage_fixtures();
    let tp1 = fixtures.iter().filter(|f| f.1 == 1).map(|f| f.0.clone()).collect();
    let tp4 = fixtures.iter().filter(|f| f.1 == 4).map(|f| f.0.clone()).collect();
    vec![
        ("corpus.json", corpus_manifest()),
        ("serving.json", serving_manifest()),
        ("fixtures_tp1.json", fixtures_manifest(1, tp1)),
        ("fixtures_tp4.json", fixtures_manifest(4, tp4)),
    ]
}

#[test]
fn committed_manifests_are_current() {
    let bless = std::env::var_os("DOOLY_BLESS").is_some();
    for (name, m) in committed() {
        let path = dir().join(name);
        let text = m.to_json();
        if bless {
            fs::write(&path, &text).unwrap();
        }
        let on_disk = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(on_disk, text, "{name} is stale");
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.to_json(), on_disk);
    }
}
