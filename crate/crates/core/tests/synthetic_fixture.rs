use std::path::PathBuf;

use gater::corpus::{read_corpus, write_corpus};
use gater::synthetic::SyntheticCorpus;

fn bundled() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_30.jsonl")
}

/// Regenerate with `GATER_BLESS=1 cargo test -p gater --test synthetic_fixture`.
#[test]
fn bundled_corpus_matches_generator() {
    let docs = SyntheticCorpus::default().generate().unwrap();
    if std::env::var_os("GATER_BLESS").is_some() {
        write_corpus(bundled(), &docs).unwrap();
    }
    assert_eq!(read_corpus(bundled()).unwrap(), docs);
}
