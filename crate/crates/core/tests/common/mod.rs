#![allow(dead_code)]

use gater::corpus::{Document, Vocabulary};
use gater::retrieval::TfIdfIndex;
use gater::runtime::{prepare_examples, Example, ReferenceSource};
use gater::Config;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Small but non-degenerate model dimensions.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.emb_dim = 6;
    cfg.model.hidden_dim = 8;
    cfg.model.edge_dim = 4;
    cfg.model.attn_heads = 3;
    cfg.data.edge_buckets = 4;
    cfg.data.num_keywords = 6;
    cfg
}

/// Vocabulary, index and examples for `docs` indexed against themselves.
pub fn examples(docs: &[Document], cfg: &Config) -> (Vocabulary, TfIdfIndex, Vec<Example>) {
    let vocab = Vocabulary::build(docs, cfg.data.vocab_cap).unwrap();
    let index = TfIdfIndex::build(docs).unwrap();
    let ex = {
        let src = ReferenceSource::new(&index, docs, cfg).unwrap();
        prepare_examples(docs, &src, &vocab, cfg.data.exclude_self).unwrap()
    };
    (vocab, index, ex)
}
