//! Heterogeneous keyword–document graph over a source and its references.
//!
//! Document slot 0 is the source, slots `1..=K` are the references. Keyword
//! nodes connect to every document whose top-k keyword list contains them
//! (w2d edges); the source connects to every reference (d2d edges, a star).
//! Edge weights are bucketized into integer ids for embedding lookup.

use std::collections::HashMap;
use std::fmt::Write;

use crate::corpus::{is_special, Document};
use crate::error::{Error, Result};
use crate::retrieval::{Reference, TfIdfIndex};

/// Maps weights in `[0, 1]` (or beyond) to bucket ids `0..B`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBucketer {
    boundaries: Vec<f64>,
}

impl EdgeBucketer {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "bucket boundaries must be strictly increasing".into(),
            ));
        }
        Ok(EdgeBucketer { boundaries })
    }

    /// `B` equal-width buckets on `[0, 1]`.
    pub fn uniform(buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("bucket count must be at least 1".into()));
        }
        EdgeBucketer::new((1..buckets).map(|i| i as f64 / buckets as f64).collect())
    }

    pub fn bucket_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn bucketize(&self, weight: f64) -> usize {
        bucketize(weight, self)
    }
}

/// Index of the first boundary exceeding `weight`; `B - 1` past the last.
pub fn bucketize(weight: f64, bucketer: &EdgeBucketer) -> usize {
    bucketer
        .boundaries
        .iter()
        .position(|&b| b > weight)
        .unwrap_or(bucketer.boundaries.len())
}

fn is_keyword_candidate(token: &str) -> bool {
    !is_special(token) && token.chars().any(char::is_alphanumeric)
}

/// Top-`k` unique unigrams by `tf * idf`, descending, ties lexicographic,
/// with weights rescaled so the largest is 1. Special tokens and pure
/// punctuation are not candidates.
pub fn extract_keywords(tokens: &[String], index: &TfIdfIndex, k: usize) -> Vec<(String, f64)> {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in tokens.iter().filter(|t| is_keyword_candidate(t)) {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut scored: Vec<(&str, f64)> = tf
        .into_iter()
        .map(|(t, c)| (t, c as f64 * index.idf(t)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    scored.truncate(k);
    let max = scored.first().map_or(1.0, |s| s.1);
    scored
        .into_iter()
        .map(|(t, w)| (t.to_string(), w / max))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct W2dEdge {
    pub keyword: usize,
    pub doc: usize,
    pub weight: f64,
    pub bucket: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct D2dEdge {
    /// Reference slot, `1..=K`.
    pub reference: usize,
    pub weight: f64,
    pub bucket: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub keywords: Vec<String>,
    pub doc_ids: Vec<String>,
    pub w2d: Vec<W2dEdge>,
    pub d2d: Vec<D2dEdge>,
}

impl HeteroGraph {
    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn num_keywords(&self) -> usize {
        self.keywords.len()
    }

    /// Plain-text adjacency listing.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, id) in self.doc_ids.iter().enumerate() {
            let kind = if i == 0 { "source" } else { "reference" };
            writeln!(s, "doc {i} {kind} {id}").unwrap();
        }
        for (i, k) in self.keywords.iter().enumerate() {
            writeln!(s, "word {i} {k}").unwrap();
        }
        for e in &self.w2d {
            writeln!(
                s,
                "w2d word {} ({}) -- doc {} weight {:.6} bucket {}",
                e.keyword, self.keywords[e.keyword], e.doc, e.weight, e.bucket
            )
            .unwrap();
        }
        for e in &self.d2d {
            writeln!(
                s,
                "d2d doc 0 -- doc {} weight {:.6} bucket {}",
                e.reference, e.weight, e.bucket
            )
            .unwrap();
        }
        s
    }
}

/// Builds the graph for `source` and its references. Keywords are the union
/// of per-document top-`k` sets in first-seen order (source first).
pub fn build_graph(
    source: &Document,
    refs: &[Reference],
    index: &TfIdfIndex,
    k: usize,
    bucketer: &EdgeBucketer,
) -> HeteroGraph {
    let docs: Vec<&[String]> = std::iter::once(source.source_tokens.as_slice())
        .chain(refs.iter().map(|r| r.tokens.as_slice()))
        .collect();
    let mut keywords: Vec<String> = Vec::new();
    let mut keyword_ids: HashMap<String, usize> = HashMap::new();
    let mut w2d = Vec::new();
    for (j, tokens) in docs.iter().enumerate() {
        for (token, weight) in extract_keywords(tokens, index, k) {
            let next = keywords.len();
            let id = *keyword_ids.entry(token.clone()).or_insert(next);
            if id == next {
                keywords.push(token);
            }
            w2d.push(W2dEdge {
                keyword: id,
                doc: j,
                weight,
                bucket: bucketer.bucketize(weight),
            });
        }
    }
    let d2d = refs
        .iter()
        .enumerate()
        .map(|(i, r)| D2dEdge {
            reference: i + 1,
            weight: r.similarity,
            bucket: bucketer.bucketize(r.similarity),
        })
        .collect();
    HeteroGraph {
        keywords,
        doc_ids: std::iter::once(source.id.clone())
            .chain(refs.iter().map(|r| r.doc_id.clone()))
            .collect(),
        w2d,
        d2d,
    }
}

/// Fraction of gold keyphrase tokens that are among the source's top-`k`
/// keywords.
pub fn keyword_token_coverage(doc: &Document, index: &TfIdfIndex, k: usize) -> Option<f64> {
    let kws: std::collections::HashSet<String> = extract_keywords(&doc.source_tokens, index, k)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    let tokens: Vec<&String> = doc.keyphrases.iter().flatten().collect();
    if tokens.is_empty() {
        return None;
    }
    Some(tokens.iter().filter(|t| kws.contains(t.as_str())).count() as f64 / tokens.len() as f64)
}
