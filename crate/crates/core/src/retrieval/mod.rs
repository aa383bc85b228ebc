//! Reference retrieval over a TF-IDF uni/bi-gram index.
//!
//! A reference is a retrieved training document followed by its gold
//! keyphrases, each keyphrase introduced by the separator token.

mod index;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::fnv1a;
use crate::corpus::{find_subsequence, split_present_absent, Document, SEP};
use crate::error::{Error, Result};
use crate::evaluation::stem_tokens;

pub use index::{grams, SparseVector, TfIdfIndex, INDEX_VERSION};

/// A ranked retrieval result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub similarity: f64,
}

/// Retrieved document tokens plus its keyphrases, ready for encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub similarity: f64,
}

/// Which parts of a retrieved document go into its reference text.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceOptions {
    pub include_document: bool,
    pub include_keyphrases: bool,
    pub max_tokens: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            include_document: true,
            include_keyphrases: true,
            max_tokens: 200,
        }
    }
}

/// Pluggable retrieval strategy.
pub trait Retriever {
    fn retrieve(&self, query: &Document, k: usize, exclude_self: bool) -> Result<Vec<Hit>>;
}

/// Top-`k` documents by cosine similarity, descending, ties by doc id.
pub fn retrieve(
    query: &Document,
    index: &TfIdfIndex,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::Retrieval("index is empty".into()));
    }
    let sims = index.similarities(&index.vectorize(&query.source_tokens));
    let skip = if exclude_self {
        index.doc_position(&query.id)
    } else {
        None
    };
    let mut ranked: Vec<usize> = (0..index.len()).filter(|&i| Some(i) != skip).collect();
    let ids = index.doc_ids();
    ranked.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap()
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|i| Hit {
            doc_id: ids[i].clone(),
            similarity: sims[i],
        })
        .collect())
}

/// `k` documents drawn uniformly without replacement; similarity is 0.
pub fn random_retrieve(
    query: &Document,
    index: &TfIdfIndex,
    k: usize,
    seed: u64,
    exclude_self: bool,
) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::Retrieval("index is empty".into()));
    }
    let skip = if exclude_self {
        index.doc_position(&query.id)
    } else {
        None
    };
    let pool: Vec<usize> = (0..index.len()).filter(|&i| Some(i) != skip).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), k.min(pool.len()));
    Ok(picks
        .into_iter()
        .map(|p| Hit {
            doc_id: index.doc_ids()[pool[p]].clone(),
            similarity: 0.0,
        })
        .collect())
}

pub struct TfIdfRetriever<'a> {
    pub index: &'a TfIdfIndex,
}

impl Retriever for TfIdfRetriever<'_> {
    fn retrieve(&self, query: &Document, k: usize, exclude_self: bool) -> Result<Vec<Hit>> {
        retrieve(query, self.index, k, exclude_self)
    }
}

/// Random baseline. Each query draws with its own seed derived from the
/// base seed and the query id, so results do not depend on query order.
pub struct RandomRetriever<'a> {
    pub index: &'a TfIdfIndex,
    pub seed: u64,
}

impl Retriever for RandomRetriever<'_> {
    fn retrieve(&self, query: &Document, k: usize, exclude_self: bool) -> Result<Vec<Hit>> {
        let seed = self.seed ^ fnv1a(query.id.as_bytes());
        random_retrieve(query, self.index, k, seed, exclude_self)
    }
}

/// Reference tokens for one retrieved document: its source tokens and each
/// keyphrase, separated by [`SEP`], truncated to `opts.max_tokens`.
pub fn reference_tokens(doc: &Document, opts: &ReferenceOptions) -> Vec<String> {
    let mut parts: Vec<&[String]> = Vec::new();
    if opts.include_document {
        parts.push(&doc.source_tokens);
    }
    if opts.include_keyphrases {
        parts.extend(doc.keyphrases.iter().map(Vec::as_slice));
    }
    let mut tokens = Vec::new();
    for (i, p) in parts.into_iter().enumerate() {
        if i > 0 {
            tokens.push(SEP.to_string());
        }
        tokens.extend_from_slice(p);
    }
    tokens.truncate(opts.max_tokens);
    tokens
}

/// Turns hits into references using the indexed corpus. Hits whose document
/// is unknown, or whose reference text would be empty, are skipped.
pub fn materialize(
    hits: &[Hit],
    corpus: &HashMap<&str, &Document>,
    opts: &ReferenceOptions,
) -> Vec<Reference> {
    hits.iter()
        .filter_map(|h| {
            let doc = corpus.get(h.doc_id.as_str())?;
            let tokens = reference_tokens(doc, opts);
            (!tokens.is_empty()).then(|| Reference {
                doc_id: h.doc_id.clone(),
                tokens,
                similarity: h.similarity,
            })
        })
        .collect()
}

pub fn corpus_lookup(docs: &[Document]) -> HashMap<&str, &Document> {
    docs.iter().map(|d| (d.id.as_str(), d)).collect()
}

/// Fraction of gold absent keyphrases (stemmed) that occur contiguously in
/// the concatenated stemmed tokens of each document's references. Zero when
/// there are no absent keyphrases.
pub fn transforming_rate(docs: &[Document], refs_per_doc: &[Vec<Reference>]) -> f64 {
    let (mut found, mut total) = (0usize, 0usize);
    for (doc, refs) in docs.iter().zip(refs_per_doc) {
        let absent = split_present_absent(doc).absent;
        if absent.is_empty() {
            continue;
        }
        let joined: Vec<String> = refs.iter().flat_map(|r| r.tokens.iter().cloned()).collect();
        let stems = stem_tokens(&joined);
        for a in &absent {
            total += 1;
            if find_subsequence(&stems, &stem_tokens(a)).is_some() {
                found += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        found as f64 / total as f64
    }
}

/// One line of a retrieval output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: String,
    pub refs: Vec<Hit>,
}

pub fn write_retrievals(path: impl AsRef<Path>, records: &[RetrievalRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_retrievals(path: impl AsRef<Path>) -> Result<Vec<RetrievalRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn doc(id: &str, source: &str, kps: &[&str]) -> Document {
        Document::new(id, vec![], toks(source), kps.iter().map(|k| toks(k)).collect()).unwrap()
    }

    #[test]
    fn single_doc_vector_has_unit_norm() {
        let idx = TfIdfIndex::build(&[doc("a", "x y x z", &[])]).unwrap();
        assert!((idx.doc_vector(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idf_of_ubiquitous_gram_is_one() {
        let docs = [doc("a", "x p", &[]), doc("b", "x q", &[]), doc("c", "x r", &[])];
        let idx = TfIdfIndex::build(&docs).unwrap();
        assert_eq!(idx.idf("x"), 1.0);
    }

    #[test]
    fn three_doc_vectors_by_hand() {
        // doc a: grams x, y, "x y" ; doc b: x, z, "x z" ; doc c: y
        let docs = [doc("a", "x y", &[]), doc("b", "x z", &[]), doc("c", "y", &[])];
        let idx = TfIdfIndex::build(&docs).unwrap();
        let idf1 = (4.0f64 / 2.0).ln() + 1.0; // df = 1
        let idf2 = (4.0f64 / 3.0).ln() + 1.0; // df = 2
        // grams sorted: x, "x y", "x z", y, z
        assert_eq!(idx.grams(), &["x", "x y", "x z", "y", "z"]);
        let na = (idf2 * idf2 + idf1 * idf1 + idf2 * idf2).sqrt();
        let expected_a = [(0, idf2 / na), (1, idf1 / na), (3, idf2 / na)];
        for (got, want) in idx.doc_vector(0).entries.iter().zip(expected_a) {
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-12);
        }
        assert_eq!(idx.doc_vector(2).entries, vec![(3, 1.0)]);
    }

    #[test]
    fn self_query_ranks_first() {
        let docs = [doc("a", "x y", &[]), doc("b", "x z w", &[]), doc("c", "q r", &[])];
        let idx = TfIdfIndex::build(&docs).unwrap();
        let hits = retrieve(&docs[1], &idx, 2, false).unwrap();
        assert_eq!(hits[0].doc_id, "b");
        assert!((hits[0].similarity - 1.0).abs() < 1e-9);
        let hits = retrieve(&docs[1], &idx, 2, true).unwrap();
        assert_eq!(hits[0].doc_id, "a");
    }

    #[test]
    fn orthogonal_query_ties_by_id() {
        let docs = [doc("b", "x", &[]), doc("a", "y", &[]), doc("c", "z", &[])];
        let idx = TfIdfIndex::build(&docs).unwrap();
        let q = doc("q", "nothing shared", &[]);
        let hits = retrieve(&q, &idx, 3, true).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(hits.iter().all(|h| h.similarity == 0.0));
    }

    #[test]
    fn four_doc_fixture_top_two() {
        // cosines by hand: d1 0.727, d3 0.526, d2 0.256, d4 0
        let docs = [
            doc("d1", "graph attention network", &[]),
            doc("d2", "attention model", &[]),
            doc("d3", "graph", &[]),
            doc("d4", "protein folding", &[]),
        ];
        let idx = TfIdfIndex::build(&docs).unwrap();
        let q = doc("q", "graph attention", &[]);
        let ids: Vec<String> = retrieve(&q, &idx, 2, true)
            .unwrap()
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        assert_eq!(ids, ["d1", "d3"]);
    }

    #[test]
    fn random_retrieval_is_seeded_permutation() {
        let docs: Vec<Document> = (0..6).map(|i| doc(&format!("d{i}"), &format!("w{i}"), &[])).collect();
        let idx = TfIdfIndex::build(&docs).unwrap();
        let a = random_retrieve(&docs[0], &idx, 6, 11, false).unwrap();
        let b = random_retrieve(&docs[0], &idx, 6, 11, false).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.iter().map(|h| h.doc_id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, ["d0", "d1", "d2", "d3", "d4", "d5"]);
        assert!(a.iter().all(|h| h.similarity == 0.0));
        assert!(random_retrieve(&docs[0], &idx, 5, 11, true)
            .unwrap()
            .iter()
            .all(|h| h.doc_id != "d0"));
    }

    #[test]
    fn transforming_rate_examples() {
        let d = doc("q", "a b", &["x y", "z"]);
        let r = Reference {
            doc_id: "r".into(),
            tokens: toks("p x y q"),
            similarity: 0.5,
        };
        assert_eq!(transforming_rate(&[d], &[vec![r]]), 0.5);
        let d = doc("q", "a b", &["a"]);
        assert_eq!(transforming_rate(&[d], &[vec![]]), 0.0);
    }

    #[test]
    fn transforming_rate_three_docs() {
        // absent: q1 {u v, w}, q2 {models}, q3 {}
        let docs = [
            doc("q1", "a b", &["a", "u v", "w"]),
            doc("q2", "c", &["models"]),
            doc("q3", "e f", &["e f"]),
        ];
        let mk = |t: &str| Reference {
            doc_id: "r".into(),
            tokens: toks(t),
            similarity: 0.0,
        };
        let refs = vec![
            vec![mk("u v"), mk("v w")],
            vec![mk("the model")],
            vec![mk("e f")],
        ];
        assert!((transforming_rate(&docs, &refs) - 1.0).abs() < 1e-12);
        let refs = vec![vec![mk("u x v")], vec![mk("the model")], vec![]];
        assert!((transforming_rate(&docs, &refs) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reference_tokens_layout() {
        let d = doc("r", "a b c", &["k1", "k2 k3"]);
        let all = reference_tokens(&d, &ReferenceOptions::default());
        assert_eq!(all, toks("a b c <sep> k1 <sep> k2 k3"));
        let only_kp = reference_tokens(
            &d,
            &ReferenceOptions {
                include_document: false,
                ..Default::default()
            },
        );
        assert_eq!(only_kp, toks("k1 <sep> k2 k3"));
        let short = reference_tokens(
            &d,
            &ReferenceOptions {
                max_tokens: 4,
                ..Default::default()
            },
        );
        assert_eq!(short, toks("a b c <sep>"));
    }

    #[test]
    fn index_bytes_round_trip() {
        let docs = [doc("a", "x y z", &[]), doc("b", "y z z", &[])];
        let idx = TfIdfIndex::build(&docs).unwrap();
        let bytes = idx.to_bytes();
        let back = TfIdfIndex::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(TfIdfIndex::from_bytes(&bad, Path::new("mem")).is_err());
    }
}
