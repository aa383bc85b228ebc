//! Deterministic topic-clustered corpora for tests, demos and sanity runs.
//!
//! Every word is a consonant-vowel pseudo-word ending in `a`, `o` or `u`,
//! which no Porter rule rewrites, so stemmed matching equals exact matching.
//! Documents in a cluster share topic words and draw their absent
//! keyphrases from a per-cluster pool whose words never occur in any source.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprtvz";
const VOWELS: &[u8] = b"aou";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: usize,
    pub clusters: usize,
    /// Topic words per cluster.
    pub topic_words: usize,
    /// Filler words shared by every cluster.
    pub shared_words: usize,
    /// Abstract length before present keyphrases are inserted.
    pub abstract_len: usize,
    pub title_len: usize,
    /// Two-word present keyphrases per document.
    pub present_per_doc: usize,
    /// Two-word absent keyphrases per cluster; documents list theirs in
    /// pool order.
    pub absent_pool: usize,
    pub absent_per_doc: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            docs: 30,
            clusters: 3,
            topic_words: 12,
            shared_words: 8,
            abstract_len: 14,
            title_len: 3,
            present_per_doc: 2,
            absent_pool: 4,
            absent_per_doc: 2,
            seed: 7,
        }
    }
}

impl SyntheticCorpus {
    pub fn new(docs: usize, clusters: usize, seed: u64) -> Self {
        SyntheticCorpus {
            docs,
            clusters,
            seed,
            ..SyntheticCorpus::default()
        }
    }

    pub fn generate(&self) -> Result<Vec<Document>> {
        if self.clusters == 0
            || self.topic_words < 2
            || self.absent_per_doc > self.absent_pool
            || self.title_len > self.topic_words
        {
            return Err(Error::Config(format!("inconsistent synthetic corpus settings: {self:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let per_cluster = self.topic_words + 2 * self.absent_pool;
        let mut words = pseudo_words(&mut rng, self.shared_words + self.clusters * per_cluster);
        let shared: Vec<String> = words.drain(..self.shared_words).collect();
        let clusters: Vec<(Vec<String>, Vec<Vec<String>>)> = (0..self.clusters)
            .map(|_| {
                let topic: Vec<String> = words.drain(..self.topic_words).collect();
                let absent = words
                    .drain(..2 * self.absent_pool)
                    .collect::<Vec<_>>()
                    .chunks(2)
                    .map(<[String]>::to_vec)
                    .collect();
                (topic, absent)
            })
            .collect();

        (0..self.docs)
            .map(|i| {
                let (topic, absent) = &clusters[i % self.clusters];
                let title: Vec<String> = topic.choose_multiple(&mut rng, self.title_len).cloned().collect();
                let mut abstract_tokens: Vec<String> = (0..self.abstract_len)
                    .map(|_| {
                        let pool = if shared.is_empty() || rng.gen_bool(0.7) { topic } else { &shared };
                        pool.choose(&mut rng).unwrap().clone()
                    })
                    .collect();
                let mut keyphrases = Vec::new();
                let mut slots = Vec::new();
                for _ in 0..self.present_per_doc {
                    let pair: Vec<String> = topic.choose_multiple(&mut rng, 2).cloned().collect();
                    slots.push((rng.gen_range(0..=abstract_tokens.len()), pair.clone()));
                    keyphrases.push(pair);
                }
                // back to front, so no pair lands inside another
                slots.sort_by(|a, b| b.0.cmp(&a.0));
                for (at, pair) in slots {
                    abstract_tokens.splice(at..at, pair);
                }
                let mut picks = rand::seq::index::sample(&mut rng, absent.len(), self.absent_per_doc).into_vec();
                picks.sort_unstable();
                keyphrases.extend(picks.into_iter().map(|j| absent[j].clone()));
                Document::new(format!("syn-{i:04}"), title, abstract_tokens, keyphrases)
            })
            .collect()
    }
}

/// `n` distinct three-syllable pseudo-words.
fn pseudo_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3)
            .flat_map(|_| {
                [
                    *CONSONANTS.choose(rng).unwrap() as char,
                    *VOWELS.choose(rng).unwrap() as char,
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}
