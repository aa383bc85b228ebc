use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::corpus::Document;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GTRIDX\0\0";
pub const INDEX_VERSION: u32 = 1;

/// Unigrams followed by adjacent bigrams (space-joined).
pub fn grams(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
    tokens
        .iter()
        .cloned()
        .chain(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])))
}

/// Sparse vector as `(gram id, weight)` sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }
}

/// TF-IDF uni/bi-gram index over a fixed document collection.
///
/// `tf` is the raw count, `idf = ln((N+1)/(df+1)) + 1`, and every document
/// vector is L2-normalized. Gram ids follow lexicographic gram order.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdfIndex {
    grams: Vec<String>,
    gram_ids: HashMap<String, u32>,
    idf: Vec<f64>,
    doc_ids: Vec<String>,
    doc_vectors: Vec<SparseVector>,
    doc_lookup: HashMap<String, usize>,
    postings: Vec<Vec<(u32, f64)>>,
}

impl TfIdfIndex {
    pub fn build(docs: &[Document]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Retrieval("cannot index an empty corpus".into()));
        }
        let counts: Vec<BTreeMap<String, usize>> = docs
            .iter()
            .map(|d| {
                let mut c = BTreeMap::new();
                for g in grams(&d.source_tokens) {
                    *c.entry(g).or_insert(0) += 1;
                }
                c
            })
            .collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &counts {
            for g in c.keys() {
                *df.entry(g.as_str()).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let grams: Vec<String> = df.keys().map(|g| g.to_string()).collect();
        let idf: Vec<f64> = df
            .values()
            .map(|&d| ((n + 1.0) / (d as f64 + 1.0)).ln() + 1.0)
            .collect();
        let gram_ids: HashMap<String, u32> = grams
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i as u32))
            .collect();
        let doc_vectors = counts
            .iter()
            .map(|c| {
                let raw: Vec<(u32, f64)> = c
                    .iter()
                    .map(|(g, &tf)| {
                        let id = gram_ids[g];
                        (id, tf as f64 * idf[id as usize])
                    })
                    .collect();
                normalized(raw)
            })
            .collect();
        Ok(Self::assemble(
            grams,
            idf,
            docs.iter().map(|d| d.id.clone()).collect(),
            doc_vectors,
        ))
    }

    fn assemble(
        grams: Vec<String>,
        idf: Vec<f64>,
        doc_ids: Vec<String>,
        doc_vectors: Vec<SparseVector>,
    ) -> Self {
        let gram_ids = grams
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i as u32))
            .collect();
        let doc_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        let mut postings = vec![Vec::new(); grams.len()];
        for (d, v) in doc_vectors.iter().enumerate() {
            for &(g, w) in &v.entries {
                postings[g as usize].push((d as u32, w));
            }
        }
        TfIdfIndex {
            grams,
            gram_ids,
            idf,
            doc_ids,
            doc_vectors,
            doc_lookup,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn num_grams(&self) -> usize {
        self.grams.len()
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }

    pub fn gram_id(&self, gram: &str) -> Option<u32> {
        self.gram_ids.get(gram).copied()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_position(&self, id: &str) -> Option<usize> {
        self.doc_lookup.get(id).copied()
    }

    pub fn doc_vector(&self, i: usize) -> &SparseVector {
        &self.doc_vectors[i]
    }

    pub fn idf_table(&self) -> &[f64] {
        &self.idf
    }

    /// IDF of a gram; unseen grams get the `df = 0` value.
    pub fn idf(&self, gram: &str) -> f64 {
        match self.gram_id(gram) {
            Some(id) => self.idf[id as usize],
            None => (self.len() as f64 + 1.0).ln() + 1.0,
        }
    }

    /// Normalized TF-IDF vector of arbitrary tokens. Grams outside the index
    /// vocabulary are ignored.
    pub fn vectorize(&self, tokens: &[String]) -> SparseVector {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for g in grams(tokens) {
            if let Some(id) = self.gram_id(&g) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        normalized(
            counts
                .into_iter()
                .map(|(id, tf)| (id, tf as f64 * self.idf[id as usize]))
                .collect(),
        )
    }

    /// Cosine similarity of `query` against every indexed document.
    pub fn similarities(&self, query: &SparseVector) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for &(g, qw) in &query.entries {
            for &(d, dw) in &self.postings[g as usize] {
                scores[d as usize] += qw * dw;
            }
        }
        scores.iter_mut().for_each(|s| *s = s.clamp(0.0, 1.0));
        scores
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer().save(path.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_writer().buf
    }

    fn to_writer(&self) -> Writer {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(INDEX_VERSION);
        w.u64(self.doc_ids.len() as u64);
        w.u64(self.grams.len() as u64);
        for g in &self.grams {
            w.str(g);
        }
        for &x in &self.idf {
            w.f64(x);
        }
        for (id, v) in self.doc_ids.iter().zip(&self.doc_vectors) {
            w.str(id);
            w.u32(v.entries.len() as u32);
            for &(g, x) in &v.entries {
                w.u32(g);
                w.f64(x);
            }
        }
        w
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data, path)
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        if r.take(8)? != MAGIC {
            return Err(r.fail("not an index file (bad magic)"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.fail(format!(
                "index version {version}, expected {INDEX_VERSION}; rebuild with build-index"
            )));
        }
        let n_docs = r.u64()? as usize;
        let n_grams = r.u64()? as usize;
        let grams = (0..n_grams).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let idf = (0..n_grams).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_vectors = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            doc_ids.push(r.str()?);
            let nnz = r.u32()? as usize;
            let mut entries = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let g = r.u32()?;
                if g as usize >= n_grams {
                    return Err(r.fail(format!("gram id {g} out of range")));
                }
                entries.push((g, r.f64()?));
            }
            doc_vectors.push(SparseVector { entries });
        }
        r.finish()?;
        Ok(Self::assemble(grams, idf, doc_ids, doc_vectors))
    }
}

fn normalized(mut entries: Vec<(u32, f64)>) -> SparseVector {
    entries.sort_by_key(|e| e.0);
    let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        entries.iter_mut().for_each(|e| e.1 /= norm);
    }
    SparseVector { entries }
}
