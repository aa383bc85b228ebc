//! Example preparation, training objectives, optimisation, checkpoints and
//! decoding.

pub mod checkpoint;
pub mod optim;
pub mod search;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use search::{beam_decode, greedy_decode, predict, ScoredPhrase};
pub use train::{evaluate_loss, example_loss, train, EpochLog, TrainOutcome};

use std::collections::HashMap;

use crate::autodiff::Var;
use crate::config::{Config, DataConfig, RetrieverKind};
use crate::corpus::{build_one2seq_target, ordered_keyphrases, Document, Vocabulary, BOS_ID, EOS};
use crate::decoder::{decode_step, CopyIndex, DecoderMemory, DynamicVocab};
use crate::encoder::{encode, EncoderInput};
use crate::error::{Error, Result};
use crate::graph::{build_graph, EdgeBucketer, HeteroGraph};
use crate::model::{Model, Session};
use crate::retrieval::{
    corpus_lookup, materialize, Hit, RandomRetriever, Reference, ReferenceOptions, Retriever,
    TfIdfIndex, TfIdfRetriever,
};

/// Retrieves and materialises references from an indexed corpus according
/// to the data configuration.
pub struct ReferenceSource<'a> {
    index: &'a TfIdfIndex,
    corpus: HashMap<&'a str, &'a Document>,
    data: DataConfig,
    seed: u64,
}

impl<'a> ReferenceSource<'a> {
    /// `corpus` must contain the documents the index was built from.
    pub fn new(index: &'a TfIdfIndex, corpus: &'a [Document], config: &Config) -> Result<Self> {
        let lookup = corpus_lookup(corpus);
        if let Some(id) = index.doc_ids().iter().find(|id| !lookup.contains_key(id.as_str())) {
            return Err(Error::Input(format!(
                "indexed document {id:?} is missing from the reference corpus; \
                 pass the corpus the index was built from"
            )));
        }
        Ok(ReferenceSource {
            index,
            corpus: lookup,
            data: config.data.clone(),
            seed: config.train.seed,
        })
    }

    pub fn index(&self) -> &TfIdfIndex {
        self.index
    }

    pub fn options(&self) -> ReferenceOptions {
        ReferenceOptions {
            include_document: !self.data.no_ref_docs,
            include_keyphrases: !self.data.no_ref_keyphrases,
            max_tokens: self.data.max_ref_tokens,
        }
    }

    pub fn hits(&self, doc: &Document, exclude_self: bool) -> Result<Vec<Hit>> {
        let k = self.data.num_refs;
        if k == 0 {
            return Ok(Vec::new());
        }
        match self.data.retriever {
            RetrieverKind::Tfidf => TfIdfRetriever { index: self.index }.retrieve(doc, k, exclude_self),
            RetrieverKind::Random => RandomRetriever {
                index: self.index,
                seed: self.seed,
            }
            .retrieve(doc, k, exclude_self),
        }
    }

    pub fn materialize(&self, hits: &[Hit]) -> Vec<Reference> {
        materialize(hits, &self.corpus, &self.options())
    }

    pub fn references(&self, doc: &Document, exclude_self: bool) -> Result<Vec<Reference>> {
        Ok(self.materialize(&self.hits(doc, exclude_self)?))
    }
}

/// A document with its references and every derived index the model needs.
#[derive(Clone, Debug)]
pub struct Example {
    pub doc: Document,
    pub refs: Vec<Reference>,
    pub graph: HeteroGraph,
    pub input: EncoderInput,
    pub dvocab: DynamicVocab,
    pub copy: CopyIndex,
    pub ref_lengths: Vec<usize>,
}

impl Example {
    pub fn new(
        doc: Document,
        refs: Vec<Reference>,
        index: &TfIdfIndex,
        vocab: &Vocabulary,
        data: &DataConfig,
    ) -> Result<Self> {
        let refs: Vec<Reference> = refs.into_iter().filter(|r| !r.tokens.is_empty()).collect();
        let bucketer = EdgeBucketer::uniform(data.edge_buckets)?;
        let graph = build_graph(&doc, &refs, index, data.num_keywords, &bucketer);
        let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| r.tokens.clone()).collect();
        let input = EncoderInput::new(&doc.source_tokens, &ref_tokens, &graph, vocab)?;
        let dvocab = DynamicVocab::build(&doc.source_tokens, &ref_tokens, vocab);
        let copy = CopyIndex::new(&dvocab, &doc.source_tokens, &ref_tokens, vocab);
        Ok(Example {
            ref_lengths: ref_tokens.iter().map(Vec::len).collect(),
            doc,
            refs,
            graph,
            input,
            dvocab,
            copy,
        })
    }

    /// Dynamic-vocabulary ids of a target token sequence.
    pub fn target_ids(&self, tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
        tokens.iter().map(|t| self.dvocab.id(t, vocab)).collect()
    }

    /// One EOS-terminated target per keyphrase, in target order.
    pub fn one2one_targets(&self, vocab: &Vocabulary) -> Vec<Vec<usize>> {
        ordered_keyphrases(&self.doc)
            .into_iter()
            .map(|mut k| {
                k.push(EOS.to_string());
                self.target_ids(&k, vocab)
            })
            .collect()
    }

    pub fn one2seq_target(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.target_ids(&build_one2seq_target(&self.doc), vocab)
    }
}

/// Builds examples for a corpus, retrieving references for each document.
pub fn prepare_examples(
    docs: &[Document],
    source: &ReferenceSource<'_>,
    vocab: &Vocabulary,
    exclude_self: bool,
) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            let refs = source.references(d, exclude_self)?;
            Example::new(d.clone(), refs, source.index(), vocab, &source.data)
        })
        .collect()
}

/// Teacher-forced negative log-likelihood of one target sequence, starting
/// from BOS and the memory's initial state.
pub fn sequence_loss<'t>(
    s: &Session<'t>,
    model: &Model,
    mem: &DecoderMemory<'t>,
    copy: &CopyIndex,
    target: &[usize],
) -> Result<Var<'t>> {
    if target.is_empty() {
        return Err(Error::Input("empty target sequence".into()));
    }
    let mut h = mem.init;
    let mut prev = BOS_ID;
    let mut terms = Vec::with_capacity(target.len());
    for &y in target {
        let out = decode_step(s, model, mem, copy, prev, h)?;
        terms.push(out.dist.slice(0, y, 1)?.log().neg());
        h = out.hidden;
        prev = y;
    }
    Ok(s.tape.concat(&terms, 0)?.sum_all())
}

fn encode_example<'t>(s: &Session<'t>, model: &Model, ex: &Example) -> Result<DecoderMemory<'t>> {
    let enc = encode(s, model, &ex.input)?;
    DecoderMemory::new(s, &enc, &ex.ref_lengths)
}

/// Sum over keyphrases of their sequence losses; the encoding is shared.
pub fn one2one_loss<'t>(s: &Session<'t>, model: &Model, ex: &Example, vocab: &Vocabulary) -> Result<Var<'t>> {
    let targets = ex.one2one_targets(vocab);
    if targets.is_empty() {
        return Err(Error::Input(format!("document {:?} has no keyphrases", ex.doc.id)));
    }
    let mem = encode_example(s, model, ex)?;
    let losses = targets
        .iter()
        .map(|t| sequence_loss(s, model, &mem, &ex.copy, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(s.tape.concat(&losses, 0)?.sum_all())
}

/// Loss of the separator-joined keyphrase sequence.
pub fn one2seq_loss<'t>(s: &Session<'t>, model: &Model, ex: &Example, vocab: &Vocabulary) -> Result<Var<'t>> {
    if ex.doc.keyphrases.is_empty() {
        return Err(Error::Input(format!("document {:?} has no keyphrases", ex.doc.id)));
    }
    let mem = encode_example(s, model, ex)?;
    sequence_loss(s, model, &mem, &ex.copy, &ex.one2seq_target(vocab))
}
