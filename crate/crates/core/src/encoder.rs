//! Document and keyword node initialisation, the edge-aware graph attention
//! aggregator, and the iterated three-step node update.

use crate::autodiff::{Tensor, Var};
use crate::config::GatActivation;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::model::nn::{gru_sequence, linear};
use crate::model::{Model, Session};

/// Token ids (base vocabulary, OOV as UNK) and graph structure for one
/// source document and its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub source: Vec<usize>,
    pub refs: Vec<Vec<usize>>,
    pub keywords: Vec<usize>,
    /// `(keyword, doc slot, bucket)`.
    pub w2d: Vec<(usize, usize, usize)>,
    /// `(reference slot, bucket)`, slots `1..=K`.
    pub d2d: Vec<(usize, usize)>,
}

impl EncoderInput {
    pub fn new(
        source: &[String],
        refs: &[Vec<String>],
        graph: &HeteroGraph,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if graph.num_docs() != refs.len() + 1 {
            return Err(Error::Input(format!(
                "graph has {} document slots for {} references",
                graph.num_docs(),
                refs.len()
            )));
        }
        let ids = |t: &[String]| t.iter().map(|w| vocab.id(w)).collect::<Vec<_>>();
        Ok(EncoderInput {
            source: ids(source),
            refs: refs.iter().map(|r| ids(r)).collect(),
            keywords: graph.keywords.iter().map(|w| vocab.id(w)).collect(),
            w2d: graph.w2d.iter().map(|e| (e.keyword, e.doc, e.bucket)).collect(),
            d2d: graph.d2d.iter().map(|e| (e.reference, e.bucket)).collect(),
        })
    }

    pub fn num_refs(&self) -> usize {
        self.refs.len()
    }
}

/// Encoder results. Widths are all `d_h`; `m_s` and `m_r` are BiGRU states,
/// untouched by the graph.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'t> {
    /// `[1, d_h]`.
    pub d_s: Var<'t>,
    /// `[K, d_h]`, absent when `K = 0`.
    pub d_r: Option<Var<'t>>,
    /// `[L_x, d_h]`.
    pub m_s: Var<'t>,
    /// Reference word states stacked in reference order, `[Σ L_i, d_h]`.
    pub m_r: Option<Var<'t>>,
    /// `[m, d_h]`, absent without keywords or with w2d edges disabled.
    pub h_w: Option<Var<'t>>,
}

/// Directed attention edges for one aggregation: `query[e]` attends to
/// `key[e]` through edge embedding row `bucket[e]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Edges {
    pub query: Vec<usize>,
    pub key: Vec<usize>,
    pub bucket: Vec<usize>,
}

impl Edges {
    pub fn push(&mut self, query: usize, key: usize, bucket: usize) {
        self.query.push(query);
        self.key.push(key);
        self.bucket.push(bucket);
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }

    fn has_neighbour(&self, n_query: usize) -> Vec<bool> {
        let mut has = vec![false; n_query];
        for &q in &self.query {
            has[q] = true;
        }
        has
    }
}

/// Per-word BiGRU states `[L, d_h]` and the document vector `[1, d_h]`.
pub fn bigru_encode<'t>(s: &Session<'t>, model: &Model, tokens: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty token sequence".into()));
    }
    let half = model.hidden() / 2;
    let x = s.param("embedding")?.embedding_lookup(tokens)?;
    let fwd = gru_sequence(s, "enc.fwd", x, half, false)?;
    let bwd = gru_sequence(s, "enc.bwd", x, half, true)?;
    let last = tokens.len() - 1;
    let states = s.tape.concat(&[fwd, bwd], 1)?;
    let doc = if model.config.paper_literal_doc_vector {
        s.tape.concat(&[fwd.row(0)?, bwd.row(last)?], 1)?
    } else {
        s.tape.concat(&[fwd.row(last)?, bwd.row(0)?], 1)?
    };
    Ok((states, doc))
}

fn activation<'t>(model: &Model, x: Var<'t>) -> Var<'t> {
    match model.config.gat_activation {
        GatActivation::Tanh => x.tanh(),
        GatActivation::Elu => x.elu(),
    }
}

fn indicator<'t>(s: &Session<'t>, mask: &[bool], on: bool) -> Var<'t> {
    s.tape.constant(Tensor::vector(
        mask.iter().map(|&m| if m == on { 1.0 } else { 0.0 }).collect(),
    ))
}

/// `mask ? a : b`, row-wise.
fn select_rows<'t>(s: &Session<'t>, mask: &[bool], a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.mul_rows(indicator(s, mask, true))?
        .add(b.mul_rows(indicator(s, mask, false))?)
}

/// Edge-featured multi-head graph attention. Per head,
/// `z = LeakyReLU(a_q·W_q h_i + a_k·W_k h_j + a_e·e_ij)`, `α` is the softmax
/// of `z` over each query's incoming edges, and `u_i = σ(Σ_j α_ij W_v h_j)`.
/// Heads are concatenated and projected back to `d_h`. Queries without
/// edges return their own state.
pub fn gat_aggregate<'t>(
    s: &Session<'t>,
    model: &Model,
    layer: &str,
    edge_table: &str,
    h_q: Var<'t>,
    h_kv: Var<'t>,
    edges: &Edges,
) -> Result<Var<'t>> {
    let n_q = h_q.shape()[0];
    if h_q.shape()[1] != model.hidden() || h_kv.shape()[1] != model.hidden() {
        return Err(Error::shape("gat_aggregate", &h_q.shape(), &h_kv.shape()));
    }
    if edges.is_empty() {
        return Ok(h_q);
    }
    let e = s.param(edge_table)?.embedding_lookup(&edges.bucket)?;
    let mut heads = Vec::with_capacity(model.config.attn_heads);
    for h in 0..model.config.attn_heads {
        let p = format!("graph.{layer}.head{h}");
        let sq = h_q
            .matmul(s.param(&format!("{p}.w_q"))?)?
            .matmul(s.param(&format!("{p}.a_q"))?)?;
        let sk = h_kv
            .matmul(s.param(&format!("{p}.w_k"))?)?
            .matmul(s.param(&format!("{p}.a_k"))?)?;
        let se = e.matmul(s.param(&format!("{p}.a_e"))?)?;
        let z = sq
            .embedding_lookup(&edges.query)?
            .add(sk.embedding_lookup(&edges.key)?)?
            .add(se)?
            .flatten()
            .leaky_relu(model.config.leaky_slope);
        let alpha = z.segment_softmax(&edges.query)?;
        let v = h_kv.matmul(s.param(&format!("{p}.w_v"))?)?;
        let agg = v
            .embedding_lookup(&edges.key)?
            .mul_rows(alpha)?
            .scatter_add_rows(&edges.query, n_q)?;
        heads.push(activation(model, agg));
    }
    let u = s
        .tape
        .concat(&heads, 1)?
        .matmul(s.param(&format!("graph.{layer}.w_o"))?)?;
    let has = edges.has_neighbour(n_q);
    if has.iter().all(|&b| b) {
        Ok(u)
    } else {
        select_rows(s, &has, u, h_q)
    }
}

/// `x + W_2 σ(W_1 x + b_1) + b_2`.
fn ffn<'t>(s: &Session<'t>, model: &Model, layer: &str, x: Var<'t>) -> Result<Var<'t>> {
    let inner = activation(model, linear(s, &format!("graph.{layer}.ffn1"), x, true)?);
    x.add(linear(s, &format!("graph.{layer}.ffn2"), inner, true)?)
}

/// `FFN(GAT(h_q, h_kv) + h_q)`, leaving queries without edges unchanged.
fn graph_sublayer<'t>(
    s: &Session<'t>,
    model: &Model,
    layer: &str,
    edge_table: &str,
    h_q: Var<'t>,
    h_kv: Var<'t>,
    edges: &Edges,
) -> Result<Var<'t>> {
    let n_q = h_q.shape()[0];
    let has = edges.has_neighbour(n_q);
    if !has.iter().any(|&b| b) {
        return Ok(h_q);
    }
    let u = gat_aggregate(s, model, layer, edge_table, h_q, h_kv, edges)?;
    let u = s.dropout(u, model.config.graph_dropout);
    let out = ffn(s, model, layer, u.add(h_q)?)?;
    if has.iter().all(|&b| b) {
        Ok(out)
    } else {
        select_rows(s, &has, out, h_q)
    }
}

/// Edge lists for the three sub-steps derived from an [`EncoderInput`].
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdges {
    pub word_from_doc: Edges,
    pub doc_from_word: Edges,
    pub doc_from_doc: Edges,
}

impl GraphEdges {
    /// d2d edges are made symmetric and every document gets a self-loop
    /// using bucket row `buckets` (the reserved self row).
    pub fn new(input: &EncoderInput, buckets: usize) -> Self {
        let mut word_from_doc = Edges::default();
        let mut doc_from_word = Edges::default();
        for &(w, d, b) in &input.w2d {
            word_from_doc.push(w, d, b);
            doc_from_word.push(d, w, b);
        }
        let mut doc_from_doc = Edges::default();
        for d in 0..=input.num_refs() {
            doc_from_doc.push(d, d, buckets);
        }
        for &(r, b) in &input.d2d {
            doc_from_doc.push(0, r, b);
            doc_from_doc.push(r, 0, b);
        }
        GraphEdges {
            word_from_doc,
            doc_from_word,
            doc_from_doc,
        }
    }
}

/// One application of the three-step update. With `no_w2d` the first two
/// steps are skipped; with `no_d2d` the third is.
pub fn update_step<'t>(
    s: &Session<'t>,
    model: &Model,
    h_w: Option<Var<'t>>,
    h_d: Var<'t>,
    edges: &GraphEdges,
) -> Result<(Option<Var<'t>>, Var<'t>)> {
    let (mut h_w, mut h_d) = (h_w, h_d);
    if let (false, Some(w)) = (model.config.no_w2d, h_w) {
        let w1 = graph_sublayer(s, model, "word_from_doc", "graph.edge_w2d", w, h_d, &edges.word_from_doc)?;
        h_d = graph_sublayer(s, model, "doc_from_word", "graph.edge_w2d", h_d, w1, &edges.doc_from_word)?;
        h_w = Some(w1);
    }
    if !model.config.no_d2d {
        h_d = graph_sublayer(s, model, "doc_from_doc", "graph.edge_d2d", h_d, h_d, &edges.doc_from_doc)?;
    }
    Ok((h_w, h_d))
}

/// Full encoder: BiGRU node initialisation, keyword projection, then
/// `graph_iters` update steps.
pub fn encode<'t>(s: &Session<'t>, model: &Model, input: &EncoderInput) -> Result<EncoderOutput<'t>> {
    let (m_s, d_s) = bigru_encode(s, model, &input.source)?;
    let mut docs = vec![d_s];
    let mut words = Vec::with_capacity(input.refs.len());
    for r in &input.refs {
        let (m, d) = bigru_encode(s, model, r)?;
        words.push(m);
        docs.push(d);
    }
    let mut h_d = s.tape.concat(&docs, 0)?;
    let mut h_w = if model.config.no_w2d || input.keywords.is_empty() {
        None
    } else {
        let x = s.param("embedding")?.embedding_lookup(&input.keywords)?;
        Some(linear(s, "graph.keyword", x, true)?)
    };
    let edges = GraphEdges::new(input, model.edge_buckets);
    for _ in 0..model.config.graph_iters {
        (h_w, h_d) = update_step(s, model, h_w, h_d, &edges)?;
    }
    let k = input.num_refs();
    Ok(EncoderOutput {
        d_s: h_d.row(0)?,
        d_r: if k > 0 { Some(h_d.slice(0, 1, k)?) } else { None },
        m_s,
        m_r: if k > 0 { Some(s.tape.concat(&words, 0)?) } else { None },
        h_w,
    })
}
