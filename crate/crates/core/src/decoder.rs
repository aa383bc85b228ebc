//! GRU decoder with hierarchical attention over the source and references,
//! a relevance gate, and a generate / copy-source / copy-reference mixture
//! over a per-example dynamic vocabulary.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Tensor, Var};
use crate::corpus::{Vocabulary, UNK_ID};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::nn::{attention_keys, attention_logits, gru_inputs, gru_step, linear};
use crate::model::{Model, Session};

/// Base vocabulary extended with the out-of-vocabulary tokens of one source
/// (ids `|V|..`) and then of its references.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicVocab {
    base_len: usize,
    src_ext: Vec<String>,
    ref_ext: Vec<String>,
    ext_ids: HashMap<String, usize>,
}

impl DynamicVocab {
    pub fn build(source: &[String], refs: &[Vec<String>], base: &Vocabulary) -> Self {
        let mut v = DynamicVocab {
            base_len: base.len(),
            src_ext: Vec::new(),
            ref_ext: Vec::new(),
            ext_ids: HashMap::new(),
        };
        for t in source {
            if base.get(t).is_none() && !v.ext_ids.contains_key(t) {
                v.ext_ids.insert(t.clone(), v.base_len + v.src_ext.len());
                v.src_ext.push(t.clone());
            }
        }
        for t in refs.iter().flatten() {
            if base.get(t).is_none() && !v.ext_ids.contains_key(t) {
                v.ext_ids
                    .insert(t.clone(), v.base_len + v.src_ext.len() + v.ref_ext.len());
                v.ref_ext.push(t.clone());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.base_len + self.src_ext.len() + self.ref_ext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn source_extension(&self) -> &[String] {
        &self.src_ext
    }

    pub fn reference_extension(&self) -> &[String] {
        &self.ref_ext
    }

    pub fn get(&self, token: &str, base: &Vocabulary) -> Option<usize> {
        base.get(token).or_else(|| self.ext_ids.get(token).copied())
    }

    /// Extended id, or UNK for tokens outside the dynamic vocabulary.
    pub fn id(&self, token: &str, base: &Vocabulary) -> usize {
        self.get(token, base).unwrap_or(UNK_ID)
    }

    pub fn token<'a>(&'a self, id: usize, base: &'a Vocabulary) -> &'a str {
        if id < self.base_len {
            base.token(id)
        } else if id < self.base_len + self.src_ext.len() {
            &self.src_ext[id - self.base_len]
        } else {
            &self.ref_ext[id - self.base_len - self.src_ext.len()]
        }
    }
}

/// Dynamic-vocabulary ids of every copyable position.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyIndex {
    pub size: usize,
    pub source: Vec<usize>,
    /// Reference words in reference order.
    pub refs: Vec<usize>,
}

impl CopyIndex {
    pub fn new(dvocab: &DynamicVocab, source: &[String], refs: &[Vec<String>], base: &Vocabulary) -> Self {
        CopyIndex {
            size: dvocab.len(),
            source: source.iter().map(|t| dvocab.id(t, base)).collect(),
            refs: refs.iter().flatten().map(|t| dvocab.id(t, base)).collect(),
        }
    }
}

/// Reference memories for one example.
#[derive(Clone, Debug)]
pub struct RefMemory<'t> {
    pub docs: Var<'t>,
    pub doc_keys: Var<'t>,
    pub words: Var<'t>,
    pub word_keys: Var<'t>,
    /// Reference index of every row of `words`.
    pub segments: Vec<usize>,
}

/// Everything the decoder reads from the encoder, with attention keys
/// precomputed.
#[derive(Clone, Debug)]
pub struct DecoderMemory<'t> {
    pub init: Var<'t>,
    pub src: Var<'t>,
    pub src_keys: Var<'t>,
    pub refs: Option<RefMemory<'t>>,
}

impl<'t> DecoderMemory<'t> {
    /// `ref_lengths` gives the word count of each reference in `enc.m_r`.
    pub fn new(
        s: &Session<'t>,
        enc: &EncoderOutput<'t>,
        ref_lengths: &[usize],
    ) -> Result<Self> {
        let refs = match (enc.d_r, enc.m_r) {
            (Some(docs), Some(words)) => {
                let segments: Vec<usize> = ref_lengths
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
                    .collect();
                if segments.len() != words.shape()[0] || ref_lengths.len() != docs.shape()[0] {
                    return Err(Error::Input(format!(
                        "reference lengths {ref_lengths:?} do not match encoder output"
                    )));
                }
                Some(RefMemory {
                    docs,
                    doc_keys: attention_keys(s, "dec.attn_ref", docs)?,
                    words,
                    word_keys: attention_keys(s, "dec.attn_ref_word", words)?,
                    segments,
                })
            }
            _ => None,
        };
        Ok(DecoderMemory {
            init: enc.d_s,
            src: enc.m_s,
            src_keys: attention_keys(s, "dec.attn_src", enc.m_s)?,
            refs,
        })
    }

    pub fn num_refs(&self) -> usize {
        self.refs.as_ref().map_or(0, |r| r.docs.shape()[0])
    }

    pub fn values(&self) -> MemoryValues {
        MemoryValues {
            init: self.init.value(),
            src: self.src.value(),
            src_keys: self.src_keys.value(),
            refs: self.refs.as_ref().map(|r| {
                (
                    r.docs.value(),
                    r.doc_keys.value(),
                    r.words.value(),
                    r.word_keys.value(),
                    r.segments.clone(),
                )
            }),
        }
    }
}

type RefValues = (Arc<Tensor>, Arc<Tensor>, Arc<Tensor>, Arc<Tensor>, Vec<usize>);

/// Detached copy of a [`DecoderMemory`], re-attachable to fresh tapes so
/// that each inference step can run on its own small tape.
#[derive(Clone, Debug)]
pub struct MemoryValues {
    pub init: Arc<Tensor>,
    src: Arc<Tensor>,
    src_keys: Arc<Tensor>,
    refs: Option<RefValues>,
}

impl MemoryValues {
    pub fn attach<'t>(&self, s: &Session<'t>) -> DecoderMemory<'t> {
        let c = |t: &Arc<Tensor>| s.tape.shared(t.clone());
        DecoderMemory {
            init: c(&self.init),
            src: c(&self.src),
            src_keys: c(&self.src_keys),
            refs: self.refs.as_ref().map(|(d, dk, w, wk, seg)| RefMemory {
                docs: c(d),
                doc_keys: c(dk),
                words: c(w),
                word_keys: c(wk),
                segments: seg.clone(),
            }),
        }
    }
}

/// Intermediate and final quantities of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput<'t> {
    pub hidden: Var<'t>,
    pub attended: Var<'t>,
    /// Source-word attention, `[L_x]`.
    pub a_src: Var<'t>,
    /// Reference-level attention, `[K]`.
    pub a_ref: Option<Var<'t>>,
    /// Word attention within each reference, concatenated; normalised per
    /// segment of [`RefMemory::segments`].
    pub a_ref_words: Option<Var<'t>>,
    /// Weight on the source context; `None` means 1.
    pub gate: Option<Var<'t>>,
    /// Mixture weights over generate / copy-source (/ copy-reference).
    pub switch: Var<'t>,
    /// Final distribution over the dynamic vocabulary.
    pub dist: Var<'t>,
}

/// Copy distribution over the dynamic vocabulary from concatenated
/// reference-word weights.
pub fn ref_copy_distribution<'t>(weights: Var<'t>, copy: &CopyIndex) -> Result<Var<'t>> {
    Ok(weights
        .as_col()
        .scatter_add_rows(&copy.refs, copy.size)?
        .flatten())
}

/// Per-word copy weights `a_r[seg(j)] · a_ri[j]`.
pub fn ref_word_weights<'t>(a_ref: Var<'t>, a_ref_words: Var<'t>, segments: &[usize]) -> Result<Var<'t>> {
    a_ref
        .as_col()
        .embedding_lookup(segments)?
        .flatten()
        .mul(a_ref_words)
}

/// One decoder step from `prev` (a dynamic-vocabulary id) and hidden state
/// `h_prev: [1, d_h]`.
pub fn decode_step<'t>(
    s: &Session<'t>,
    model: &Model,
    mem: &DecoderMemory<'t>,
    copy: &CopyIndex,
    prev: usize,
    h_prev: Var<'t>,
) -> Result<StepOutput<'t>> {
    let cfg = &model.config;
    if h_prev.shape() != [1, model.hidden()] {
        return Err(Error::shape("decode_step", &h_prev.shape(), &[1, model.hidden()]));
    }
    let emb_id = if prev < model.vocab_size { prev } else { UNK_ID };
    let e = s.param("embedding")?.embedding_lookup(&[emb_id])?;
    let h = gru_step(s, "dec.gru", gru_inputs(s, "dec.gru", e)?, h_prev)?;

    let a_src = attention_logits(s, "dec.attn_src", mem.src_keys, h)?.softmax(0)?;
    let c_src = a_src.as_row().matmul(mem.src)?;

    let k = mem.num_refs();
    let refs = mem.refs.as_ref().filter(|_| !(cfg.no_hier_attn && cfg.no_hier_copy));
    let mut a_ref = None;
    let mut a_ref_words = None;
    let mut ref_weights = None;
    if let Some(r) = refs {
        let ar = attention_logits(s, "dec.attn_ref", r.doc_keys, h)?.softmax(0)?;
        let arw = attention_logits(s, "dec.attn_ref_word", r.word_keys, h)?
            .segment_softmax(&r.segments)?;
        ref_weights = Some(ref_word_weights(ar, arw, &r.segments)?);
        a_ref = Some(ar);
        a_ref_words = Some(arw);
    }

    let (context, gate) = match (refs, ref_weights) {
        (Some(r), Some(w)) if !cfg.no_hier_attn => {
            let c_ref = w.as_row().matmul(r.words)?;
            let g = s
                .tape
                .concat(&[c_src, c_ref], 1)?
                .matmul(s.param("dec.gate.w")?)?
                .sigmoid()
                .flatten();
            let c = c_src.mul_rows(g)?.add(c_ref.mul_rows(g.one_minus())?)?;
            (c, Some(g))
        }
        _ => (c_src, None),
    };

    let attended = s
        .tape
        .concat(&[context, h], 1)?
        .matmul(s.param("dec.combine.w")?)?
        .tanh();
    let p_vocab = linear(s, "dec.out", s.tape.concat(&[h, attended], 1)?, true)?
        .flatten()
        .softmax(0)?;
    let switch_logits =
        linear(s, "dec.switch", s.tape.concat(&[attended, h, e], 1)?, true)?.flatten();

    let ext = copy.size - model.vocab_size;
    let p_vocab = if ext > 0 {
        let pad = s.tape.constant(Tensor::zeros(&[ext]));
        s.tape.concat(&[p_vocab, pad], 0)?
    } else {
        p_vocab
    };
    let p_src = a_src
        .as_col()
        .scatter_add_rows(&copy.source, copy.size)?
        .flatten();

    let ref_copy = match (k > 0 && !cfg.no_hier_copy, ref_weights, a_ref_words) {
        (true, Some(w), Some(arw)) => Some(if cfg.paper_literal_copy {
            ref_copy_distribution(arw.scale(1.0 / k as f64), copy)?
        } else {
            ref_copy_distribution(w, copy)?
        }),
        _ => None,
    };
    let (switch, parts) = match ref_copy {
        Some(p_ref) => (switch_logits.softmax(0)?, vec![p_vocab, p_src, p_ref]),
        None => (switch_logits.slice(0, 0, 2)?.softmax(0)?, vec![p_vocab, p_src]),
    };
    let rows: Vec<Var<'t>> = parts.into_iter().map(|p| p.as_row()).collect();
    let dist = switch
        .as_row()
        .matmul(s.tape.concat(&rows, 0)?)?
        .flatten();
    Ok(StepOutput {
        hidden: h,
        attended,
        a_src,
        a_ref,
        a_ref_words,
        gate,
        switch,
        dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::Config;
    use crate::encoder::{encode, EncoderInput};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> Vocabulary {
        let mut t: Vec<String> = crate::corpus::SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(toks("a b c d"));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn dynamic_vocab_ordering() {
        let v = vocab();
        let dv = DynamicVocab::build(&toks("a x b y x"), &[toks("y z"), toks("w a z")], &v);
        assert_eq!(dv.len(), v.len() + 4);
        assert_eq!(dv.source_extension(), &toks("x y")[..]);
        assert_eq!(dv.reference_extension(), &toks("z w")[..]);
        assert_eq!(dv.id("x", &v), 10);
        assert_eq!(dv.id("y", &v), 11);
        assert_eq!(dv.id("z", &v), 12);
        assert_eq!(dv.id("w", &v), 13);
        assert_eq!(dv.id("b", &v), 7);
        assert_eq!(dv.id("q", &v), UNK_ID);
        assert_eq!(dv.token(13, &v), "w");
        assert_eq!(dv.token(6, &v), "a");
        let plain = DynamicVocab::build(&toks("a b"), &[toks("c")], &v);
        assert_eq!(plain.len(), v.len());
    }

    #[test]
    fn ref_copy_examples() {
        let tape = Tape::new();
        let copy = CopyIndex {
            size: 3,
            source: vec![],
            refs: vec![2, 2],
        };
        let a_r = tape.constant(Tensor::vector(vec![1.0]));
        let arw = tape.constant(Tensor::vector(vec![0.6, 0.4]));
        let w = ref_word_weights(a_r, arw, &[0, 0]).unwrap();
        let p = ref_copy_distribution(w, &copy).unwrap().value();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0]);

        let copy = CopyIndex {
            size: 2,
            source: vec![],
            refs: vec![0, 1],
        };
        let a_r = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let arw = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = ref_word_weights(a_r, arw, &[0, 1]).unwrap();
        assert_eq!(ref_copy_distribution(w, &copy).unwrap().value().data(), &[0.5, 0.5]);

        // shared token 0 across refs: 0.7·0.25 + 0.3·1.0
        let copy = CopyIndex {
            size: 3,
            source: vec![],
            refs: vec![0, 1, 0],
        };
        let a_r = tape.constant(Tensor::vector(vec![0.7, 0.3]));
        let arw = tape.constant(Tensor::vector(vec![0.25, 0.75, 1.0]));
        let w = ref_word_weights(a_r, arw, &[0, 0, 1]).unwrap();
        let p = ref_copy_distribution(w, &copy).unwrap().value();
        assert!((p.data()[0] - 0.475).abs() < 1e-15);
        assert!((p.data()[1] - 0.525).abs() < 1e-15);
    }

    struct Fixture {
        model: Model,
        input: EncoderInput,
        copy: CopyIndex,
        lengths: Vec<usize>,
    }

    fn fixture(k: usize) -> Fixture {
        let mut c = Config::default().model;
        c.emb_dim = 4;
        c.hidden_dim = 6;
        c.edge_dim = 3;
        c.attn_heads = 2;
        let v = vocab();
        let model = Model::new(c, v.len(), 4, 9).unwrap();
        let source = toks("a x b");
        let refs: Vec<Vec<String>> = [toks("b y"), toks("x c z")].into_iter().take(k).collect();
        let dv = DynamicVocab::build(&source, &refs, &v);
        let input = EncoderInput {
            source: source.iter().map(|t| v.id(t)).collect(),
            refs: refs.iter().map(|r| r.iter().map(|t| v.id(t)).collect()).collect(),
            keywords: vec![6, 7],
            w2d: vec![(0, 0, 3), (1, 0, 1)],
            d2d: (1..=k).map(|r| (r, 2)).collect(),
        };
        Fixture {
            copy: CopyIndex::new(&dv, &source, &refs, &v),
            lengths: refs.iter().map(Vec::len).collect(),
            model,
            input,
        }
    }

    fn run(f: &Fixture, prev: usize) -> Vec<f64> {
        let tape = Tape::new();
        let s = Session::inference(&tape, &f.model.params);
        let enc = encode(&s, &f.model, &f.input).unwrap();
        let mem = DecoderMemory::new(&s, &enc, &f.lengths).unwrap();
        let out = decode_step(&s, &f.model, &mem, &f.copy, prev, mem.init).unwrap();
        let sum: f64 = out.dist.value().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        out.dist.value().data().to_vec()
    }

    #[test]
    fn distribution_is_normalised_for_every_reference_count() {
        for k in 0..=2 {
            let f = fixture(k);
            let p = run(&f, crate::corpus::BOS_ID);
            assert_eq!(p.len(), f.copy.size);
            // extended prev id embeds as UNK
            let q = run(&f, f.copy.size - 1);
            assert_eq!(q, run(&f, UNK_ID));
        }
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut f = fixture(2);
        f.model.params.replace("dec.gate.w", Tensor::zeros(&[12, 1])).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &f.model.params);
        let enc = encode(&s, &f.model, &f.input).unwrap();
        let mem = DecoderMemory::new(&s, &enc, &f.lengths).unwrap();
        let out = decode_step(&s, &f.model, &mem, &f.copy, 2, mem.init).unwrap();
        assert_eq!(out.gate.unwrap().item(), 0.5);
    }

    #[test]
    fn forced_switch_restricts_support() {
        let mut f = fixture(2);
        for (which, support) in [(1usize, f.copy.source.clone()), (2, f.copy.refs.clone())] {
            let mut b = vec![0.0; 3];
            b[which] = 1e4;
            f.model.params.replace("dec.switch.b", Tensor::vector(b)).unwrap();
            let p = run(&f, 2);
            for (id, &pr) in p.iter().enumerate() {
                if !support.contains(&id) {
                    assert!(pr < 1e-300, "id {id} has mass {pr}");
                }
            }
        }
    }

    #[test]
    fn reference_only_tokens_vanish_without_reference_copy() {
        let mut f = fixture(2);
        let p = run(&f, 2);
        // y and z occur only in references
        assert!(p[11] > 0.0 && p[12] > 0.0);
        f.model.config.no_hier_copy = true;
        let p = run(&f, 2);
        assert_eq!((p[11], p[12]), (0.0, 0.0));
        assert!(p[10] > 0.0);
    }

    #[test]
    fn single_reference_single_word() {
        let tape = Tape::new();
        let f = fixture(1);
        let s = Session::inference(&tape, &f.model.params);
        let mut input = f.input.clone();
        input.refs = vec![vec![7]];
        let enc = encode(&s, &f.model, &input).unwrap();
        let mem = DecoderMemory::new(&s, &enc, &[1]).unwrap();
        let copy = CopyIndex {
            size: f.copy.size,
            source: f.copy.source.clone(),
            refs: vec![7],
        };
        let out = decode_step(&s, &f.model, &mem, &copy, 2, mem.init).unwrap();
        assert_eq!(out.a_ref.unwrap().value().data(), &[1.0]);
        assert_eq!(out.a_ref_words.unwrap().value().data(), &[1.0]);
    }
}
