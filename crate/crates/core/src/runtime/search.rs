//! Greedy and beam search over any step-wise scorer, and their use for
//! keyphrase prediction.

use std::sync::Arc;

use crate::autodiff::{Tape, Tensor};
use crate::config::{Config, Paradigm};
use crate::corpus::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};
use crate::decoder::{decode_step, CopyIndex, DecoderMemory, MemoryValues};
use crate::encoder::encode;
use crate::error::Result;
use crate::evaluation::{stem_tokens, Prediction};
use crate::model::{Model, Session};

use super::Example;

/// A left-to-right scorer: given a state and the previous token, returns
/// log-probabilities over the next token and the next state.
pub trait StepModel {
    type State: Clone;

    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including the final EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.tokens.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub max_depth: usize,
    pub bos: usize,
    pub eos: usize,
    pub length_normalize: bool,
}

struct Alive<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search in which every hypothesis ends at EOS or at `max_depth`.
///
/// At each depth the expansions of all live hypotheses compete for
/// `beam_size` slots; expansions ending in EOS leave the beam as finished
/// hypotheses but still consume a slot. Candidates tie-break on the
/// hypothesis's position then the token id. The result holds every
/// finished hypothesis, best first.
pub fn beam_search<M: StepModel>(model: &M, init: M::State, opts: BeamOptions) -> Result<Vec<Hypothesis>> {
    let mut alive = vec![Alive {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: init,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for depth in 0..opts.max_depth {
        if alive.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(alive.len());
        for (i, a) in alive.iter().enumerate() {
            let prev = *a.hyp.tokens.last().unwrap_or(&opts.bos);
            let (logp, state) = model.step(&a.state, prev)?;
            next_states.push(state);
            let mut local: Vec<(f64, usize, usize)> = logp
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_finite())
                .map(|(tok, &l)| (a.hyp.log_prob + l, i, tok))
                .collect();
            if local.len() > opts.beam_size {
                local.select_nth_unstable_by(opts.beam_size - 1, cmp_candidate);
                local.truncate(opts.beam_size);
            }
            cands.extend(local);
        }
        cands.sort_by(cmp_candidate);
        cands.truncate(opts.beam_size);
        let last_depth = depth + 1 == opts.max_depth;
        let mut next = Vec::new();
        for (log_prob, i, tok) in cands {
            let mut tokens = alive[i].hyp.tokens.clone();
            tokens.push(tok);
            let done = tok == opts.eos;
            let hyp = Hypothesis {
                tokens,
                log_prob,
                finished: done,
            };
            if done || last_depth {
                finished.push(hyp);
            } else {
                next.push(Alive {
                    hyp,
                    state: next_states[i].clone(),
                });
            }
        }
        alive = next;
    }
    finished.sort_by(|a, b| {
        b.score(opts.length_normalize)
            .partial_cmp(&a.score(opts.length_normalize))
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(finished)
}

fn cmp_candidate(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap()
        .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
}

/// Argmax decoding until EOS or `max_len` tokens. Returns the tokens
/// (with EOS if produced) and each token's log-probability.
pub fn greedy_search<M: StepModel>(
    model: &M,
    init: M::State,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (mut state, mut prev) = (init, bos);
    let (mut tokens, mut scores) = (Vec::new(), Vec::new());
    for _ in 0..max_len {
        let (logp, next) = model.step(&state, prev)?;
        let (tok, &l) = logp
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        tokens.push(tok);
        scores.push(l);
        if tok == eos {
            break;
        }
        state = next;
        prev = tok;
    }
    Ok((tokens, scores))
}

/// The trained decoder as a [`StepModel`]. Each step runs on a fresh
/// forward-only tape against the detached encoder memory.
pub struct ModelStepper<'a> {
    pub model: &'a Model,
    pub memory: MemoryValues,
    pub copy: &'a CopyIndex,
}

impl<'a> ModelStepper<'a> {
    pub fn new(model: &'a Model, ex: &'a Example) -> Result<Self> {
        let tape = Tape::new();
        let s = Session::inference(&tape, &model.params);
        let enc = encode(&s, model, &ex.input)?;
        let memory = DecoderMemory::new(&s, &enc, &ex.ref_lengths)?.values();
        Ok(ModelStepper {
            model,
            memory,
            copy: &ex.copy,
        })
    }

    pub fn initial_state(&self) -> Arc<Tensor> {
        self.memory.init.clone()
    }
}

impl StepModel for ModelStepper<'_> {
    type State = Arc<Tensor>;

    fn step(&self, state: &Arc<Tensor>, prev: usize) -> Result<(Vec<f64>, Arc<Tensor>)> {
        let tape = Tape::new();
        let s = Session::inference(&tape, &self.model.params);
        let mem = self.memory.attach(&s);
        let h = tape.shared(state.clone());
        let out = decode_step(&s, self.model, &mem, self.copy, prev, h)?;
        let logp = out.dist.value().data().iter().map(|p| p.ln()).collect();
        Ok((logp, out.hidden.value()))
    }
}

/// A predicted keyphrase with its log-probability score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPhrase {
    pub tokens: Vec<String>,
    pub score: f64,
}

fn usable(ids: &[usize]) -> bool {
    !ids.is_empty()
        && !ids
            .iter()
            .any(|&t| matches!(t, PAD_ID | BOS_ID | UNK_ID | SEP_ID | EOS_ID))
}

/// Keeps the first phrase of each stem sequence.
fn dedup_scored(phrases: Vec<ScoredPhrase>) -> Vec<ScoredPhrase> {
    let mut seen = std::collections::HashSet::new();
    phrases
        .into_iter()
        .filter(|p| seen.insert(stem_tokens(&p.tokens)))
        .collect()
}

/// Greedy decoding of a separator-joined keyphrase sequence. Segments are
/// scored by the sum of their token log-probabilities.
pub fn greedy_decode(model: &Model, ex: &Example, vocab: &Vocabulary, max_len: usize) -> Result<Vec<ScoredPhrase>> {
    let stepper = ModelStepper::new(model, ex)?;
    let (tokens, scores) = greedy_search(&stepper, stepper.initial_state(), BOS_ID, EOS_ID, max_len)?;
    let mut phrases = Vec::new();
    let (mut cur, mut score) = (Vec::new(), 0.0);
    for (&t, &l) in tokens.iter().zip(&scores) {
        if t == SEP_ID || t == EOS_ID {
            if usable(&cur) {
                phrases.push(to_phrase(&cur, score, ex, vocab));
            }
            cur.clear();
            score = 0.0;
            if t == EOS_ID {
                break;
            }
        } else {
            cur.push(t);
            score += l;
        }
    }
    if usable(&cur) {
        phrases.push(to_phrase(&cur, score, ex, vocab));
    }
    Ok(dedup_scored(phrases))
}

fn to_phrase(ids: &[usize], score: f64, ex: &Example, vocab: &Vocabulary) -> ScoredPhrase {
    ScoredPhrase {
        tokens: ids.iter().map(|&i| ex.dvocab.token(i, vocab).to_string()).collect(),
        score,
    }
}

/// Beam search for one keyphrase per hypothesis, ranked by score and
/// deduplicated after stemming.
pub fn beam_decode(
    model: &Model,
    ex: &Example,
    vocab: &Vocabulary,
    beam_size: usize,
    max_depth: usize,
    length_normalize: bool,
) -> Result<Vec<ScoredPhrase>> {
    let stepper = ModelStepper::new(model, ex)?;
    let opts = BeamOptions {
        beam_size,
        max_depth,
        bos: BOS_ID,
        eos: EOS_ID,
        length_normalize,
    };
    let hyps = beam_search(&stepper, stepper.initial_state(), opts)?;
    let phrases = hyps
        .into_iter()
        .filter_map(|h| {
            let ids: &[usize] = if h.finished {
                &h.tokens[..h.tokens.len() - 1]
            } else {
                &h.tokens
            };
            usable(ids).then(|| to_phrase(ids, h.score(length_normalize), ex, vocab))
        })
        .collect();
    Ok(dedup_scored(phrases))
}

/// Decodes with the configured paradigm: greedy for One2Seq, beam search
/// for One2One.
pub fn predict(model: &Model, ex: &Example, vocab: &Vocabulary, config: &Config) -> Result<Prediction> {
    let d = &config.decode;
    let phrases = match config.train.paradigm {
        Paradigm::One2Seq => greedy_decode(model, ex, vocab, d.max_decode_len)?,
        Paradigm::One2One => beam_decode(model, ex, vocab, d.beam_size, d.beam_depth, d.length_normalize)?,
    };
    Ok(Prediction {
        doc_id: ex.doc.id.clone(),
        keyphrases: phrases.iter().map(|p| p.tokens.join(" ")).collect(),
        scores: phrases.iter().map(|p| p.score).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First-order Markov chain over a tiny vocabulary.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        type State = ();
        fn step(&self, _: &(), prev: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.0[prev].iter().map(|p: &f64| p.ln()).collect(), ()))
        }
    }

    // tokens: 0 = eos, 1 = bos, 2 = a, 3 = b
    fn table() -> Table {
        Table(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.1, 0.0, 0.5, 0.4],
            vec![0.3, 0.0, 0.2, 0.5],
            vec![0.6, 0.0, 0.3, 0.1],
        ])
    }

    fn opts(beam: usize, depth: usize) -> BeamOptions {
        BeamOptions {
            beam_size: beam,
            max_depth: depth,
            bos: 1,
            eos: 0,
            length_normalize: false,
        }
    }

    fn exhaustive(t: &Table, depth: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut stack = vec![(vec![], 0.0f64)];
        while let Some((seq, lp)) = stack.pop() {
            let prev = *seq.last().unwrap_or(&1);
            for tok in 0..4 {
                let p = t.0[prev][tok];
                if p == 0.0 {
                    continue;
                }
                let mut s = seq.clone();
                s.push(tok);
                let l = lp + p.ln();
                if tok == 0 || s.len() == depth {
                    out.push(Hypothesis {
                        tokens: s,
                        log_prob: l,
                        finished: tok == 0,
                    });
                } else {
                    stack.push((s, l));
                }
            }
        }
        out.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap().then_with(|| a.tokens.cmp(&b.tokens)));
        out
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        let t = table();
        for depth in 1..=3 {
            let got = beam_search(&t, (), opts(64, depth)).unwrap();
            let want = exhaustive(&t, depth);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.tokens, w.tokens);
                assert_eq!(g.finished, w.finished);
                assert!((g.log_prob - w.log_prob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_beam_is_greedy() {
        let t = table();
        let beam = beam_search(&t, (), opts(1, 6)).unwrap();
        let (greedy, _) = greedy_search(&t, (), 1, 0, 6).unwrap();
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].tokens, greedy);
        assert_eq!(greedy, vec![2, 3, 0]);
    }

    #[test]
    fn ranking_is_by_total_log_probability() {
        let t = table();
        let hyps = beam_search(&t, (), opts(4, 3)).unwrap();
        assert!(hyps.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        // log-probability never increases along a hypothesis
        for h in &hyps {
            let mut prev = 1;
            let mut acc = 0.0;
            for &tok in &h.tokens {
                let next = acc + t.0[prev][tok].ln();
                assert!(next <= acc);
                acc = next;
                prev = tok;
            }
        }
    }

    #[test]
    fn greedy_stops_at_eos_or_length() {
        let t = Table(vec![vec![1.0, 0.0], vec![0.9, 0.1]]);
        let (toks, scores) = greedy_search(&t, (), 1, 0, 5).unwrap();
        assert_eq!(toks, vec![0]);
        assert!((scores[0] - 0.9f64.ln()).abs() < 1e-15);
        let t = table();
        let (toks, _) = greedy_search(&t, (), 1, 0, 2).unwrap();
        assert_eq!(toks, vec![2, 3]);
    }
}
