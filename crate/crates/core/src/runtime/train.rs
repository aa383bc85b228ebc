//! Mini-batch training with validation-based model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, Paradigm};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{mix, Model, Session};

use super::checkpoint::Checkpoint;
use super::optim::{clip_global_norm, Adam, Gradients};
use super::{one2one_loss, one2seq_loss, Example};

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-document loss over the epoch's batches.
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Mean pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

pub fn example_loss<'t>(
    s: &Session<'t>,
    model: &Model,
    ex: &Example,
    vocab: &Vocabulary,
    paradigm: Paradigm,
) -> Result<Var<'t>> {
    match paradigm {
        Paradigm::One2One => one2one_loss(s, model, ex, vocab),
        Paradigm::One2Seq => one2seq_loss(s, model, ex, vocab),
    }
}

/// Mean per-document loss without dropout. Documents without keyphrases
/// are skipped; an empty set scores 0.
pub fn evaluate_loss(model: &Model, examples: &[Example], vocab: &Vocabulary, paradigm: Paradigm) -> Result<f64> {
    let usable: Vec<&Example> = examples.iter().filter(|e| !e.doc.keyphrases.is_empty()).collect();
    if usable.is_empty() {
        return Ok(0.0);
    }
    let losses = usable
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let s = Session::inference(&tape, &model.params);
            Ok(example_loss(&s, model, ex, vocab, paradigm)?.item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and gradients of one document on its own tape.
fn document_gradients(
    model: &Model,
    ex: &Example,
    vocab: &Vocabulary,
    paradigm: Paradigm,
    seed: u64,
) -> Result<(f64, Gradients)> {
    let tape = Tape::new();
    let s = Session::training(&tape, &model.params, true, seed);
    let loss = example_loss(&s, model, ex, vocab, paradigm)?;
    tape.backward(loss)?;
    Ok((loss.item(), s.gradients()))
}

/// Mean loss and mean gradients of a batch. Documents run in parallel but
/// are reduced in batch order, so results do not depend on thread count.
fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    vocab: &Vocabulary,
    paradigm: Paradigm,
    seed: u64,
) -> Result<(f64, Gradients)> {
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| document_gradients(model, ex, vocab, paradigm, mix(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut total = 0.0;
    let mut sum = Gradients::new();
    for (loss, grads) in parts {
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, sum))
}

/// Trains a freshly initialised model. When `valid` has no usable
/// documents, selection and early stopping use the training loss.
/// `on_epoch` sees every epoch's log as soon as it is complete.
pub fn train(
    config: &Config,
    vocab: &Vocabulary,
    train: &[Example],
    valid: &[Example],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let paradigm = tc.paradigm;
    let mut docs: Vec<&Example> = train.iter().filter(|e| !e.doc.keyphrases.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Input("no training documents with keyphrases".into()));
    }
    let has_valid = valid.iter().any(|e| !e.doc.keyphrases.is_empty());
    let mut model = Model::new(config.model.clone(), vocab.len(), config.data.edge_buckets, tc.seed)?;
    let mut adam = Adam::new(&model.params, tc.learning_rate);
    let batch_size = tc.effective_batch_size();

    let initial = if has_valid {
        evaluate_loss(&model, valid, vocab, paradigm)?
    } else {
        f64::INFINITY
    };
    let mut best = Checkpoint {
        config: config.clone(),
        vocab: vocab.clone(),
        params: model.params.clone(),
        optimizer: adam.state.clone(),
        epoch: 0,
        valid_loss: initial,
    };
    let mut history = Vec::new();
    let mut stale = 0;
    let mut step: u64 = 0;
    for epoch in 1..=tc.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(tc.seed, epoch as u64));
        docs.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in docs.chunks(batch_size) {
            step += 1;
            let (loss, mut grads) = batch_gradients(&model, batch, vocab, paradigm, mix(tc.seed ^ 0x5eed, step))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            norm_sum += clip_global_norm(&mut grads, tc.clip_norm);
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let valid_loss = if has_valid {
            evaluate_loss(&model, valid, vocab, paradigm)?
        } else {
            train_loss
        };
        if !valid_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: valid_loss });
        }
        let improved = valid_loss < best.valid_loss;
        if improved {
            best.params = model.params.clone();
            best.optimizer = adam.state.clone();
            best.epoch = epoch as u64;
            best.valid_loss = valid_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss,
            valid_loss,
            grad_norm: norm_sum / batches as f64,
            improved,
        };
        on_epoch(&log);
        history.push(log);
        if tc.patience > 0 && stale >= tc.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.model()?,
        checkpoint: best,
        history,
    })
}
