//! Self-contained binary checkpoints: configuration, vocabulary, parameters
//! and optimizer moments.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::binio::{Reader, Writer};
use crate::config::Config;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};

use super::optim::AdamState;

const MAGIC: &[u8; 8] = b"GTRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: AdamState,
    /// Epoch (1-based) that produced these parameters; 0 before training.
    pub epoch: u64,
    pub valid_loss: f64,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(
            self.config.model.clone(),
            self.vocab.len(),
            self.config.data.edge_buckets,
            self.params.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.u64(self.vocab.len() as u64);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        w.u64(self.epoch);
        w.f64(self.valid_loss);
        w.u64(self.optimizer.step);
        w.u64(self.params.len() as u64);
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            let m = self.optimizer.m.get(name).cloned().unwrap_or_else(|| zeros(t));
            let v = self.optimizer.v.get(name).cloned().unwrap_or_else(|| zeros(t));
            for x in t.data().iter().chain(m.data()).chain(v.data()) {
                w.f64(*x);
            }
        }
        w.buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&data, path)
    }

    /// `path` only labels errors.
    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(r.fail("not a checkpoint file (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!(
                "checkpoint format version {version} is not supported by this build \
                 (expects version {CHECKPOINT_VERSION}); retrain or use a matching release"
            )));
        }
        let config = Config::parse(&r.str()?).map_err(|e| r.fail(format!("embedded config: {e}")))?;
        let n_vocab = r.u64()? as usize;
        let tokens = (0..n_vocab).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| r.fail(format!("embedded vocabulary: {e}")))?;
        let epoch = r.u64()?;
        let valid_loss = r.f64()?;
        let mut optimizer = AdamState {
            step: r.u64()?,
            ..AdamState::default()
        };
        let n_params = r.u64()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut read = || -> Result<Tensor> {
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Tensor::new(shape.clone(), data)
            };
            let (p, m, v) = (read()?, read()?, read()?);
            if params.get(&name).is_some() {
                return Err(r.fail(format!("duplicate parameter {name:?}")));
            }
            params.insert(name.clone(), p);
            optimizer.m.insert(name.clone(), m);
            optimizer.v.insert(name, v);
        }
        r.finish()?;
        let ck = Checkpoint {
            config,
            vocab,
            params,
            optimizer,
            epoch,
            valid_loss,
        };
        ck.model().map_err(|e| r.fail(e.to_string()))?;
        Ok(ck)
    }
}
