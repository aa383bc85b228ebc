//! Parameter layout of the full keyphrase model and the layers it is built
//! from.

pub mod nn;
mod params;

pub use params::{ParamStore, Session};
pub(crate) use params::{init_tensor, mix};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Graph layers, one per update sub-step; weights are shared across
/// iterations.
pub const GRAPH_LAYERS: [&str; 3] = ["word_from_doc", "doc_from_word", "doc_from_doc"];

/// Decoder attention scorers.
pub const ATTENTION_SCORERS: [&str; 3] = ["dec.attn_src", "dec.attn_ref", "dec.attn_ref_word"];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub edge_buckets: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, edge_buckets: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, shape) in Model::param_shapes(&config, vocab_size, edge_buckets)? {
            let t = init_tensor(&name, &shape, seed);
            params.insert(name, t);
        }
        Ok(Model {
            config,
            vocab_size,
            edge_buckets,
            params,
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        vocab_size: usize,
        edge_buckets: usize,
        params: ParamStore,
    ) -> Result<Self> {
        let expected = Model::param_shapes(&config, vocab_size, edge_buckets)?;
        if expected.len() != params.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model {
            config,
            vocab_size,
            edge_buckets,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        head_dim(&self.config)
    }

    pub fn param_shapes(
        config: &ModelConfig,
        vocab_size: usize,
        edge_buckets: usize,
    ) -> Result<Vec<(String, Vec<usize>)>> {
        let (de, dh, dedge) = (config.emb_dim, config.hidden_dim, config.edge_dim);
        if dh == 0 || dh % 2 != 0 {
            return Err(Error::Config(format!("hidden_dim must be even and positive, got {dh}")));
        }
        if vocab_size < crate::corpus::SPECIALS.len() || edge_buckets == 0 || config.attn_heads == 0 {
            return Err(Error::Config(
                "vocabulary, bucket count and head count must be non-empty".into(),
            ));
        }
        let hd = head_dim(config);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
        let gru = |add: &mut dyn FnMut(String, Vec<usize>), p: &str, input: usize, hidden: usize| {
            add(format!("{p}.w_ih"), vec![input, 3 * hidden]);
            add(format!("{p}.w_hh"), vec![hidden, 3 * hidden]);
            add(format!("{p}.b_ih"), vec![3 * hidden]);
            add(format!("{p}.b_hh"), vec![3 * hidden]);
        };

        add("embedding".into(), vec![vocab_size, de]);
        gru(&mut add, "enc.fwd", de, dh / 2);
        gru(&mut add, "enc.bwd", de, dh / 2);

        add("graph.keyword.w".into(), vec![de, dh]);
        add("graph.keyword.b".into(), vec![dh]);
        add("graph.edge_w2d".into(), vec![edge_buckets, dedge]);
        // last row is the self-loop edge
        add("graph.edge_d2d".into(), vec![edge_buckets + 1, dedge]);
        for layer in GRAPH_LAYERS {
            for h in 0..config.attn_heads {
                let p = format!("graph.{layer}.head{h}");
                add(format!("{p}.w_q"), vec![dh, hd]);
                add(format!("{p}.a_q"), vec![hd, 1]);
                add(format!("{p}.w_k"), vec![dh, hd]);
                add(format!("{p}.a_k"), vec![hd, 1]);
                add(format!("{p}.a_e"), vec![dedge, 1]);
                add(format!("{p}.w_v"), vec![dh, hd]);
            }
            add(format!("graph.{layer}.w_o"), vec![config.attn_heads * hd, dh]);
            add(format!("graph.{layer}.ffn1.w"), vec![dh, 2 * dh]);
            add(format!("graph.{layer}.ffn1.b"), vec![2 * dh]);
            add(format!("graph.{layer}.ffn2.w"), vec![2 * dh, dh]);
            add(format!("graph.{layer}.ffn2.b"), vec![dh]);
        }

        gru(&mut add, "dec.gru", de, dh);
        for p in ATTENTION_SCORERS {
            add(format!("{p}.w_key"), vec![dh, dh]);
            add(format!("{p}.w_query"), vec![dh, dh]);
            add(format!("{p}.b"), vec![dh]);
            add(format!("{p}.v"), vec![dh, 1]);
        }
        add("dec.gate.w".into(), vec![2 * dh, 1]);
        add("dec.combine.w".into(), vec![2 * dh, dh]);
        add("dec.out.w".into(), vec![2 * dh, vocab_size]);
        add("dec.out.b".into(), vec![vocab_size]);
        add("dec.switch.w".into(), vec![2 * dh + de, 3]);
        add("dec.switch.b".into(), vec![3]);
        Ok(out)
    }
}

/// Per-head width: `ceil(d_h / heads)`.
pub fn head_dim(config: &ModelConfig) -> usize {
    config.hidden_dim.div_ceil(config.attn_heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny() -> ModelConfig {
        let mut c = Config::default().model;
        c.emb_dim = 4;
        c.hidden_dim = 6;
        c.edge_dim = 3;
        c
    }

    #[test]
    fn names_are_unique_and_shapes_consistent() {
        let shapes = Model::param_shapes(&tiny(), 20, 10).unwrap();
        let names: std::collections::BTreeSet<_> = shapes.iter().map(|s| &s.0).collect();
        assert_eq!(names.len(), shapes.len());
        let m = Model::new(tiny(), 20, 10, 3).unwrap();
        assert_eq!(m.params.len(), shapes.len());
        assert_eq!(m.head_dim(), 2);
        assert_eq!(m.params.get("graph.doc_from_doc.w_o").unwrap().shape(), &[10, 6]);
        assert_eq!(m.params.get("graph.edge_d2d").unwrap().shape(), &[11, 3]);
    }

    #[test]
    fn from_params_rejects_mismatch() {
        let m = Model::new(tiny(), 20, 10, 3).unwrap();
        Model::from_params(tiny(), 20, 10, m.params.clone()).unwrap();
        assert!(Model::from_params(tiny(), 21, 10, m.params.clone()).is_err());
        let mut p = m.params.clone();
        p.insert("extra", crate::autodiff::Tensor::zeros(&[1]));
        assert!(Model::from_params(tiny(), 20, 10, p).is_err());
    }

    #[test]
    fn odd_hidden_is_rejected() {
        let mut c = tiny();
        c.hidden_dim = 5;
        assert!(Model::new(c, 20, 10, 0).is_err());
    }
}
