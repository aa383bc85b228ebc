//! Flat `key = value` configuration covering every stage of the pipeline.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! duplicate keys are errors. `Config::to_text` emits every key in a fixed
//! order and parses back to an identical value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    One2One,
    One2Seq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrieverKind {
    Tfidf,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatActivation {
    Tanh,
    Elu,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", $what, " {:?}; expected one of: "), s
                    ) + &[$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Paradigm, "paradigm", "one2one" => Paradigm::One2One, "one2seq" => Paradigm::One2Seq);
keyword_enum!(RetrieverKind, "retriever", "tfidf" => RetrieverKind::Tfidf, "random" => RetrieverKind::Random);
keyword_enum!(GatActivation, "activation", "tanh" => GatActivation::Tanh, "elu" => GatActivation::Elu);

/// Preprocessing, retrieval and graph construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub vocab_cap: usize,
    pub num_refs: usize,
    pub num_keywords: usize,
    pub max_ref_tokens: usize,
    pub edge_buckets: usize,
    pub exclude_self: bool,
    pub retriever: RetrieverKind,
    /// Drop the retrieved document text from references.
    pub no_ref_docs: bool,
    /// Drop the retrieved documents' keyphrases from references.
    pub no_ref_keyphrases: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub edge_dim: usize,
    pub attn_heads: usize,
    pub graph_iters: usize,
    pub graph_dropout: f64,
    pub leaky_slope: f64,
    pub gat_activation: GatActivation,
    pub paper_literal_doc_vector: bool,
    pub paper_literal_copy: bool,
    pub no_w2d: bool,
    pub no_d2d: bool,
    pub no_hier_attn: bool,
    pub no_hier_copy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    /// `None` selects the paradigm default.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.paradigm {
            Paradigm::One2Seq => 12,
            Paradigm::One2One => 64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub beam_depth: usize,
    pub length_normalize: bool,
    pub max_decode_len: usize,
    pub pad_predictions: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig {
                vocab_cap: 50_000,
                num_refs: 3,
                num_keywords: 20,
                max_ref_tokens: 200,
                edge_buckets: 10,
                exclude_self: true,
                retriever: RetrieverKind::Tfidf,
                no_ref_docs: false,
                no_ref_keyphrases: false,
            },
            model: ModelConfig {
                emb_dim: 100,
                hidden_dim: 300,
                edge_dim: 50,
                attn_heads: 5,
                graph_iters: 2,
                graph_dropout: 0.3,
                leaky_slope: 0.2,
                gat_activation: GatActivation::Tanh,
                paper_literal_doc_vector: false,
                paper_literal_copy: false,
                no_w2d: false,
                no_d2d: false,
                no_hier_attn: false,
                no_hier_copy: false,
            },
            train: TrainConfig {
                paradigm: Paradigm::One2Seq,
                batch_size: None,
                learning_rate: 1e-3,
                clip_norm: 1.0,
                max_epochs: 20,
                patience: 3,
                seed: 1,
            },
            decode: DecodeConfig {
                beam_size: 16,
                beam_depth: 6,
                length_normalize: false,
                max_decode_len: 60,
                pad_predictions: false,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for key {key:?}; expected true or false"
        ))),
    }
}

impl Config {
    /// Every recognised key, in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "vocab_cap",
        "num_refs",
        "num_keywords",
        "max_ref_tokens",
        "edge_buckets",
        "exclude_self",
        "retriever",
        "no_ref_docs",
        "no_ref_keyphrases",
        "emb_dim",
        "hidden_dim",
        "edge_dim",
        "attn_heads",
        "graph_iters",
        "graph_dropout",
        "leaky_slope",
        "gat_activation",
        "paper_literal_doc_vector",
        "paper_literal_copy",
        "no_w2d",
        "no_d2d",
        "no_hier_attn",
        "no_hier_copy",
        "paradigm",
        "batch_size",
        "learning_rate",
        "clip_norm",
        "max_epochs",
        "patience",
        "seed",
        "beam_size",
        "beam_depth",
        "length_normalize",
        "max_decode_len",
        "pad_predictions",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (d, m, t, o) = (
            &mut self.data,
            &mut self.model,
            &mut self.train,
            &mut self.decode,
        );
        match key {
            "vocab_cap" => d.vocab_cap = parse(key, v)?,
            "num_refs" => d.num_refs = parse(key, v)?,
            "num_keywords" => d.num_keywords = parse(key, v)?,
            "max_ref_tokens" => d.max_ref_tokens = parse(key, v)?,
            "edge_buckets" => d.edge_buckets = parse(key, v)?,
            "exclude_self" => d.exclude_self = parse_bool(key, v)?,
            "retriever" => d.retriever = v.parse()?,
            "no_ref_docs" => d.no_ref_docs = parse_bool(key, v)?,
            "no_ref_keyphrases" => d.no_ref_keyphrases = parse_bool(key, v)?,
            "emb_dim" => m.emb_dim = parse(key, v)?,
            "hidden_dim" => m.hidden_dim = parse(key, v)?,
            "edge_dim" => m.edge_dim = parse(key, v)?,
            "attn_heads" => m.attn_heads = parse(key, v)?,
            "graph_iters" => m.graph_iters = parse(key, v)?,
            "graph_dropout" => m.graph_dropout = parse(key, v)?,
            "leaky_slope" => m.leaky_slope = parse(key, v)?,
            "gat_activation" => m.gat_activation = v.parse()?,
            "paper_literal_doc_vector" => m.paper_literal_doc_vector = parse_bool(key, v)?,
            "paper_literal_copy" => m.paper_literal_copy = parse_bool(key, v)?,
            "no_w2d" => m.no_w2d = parse_bool(key, v)?,
            "no_d2d" => m.no_d2d = parse_bool(key, v)?,
            "no_hier_attn" => m.no_hier_attn = parse_bool(key, v)?,
            "no_hier_copy" => m.no_hier_copy = parse_bool(key, v)?,
            "paradigm" => t.paradigm = v.parse()?,
            "batch_size" => {
                t.batch_size = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "beam_size" => o.beam_size = parse(key, v)?,
            "beam_depth" => o.beam_depth = parse(key, v)?,
            "length_normalize" => o.length_normalize = parse_bool(key, v)?,
            "max_decode_len" => o.max_decode_len = parse(key, v)?,
            "pad_predictions" => o.pad_predictions = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (d, m, t, o) = (&self.data, &self.model, &self.train, &self.decode);
        Some(match key {
            "vocab_cap" => d.vocab_cap.to_string(),
            "num_refs" => d.num_refs.to_string(),
            "num_keywords" => d.num_keywords.to_string(),
            "max_ref_tokens" => d.max_ref_tokens.to_string(),
            "edge_buckets" => d.edge_buckets.to_string(),
            "exclude_self" => d.exclude_self.to_string(),
            "retriever" => d.retriever.to_string(),
            "no_ref_docs" => d.no_ref_docs.to_string(),
            "no_ref_keyphrases" => d.no_ref_keyphrases.to_string(),
            "emb_dim" => m.emb_dim.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "edge_dim" => m.edge_dim.to_string(),
            "attn_heads" => m.attn_heads.to_string(),
            "graph_iters" => m.graph_iters.to_string(),
            "graph_dropout" => m.graph_dropout.to_string(),
            "leaky_slope" => m.leaky_slope.to_string(),
            "gat_activation" => m.gat_activation.to_string(),
            "paper_literal_doc_vector" => m.paper_literal_doc_vector.to_string(),
            "paper_literal_copy" => m.paper_literal_copy.to_string(),
            "no_w2d" => m.no_w2d.to_string(),
            "no_d2d" => m.no_d2d.to_string(),
            "no_hier_attn" => m.no_hier_attn.to_string(),
            "no_hier_copy" => m.no_hier_copy.to_string(),
            "paradigm" => t.paradigm.to_string(),
            "batch_size" => t
                .batch_size
                .map_or_else(|| "auto".to_string(), |b| b.to_string()),
            "learning_rate" => t.learning_rate.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "seed" => t.seed.to_string(),
            "beam_size" => o.beam_size.to_string(),
            "beam_depth" => o.beam_depth.to_string(),
            "length_normalize" => o.length_normalize.to_string(),
            "max_decode_len" => o.max_decode_len.to_string(),
            "pad_predictions" => o.pad_predictions.to_string(),
            _ => return None,
        })
    }

    /// Parses config text over the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn to_text(&self) -> String {
        Config::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        let m = &self.model;
        if m.hidden_dim == 0 || m.hidden_dim % 2 != 0 {
            return fail("hidden_dim must be a positive even number (split across two GRU directions)");
        }
        if m.emb_dim == 0 || m.edge_dim == 0 {
            return fail("emb_dim and edge_dim must be positive");
        }
        if m.attn_heads == 0 {
            return fail("attn_heads must be at least 1");
        }
        if m.graph_iters == 0 {
            return fail("graph_iters must be at least 1");
        }
        if !(0.0..1.0).contains(&m.graph_dropout) {
            return fail("graph_dropout must lie in [0, 1)");
        }
        if !m.leaky_slope.is_finite() {
            return fail("leaky_slope must be finite");
        }
        let d = &self.data;
        if d.num_keywords == 0 {
            return fail("num_keywords must be at least 1");
        }
        if d.edge_buckets == 0 {
            return fail("edge_buckets must be at least 1");
        }
        if d.max_ref_tokens == 0 {
            return fail("max_ref_tokens must be at least 1");
        }
        if d.num_refs > 0 && d.no_ref_docs && d.no_ref_keyphrases {
            return fail("no_ref_docs and no_ref_keyphrases together leave references empty; set num_refs = 0 instead");
        }
        let t = &self.train;
        if t.batch_size == Some(0) {
            return fail("batch_size must be at least 1");
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if !(t.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        let o = &self.decode;
        if o.beam_size == 0 || o.beam_depth == 0 || o.max_decode_len == 0 {
            return fail("beam_size, beam_depth and max_decode_len must be at least 1");
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}
