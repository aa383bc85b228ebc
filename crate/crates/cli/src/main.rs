use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gater::config::RetrieverKind;
use gater::corpus::{dedup_corpus, read_corpus, write_corpus, Document, Vocabulary};
use gater::evaluation::{read_predictions, score, write_predictions, ScoreOptions};
use gater::retrieval::{read_retrievals, transforming_rate, write_retrievals, RetrievalRecord, TfIdfIndex};
use gater::runtime::{predict, train, Checkpoint, Example, ReferenceSource};
use gater::Config;

#[derive(Parser)]
#[command(name = "gater", version, about = "Reference-augmented keyphrase generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and deduplicate a raw corpus, then build its vocabulary.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Output directory for corpus.jsonl and vocab.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the TF-IDF index over a preprocessed corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve references for every query document.
    Retrieve {
        #[command(flatten)]
        refs: RefArgs,
        /// Query documents.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[command(flatten)]
        refs: RefArgs,
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus for model selection; the training loss is used without one.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Precomputed retrievals for the training documents.
        #[arg(long)]
        train_refs: Option<PathBuf>,
        #[arg(long)]
        valid_refs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate keyphrases with a trained checkpoint.
    Predict {
        #[command(flatten)]
        refs: RefArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Precomputed retrievals for the input documents.
        #[arg(long)]
        input_refs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold keyphrases.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Machine-readable JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transforming rate of retrieved references by retriever and K.
    AnalyzeRefs {
        #[command(flatten)]
        refs: RefArgs,
        /// Documents whose absent keyphrases are looked up.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        ks: Vec<usize>,
        /// JSON table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// The retrieval index and the corpus it was built from.
#[derive(Args)]
struct RefArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    index_corpus: PathBuf,
}

fn load_config(g: &Global, base: Option<Config>) -> Result<Config> {
    let mut cfg = match (&g.config, base) {
        (Some(p), Some(mut base)) => {
            // a checkpoint fixes the model; only decoding is taken from the file
            base.decode = Config::load(p).with_context(|| format!("loading config {}", p.display()))?.decode;
            base
        }
        (Some(p), None) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        (None, Some(base)) => base,
        (None, None) => Config::default(),
    };
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_docs(path: &Path) -> Result<Vec<Document>> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_index(path: &Path) -> Result<TfIdfIndex> {
    TfIdfIndex::load(path).with_context(|| {
        format!("loading index {} (build it with `gater build-index`)", path.display())
    })
}

/// Builds examples, reading hits from `hits_path` when given and
/// retrieving on the fly otherwise.
fn build_examples(
    docs: &[Document],
    source: &ReferenceSource<'_>,
    hits_path: Option<&Path>,
    vocab: &Vocabulary,
    cfg: &Config,
) -> Result<Vec<Example>> {
    let stored: Option<HashMap<String, RetrievalRecord>> = match hits_path {
        Some(p) => Some(
            read_retrievals(p)
                .with_context(|| format!("reading retrievals {}", p.display()))?
                .into_iter()
                .map(|r| (r.query_id.clone(), r))
                .collect(),
        ),
        None => None,
    };
    docs.iter()
        .map(|d| {
            let refs = match &stored {
                Some(map) => {
                    let rec = map.get(&d.id).ok_or_else(|| {
                        anyhow!("retrieval file has no entry for document {:?}; rerun `gater retrieve`", d.id)
                    })?;
                    let hits: Vec<_> = rec.refs.iter().take(cfg.data.num_refs).cloned().collect();
                    source.materialize(&hits)
                }
                None => source.references(d, cfg.data.exclude_self)?,
            };
            Ok(Example::new(d.clone(), refs, source.index(), vocab, &cfg.data)?)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { input, out } => {
            let cfg = load_config(&cli.global, None)?;
            let docs = dedup_corpus(load_docs(&input)?);
            if docs.is_empty() {
                bail!("{} contains no documents", input.display());
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let vocab = Vocabulary::build(&docs, cfg.data.vocab_cap)?;
            write_corpus(out.join("corpus.jsonl"), &docs)?;
            vocab.save(out.join("vocab.txt"))?;
            eprintln!("{} documents, vocabulary of {}", docs.len(), vocab.len());
        }
        Command::BuildIndex { corpus, out } => {
            let docs = load_docs(&corpus)?;
            let index = TfIdfIndex::build(&docs)?;
            index.save(&out)?;
            eprintln!("indexed {} documents, {} grams", index.len(), index.num_grams());
        }
        Command::Retrieve { refs, queries, out } => {
            let cfg = load_config(&cli.global, None)?;
            let index = load_index(&refs.index)?;
            let corpus = load_docs(&refs.index_corpus)?;
            let source = ReferenceSource::new(&index, &corpus, &cfg)?;
            let records = load_docs(&queries)?
                .iter()
                .map(|d| {
                    Ok(RetrievalRecord {
                        query_id: d.id.clone(),
                        refs: source.hits(d, cfg.data.exclude_self)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_retrievals(&out, &records)?;
        }
        Command::Train {
            refs,
            train: train_path,
            valid,
            vocab,
            train_refs,
            valid_refs,
            out,
        } => {
            let cfg = load_config(&cli.global, None)?;
            let vocab = Vocabulary::load(&vocab)
                .with_context(|| format!("loading vocabulary {} (run `gater preprocess`)", vocab.display()))?;
            let index = load_index(&refs.index)?;
            let corpus = load_docs(&refs.index_corpus)?;
            let source = ReferenceSource::new(&index, &corpus, &cfg)?;
            let train_docs = load_docs(&train_path)?;
            let train_ex = build_examples(&train_docs, &source, train_refs.as_deref(), &vocab, &cfg)?;
            let valid_ex = match &valid {
                Some(p) => build_examples(&load_docs(p)?, &source, valid_refs.as_deref(), &vocab, &cfg)?,
                None => Vec::new(),
            };
            let outcome = train(&cfg, &vocab, &train_ex, &valid_ex, |l| {
                eprintln!(
                    "epoch {:>3}  train {:.4}  valid {:.4}  grad {:.3}{}",
                    l.epoch,
                    l.train_loss,
                    l.valid_loss,
                    l.grad_norm,
                    if l.improved { "  *" } else { "" }
                )
            })?;
            outcome.checkpoint.save(&out)?;
            eprintln!(
                "saved epoch {} (valid loss {:.4}) to {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.valid_loss,
                out.display()
            );
        }
        Command::Predict {
            refs,
            checkpoint,
            input,
            input_refs,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let cfg = load_config(&cli.global, Some(ck.config.clone()))?;
            let model = gater::model::Model::from_params(
                cfg.model.clone(),
                ck.vocab.len(),
                cfg.data.edge_buckets,
                ck.params.clone(),
            )
            .context("the overridden configuration does not match the checkpoint's parameters")?;
            let index = load_index(&refs.index)?;
            let corpus = load_docs(&refs.index_corpus)?;
            let source = ReferenceSource::new(&index, &corpus, &cfg)?;
            let docs = load_docs(&input)?;
            let examples = build_examples(&docs, &source, input_refs.as_deref(), &ck.vocab, &cfg)?;
            let preds = examples
                .iter()
                .map(|ex| predict(&model, ex, &ck.vocab, &cfg))
                .collect::<gater::Result<Vec<_>>>()?;
            write_predictions(&out, &preds)?;
        }
        Command::Evaluate { predictions, gold, out } => {
            let cfg = load_config(&cli.global, None)?;
            let preds = read_predictions(&predictions)
                .with_context(|| format!("reading predictions {}", predictions.display()))?;
            let gold = load_docs(&gold)?;
            let report = score(
                &preds,
                &gold,
                ScoreOptions {
                    pad_predictions: cfg.decode.pad_predictions,
                },
            );
            print!("{report}");
            for e in report.errors() {
                eprintln!("warning: {}: {}", e.doc_id, e.error.as_deref().unwrap_or_default());
            }
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::AnalyzeRefs { refs, queries, ks, out } => {
            let cfg = load_config(&cli.global, None)?;
            let index = load_index(&refs.index)?;
            let corpus = load_docs(&refs.index_corpus)?;
            let docs = load_docs(&queries)?;
            let mut rows = Vec::new();
            println!("{:<9} {:>3} {:>10}", "retriever", "K", "rate");
            for kind in [RetrieverKind::Tfidf, RetrieverKind::Random] {
                for &k in &ks {
                    let mut c = cfg.clone();
                    c.data.retriever = kind;
                    c.data.num_refs = k;
                    let source = ReferenceSource::new(&index, &corpus, &c)?;
                    let refs = docs
                        .iter()
                        .map(|d| source.references(d, c.data.exclude_self))
                        .collect::<gater::Result<Vec<_>>>()?;
                    let rate = transforming_rate(&docs, &refs);
                    println!("{:<9} {:>3} {:>10.4}", kind.to_string(), k, rate);
                    rows.push(serde_json::json!({"retriever": kind.to_string(), "k": k, "rate": rate}));
                }
            }
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&rows)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
