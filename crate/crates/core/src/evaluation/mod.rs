//! Stemmed keyphrase matching and macro-averaged F1@k / F1@M / R@k.
//!
//! Predictions are compared with gold keyphrases after Porter stemming every
//! token; duplicates (after stemming) are removed before scoring. Predictions
//! are never padded to `k` unless [`ScoreOptions::pad_predictions`] is set.

mod porter;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{find_subsequence, tokenize, Document};
use crate::error::{Error, Result};

pub use porter::porter_stem;

pub fn stem_tokens(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| porter_stem(t)).collect()
}

/// Keeps the first phrase of each stemmed form, preserving order.
pub fn dedup_after_stem(phrases: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut seen = HashSet::new();
    phrases
        .iter()
        .filter(|p| seen.insert(stem_tokens(p)))
        .cloned()
        .collect()
}

/// Each gold phrase is matched at most once, so repeated predictions
/// cannot push precision or recall past 1.
fn matches_in_top(preds: &[Vec<String>], gold: &[Vec<String>], k: usize) -> usize {
    let mut unmatched: HashMap<Vec<String>, usize> = HashMap::new();
    for g in gold {
        *unmatched.entry(stem_tokens(g)).or_insert(0) += 1;
    }
    preds
        .iter()
        .take(k)
        .filter(|p| match unmatched.get_mut(&stem_tokens(p)) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 over the top `min(k, |preds|)` predictions. Returns 0 when `gold` is
/// empty; callers exclude such documents from macro averages.
pub fn f1_at_k(preds: &[Vec<String>], gold: &[Vec<String>], k: usize) -> f64 {
    f1_impl(preds, gold, k, false)
}

/// F1 as if predictions were padded with wrong answers up to `k`.
pub fn f1_at_k_padded(preds: &[Vec<String>], gold: &[Vec<String>], k: usize) -> f64 {
    f1_impl(preds, gold, k, true)
}

fn f1_impl(preds: &[Vec<String>], gold: &[Vec<String>], k: usize, pad: bool) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let considered = if pad { k } else { k.min(preds.len()) };
    if considered == 0 {
        return 0.0;
    }
    let hits = matches_in_top(preds, gold, k) as f64;
    harmonic(hits / considered as f64, hits / gold.len() as f64)
}

/// F1 over all predictions.
pub fn f1_at_m(preds: &[Vec<String>], gold: &[Vec<String>]) -> f64 {
    f1_at_k(preds, gold, preds.len())
}

pub fn recall_at_k(preds: &[Vec<String>], gold: &[Vec<String>], k: usize) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    matches_in_top(preds, gold, k) as f64 / gold.len() as f64
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub keyphrases: Vec<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreOptions {
    pub pad_predictions: bool,
}

/// Scores of one document for one keyphrase class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub f1_at_5: f64,
    pub f1_at_10: f64,
    pub f1_at_m: f64,
    pub r_at_10: f64,
    pub r_at_50: f64,
}

impl MetricRow {
    pub fn compute(preds: &[Vec<String>], gold: &[Vec<String>], opts: ScoreOptions) -> Self {
        let f1 = |k| {
            if opts.pad_predictions {
                f1_at_k_padded(preds, gold, k)
            } else {
                f1_at_k(preds, gold, k)
            }
        };
        MetricRow {
            f1_at_5: f1(5),
            f1_at_10: f1(10),
            f1_at_m: f1_at_m(preds, gold),
            r_at_10: recall_at_k(preds, gold, 10),
            r_at_50: recall_at_k(preds, gold, 50),
        }
    }
}

/// Macro averages over the documents whose gold set for the class is nonempty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub documents: usize,
    #[serde(flatten)]
    pub mean: MetricRow,
}

impl ClassScores {
    fn from_rows<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> Self {
        let mut sum = MetricRow::default();
        let mut n = 0;
        for r in rows {
            sum.f1_at_5 += r.f1_at_5;
            sum.f1_at_10 += r.f1_at_10;
            sum.f1_at_m += r.f1_at_m;
            sum.r_at_10 += r.r_at_10;
            sum.r_at_50 += r.r_at_50;
            n += 1;
        }
        if n == 0 {
            return ClassScores::default();
        }
        let d = n as f64;
        ClassScores {
            documents: n,
            mean: MetricRow {
                f1_at_5: sum.f1_at_5 / d,
                f1_at_10: sum.f1_at_10 / d,
                f1_at_m: sum.f1_at_m / d,
                r_at_10: sum.r_at_10 / d,
                r_at_50: sum.r_at_50 / d,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub present: Option<MetricRow>,
    pub absent: Option<MetricRow>,
    pub all: Option<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub documents: usize,
    pub present: ClassScores,
    pub absent: ClassScores,
    pub all: ClassScores,
    pub details: Vec<DocScore>,
}

/// Splits phrases by whether their stemmed form occurs in the stemmed source.
fn split_by_presence(
    stemmed_source: &[String],
    phrases: &[Vec<String>],
) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    phrases
        .iter()
        .cloned()
        .partition(|p| find_subsequence(stemmed_source, &stem_tokens(p)).is_some())
}

/// Scores predictions against the gold documents. A gold document with no
/// prediction gets an error row and is scored with an empty prediction
/// list; predictions for unknown ids get an error row and are ignored.
pub fn score(predictions: &[Prediction], gold: &[Document], opts: ScoreOptions) -> ScoreReport {
    let by_id: HashMap<&str, &Prediction> = predictions
        .iter()
        .map(|p| (p.doc_id.as_str(), p))
        .collect();
    let mut details = Vec::with_capacity(gold.len());
    for doc in gold {
        let (error, phrases) = match by_id.get(doc.id.as_str()) {
            Some(p) => (
                None,
                p.keyphrases
                    .iter()
                    .map(|k| tokenize(k))
                    .filter(|k| !k.is_empty())
                    .collect::<Vec<_>>(),
            ),
            None => (Some("no prediction for this document".to_string()), Vec::new()),
        };
        let preds = dedup_after_stem(&phrases);
        let source = stem_tokens(&doc.source_tokens);
        let (pred_present, pred_absent) = split_by_presence(&source, &preds);
        let (gold_present, gold_absent) = split_by_presence(&source, &doc.keyphrases);
        let row = |p: &[Vec<String>], g: &[Vec<String>]| {
            (!g.is_empty()).then(|| MetricRow::compute(p, g, opts))
        };
        details.push(DocScore {
            doc_id: doc.id.clone(),
            error,
            present: row(&pred_present, &gold_present),
            absent: row(&pred_absent, &gold_absent),
            all: row(&preds, &doc.keyphrases),
        });
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
    for p in predictions {
        if !gold_ids.contains(p.doc_id.as_str()) {
            details.push(DocScore {
                doc_id: p.doc_id.clone(),
                error: Some("prediction for unknown document".into()),
                present: None,
                absent: None,
                all: None,
            });
        }
    }
    ScoreReport {
        documents: gold.len(),
        present: ClassScores::from_rows(details.iter().filter_map(|d| d.present.as_ref())),
        absent: ClassScores::from_rows(details.iter().filter_map(|d| d.absent.as_ref())),
        all: ClassScores::from_rows(details.iter().filter_map(|d| d.all.as_ref())),
        details,
    }
}

impl ScoreReport {
    pub fn errors(&self) -> impl Iterator<Item = &DocScore> {
        self.details.iter().filter(|d| d.error.is_some())
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "documents: {}", self.documents)?;
        writeln!(
            f,
            "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "class", "docs", "F1@5", "F1@10", "F1@M", "R@10", "R@50"
        )?;
        for (name, c) in [
            ("present", &self.present),
            ("absent", &self.absent),
            ("all", &self.all),
        ] {
            writeln!(
                f,
                "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name,
                c.documents,
                c.mean.f1_at_5,
                c.mean.f1_at_10,
                c.mean.f1_at_m,
                c.mean.r_at_10,
                c.mean.r_at_50
            )?;
        }
        let errors = self.errors().count();
        if errors > 0 {
            writeln!(f, "errors: {errors}")?;
            for d in self.errors() {
                writeln!(f, "  {}: {}", d.doc_id, d.error.as_deref().unwrap_or(""))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ph(list: &[&str]) -> Vec<Vec<String>> {
        list.iter()
            .map(|p| p.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn f1_at_5_fixture() {
        let preds = ph(&["a", "b", "c", "d", "e"]);
        let gold = ph(&["a", "c", "f"]);
        assert!((f1_at_k(&preds, &gold, 5) - 0.5).abs() < 1e-12);
        assert_eq!(f1_at_k(&gold, &gold, 5), 1.0);
        assert_eq!(f1_at_k(&ph(&["x", "y"]), &gold, 5), 0.0);
    }

    #[test]
    fn f1_at_m_fixture() {
        let gold = ph(&["a", "c", "f"]);
        assert!((f1_at_m(&ph(&["a", "b", "c"]), &gold) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_at_m(&[], &gold), 0.0);
        assert_eq!(f1_at_m(&gold, &gold), 1.0);
    }

    #[test]
    fn padding_changes_short_lists() {
        let gold = ph(&["a", "b"]);
        let preds = ph(&["a", "b"]);
        assert_eq!(f1_at_k(&preds, &gold, 5), 1.0);
        // P = 2/5, R = 1
        assert!((f1_at_k_padded(&preds, &gold, 5) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let gold = ph(&["x", "y"]);
        let preds = ph(&["a", "x", "b"]);
        assert_eq!(recall_at_k(&preds, &gold, 10), 0.5);
        assert_eq!(recall_at_k(&preds, &gold, 0), 0.0);
    }

    #[test]
    fn stemming_matches_surface_variants() {
        let gold = ph(&["neural networks"]);
        assert_eq!(f1_at_m(&ph(&["neural network"]), &gold), 1.0);
    }

    #[test]
    fn dedup_after_stem_examples() {
        assert_eq!(dedup_after_stem(&ph(&["model", "models"])), ph(&["model"]));
        assert_eq!(dedup_after_stem(&ph(&["a b", "c"])), ph(&["a b", "c"]));
        // stems: relat, relat, gener, gener network, connect
        let five = ph(&[
            "relational",
            "relate",
            "generalization",
            "generalization networks",
            "connected",
        ]);
        assert_eq!(
            dedup_after_stem(&five),
            ph(&["relational", "generalization", "generalization networks", "connected"])
        );
    }
}
