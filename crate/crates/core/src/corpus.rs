//! Documents, tokenization, vocabularies and training targets.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{dedup_after_stem, stem_tokens};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const DIGIT: &str = "<digit>";

/// Special tokens in id order.
pub const SPECIALS: [&str; 6] = [PAD, UNK, BOS, EOS, SEP, DIGIT];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;
pub const DIGIT_ID: usize = 5;

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Lowercases, splits punctuation into single-character tokens and replaces
/// each maximal run of ASCII digits with [`DIGIT`].
///
/// The literal `<digit>` marker is kept as one token, so tokenizing the
/// space-joined output again gives the same tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(DIGIT) {
            flush(&mut word, &mut tokens);
            tokens.push(DIGIT.to_string());
            rest = &rest[DIGIT.len()..];
            continue;
        }
        if c.is_ascii_digit() {
            flush(&mut word, &mut tokens);
            tokens.push(DIGIT.to_string());
            rest = rest.trim_start_matches(|ch: char| ch.is_ascii_digit());
            continue;
        }
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// Title plus abstract with gold keyphrases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title_tokens: Vec<String>,
    pub abstract_tokens: Vec<String>,
    pub keyphrases: Vec<Vec<String>>,
    pub source_tokens: Vec<String>,
}

/// One line of a corpus file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub keyphrases: Vec<String>,
}

impl Document {
    /// Builds a document; keyphrases are deduplicated after stemming.
    pub fn new(
        id: impl Into<String>,
        title_tokens: Vec<String>,
        abstract_tokens: Vec<String>,
        keyphrases: Vec<Vec<String>>,
    ) -> Result<Self> {
        let id = id.into();
        let source_tokens: Vec<String> = title_tokens
            .iter()
            .chain(&abstract_tokens)
            .cloned()
            .collect();
        if source_tokens.is_empty() {
            return Err(Error::Input(format!("document {id:?} has an empty source")));
        }
        if keyphrases.iter().any(|k| k.is_empty()) {
            return Err(Error::Input(format!("document {id:?} has an empty keyphrase")));
        }
        Ok(Document {
            id,
            title_tokens,
            abstract_tokens,
            keyphrases: dedup_after_stem(&keyphrases),
            source_tokens,
        })
    }

    /// Tokenizes a raw record. Keyphrases that tokenize to nothing are dropped.
    pub fn from_raw(record: &RawRecord, fallback_id: &str) -> Result<Self> {
        let keyphrases = record
            .keyphrases
            .iter()
            .map(|k| tokenize(k))
            .filter(|k| !k.is_empty())
            .collect();
        Document::new(
            record.id.clone().unwrap_or_else(|| fallback_id.to_string()),
            tokenize(&record.title),
            tokenize(&record.abstract_text),
            keyphrases,
        )
    }

    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            id: Some(self.id.clone()),
            title: self.title_tokens.join(" "),
            abstract_text: self.abstract_tokens.join(" "),
            keyphrases: self.keyphrases.iter().map(|k| k.join(" ")).collect(),
        }
    }
}

/// Drops documents whose source tokens repeat an earlier document's.
pub fn dedup_corpus(docs: Vec<Document>) -> Vec<Document> {
    let mut seen = HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(d.source_tokens.clone()))
        .collect()
}

pub fn fallback_id(line: usize) -> String {
    format!("doc-{line:06}")
}

/// Reads a JSON-lines corpus. Records without `id` get one from their line
/// number; blank lines are skipped.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        let doc = Document::from_raw(&record, &fallback_id(n))
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_raw_records(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
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

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut w, &d.to_raw())?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Token ↔ id map with the special tokens at fixed ids `0..6`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
        {
            return Err(Error::Input(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
        })
    }

    /// Keeps the `cap - 6` most frequent tokens of sources and keyphrases,
    /// ties broken lexicographically. `cap` counts the specials.
    pub fn build(docs: &[Document], cap: usize) -> Result<Self> {
        if cap < SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is below the {} special tokens",
                SPECIALS.len()
            )));
        }
        if docs.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from no documents".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in docs {
            for t in d.source_tokens.iter().chain(d.keyphrases.iter().flatten()) {
                if !is_special(t) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .take(cap - SPECIALS.len())
                    .map(|(t, _)| t.to_string()),
            )
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Gold keyphrases partitioned by whether they occur in the source.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TargetSplit {
    pub present: Vec<Vec<String>>,
    pub absent: Vec<Vec<String>>,
}

/// First index at which `needle` occurs contiguously in `haystack`.
pub fn find_subsequence<T: PartialEq>(haystack: &[T], needle: &[T]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// First position of each keyphrase (stemmed match) in the stemmed source.
fn first_positions(doc: &Document) -> Vec<Option<usize>> {
    let source = stem_tokens(&doc.source_tokens);
    doc.keyphrases
        .iter()
        .map(|k| find_subsequence(&source, &stem_tokens(k)))
        .collect()
}

pub fn split_present_absent(doc: &Document) -> TargetSplit {
    let mut split = TargetSplit::default();
    for (k, pos) in doc.keyphrases.iter().zip(first_positions(doc)) {
        match pos {
            Some(_) => split.present.push(k.clone()),
            None => split.absent.push(k.clone()),
        }
    }
    split
}

/// Present keyphrases by first occurrence (ties: shorter, then
/// lexicographic), then absent ones in author order.
pub fn ordered_keyphrases(doc: &Document) -> Vec<Vec<String>> {
    let mut present: Vec<(usize, &Vec<String>)> = Vec::new();
    let mut absent = Vec::new();
    for (k, pos) in doc.keyphrases.iter().zip(first_positions(doc)) {
        match pos {
            Some(p) => present.push((p, k)),
            None => absent.push(k),
        }
    }
    present.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.len().cmp(&b.1.len()))
            .then_with(|| a.1.cmp(b.1))
    });
    present
        .into_iter()
        .map(|(_, k)| k.clone())
        .chain(absent.into_iter().cloned())
        .collect()
}

/// The One2Seq target: ordered keyphrases joined by [`SEP`], ending in [`EOS`].
pub fn build_one2seq_target(doc: &Document) -> Vec<String> {
    let mut out = Vec::new();
    for (i, k) in ordered_keyphrases(doc).into_iter().enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        out.extend(k);
    }
    out.push(EOS.to_string());
    out
}
