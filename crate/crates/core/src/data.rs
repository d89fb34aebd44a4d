//! Corpus records, vocabulary, label sets and gold-label construction.
//!
//! Corpus files are UTF-8 JSON lines:
//!
//! ```text
//! {"tokens": ["Joe", "went", "home"], "entities": [{"start": 0, "end": 0, "type": "PER"}]}
//! ```
//!
//! Entity `end` indices are **inclusive**.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BEGIN_ID: usize = 2;
pub const END_ID: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Class index of the non-entity type.
pub const NON_ENTITY: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityRecord>,
}

impl CorpusRecord {
    /// Checks index ranges and duplicate entities. Overlap is allowed.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        let mut seen = HashSet::new();
        for e in &self.entities {
            if e.start > e.end {
                return Err(format!("entity ({}, {}, {}) ends before it starts", e.start, e.end, e.label));
            }
            if e.end >= n {
                return Err(format!(
                    "entity ({}, {}, {}) exceeds sentence length {n}",
                    e.start, e.end, e.label
                ));
            }
            if e.label.is_empty() {
                return Err(format!("entity ({}, {}) has an empty type", e.start, e.end));
            }
            if !seen.insert(e) {
                return Err(format!("duplicate entity ({}, {}, {})", e.start, e.end, e.label));
            }
        }
        Ok(())
    }
}

/// Reads and validates a JSON-lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), path)
}

pub fn read_corpus<R: BufRead>(reader: R, path: &Path) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
        record.validate().map_err(data_err)?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Token vocabulary. Ids 0-3 are reserved for padding, unknown, BEGIN and END.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Validation(format!(
                "vocabulary must start with the reserved tokens {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Builds a vocabulary ordered by descending frequency, ties broken
    /// lexicographically.
    pub fn from_records(records: &[CorpusRecord]) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            for t in &r.tokens {
                if !RESERVED_TOKENS.contains(&t.as_str()) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut by_freq: Vec<(&str, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(by_freq.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let tokens = reader.lines().collect::<std::io::Result<Vec<String>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Entity type names. Class 0 is always the non-entity class; entity types
/// take classes `1..=len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(mut names: Vec<String>) -> Self {
        names.sort();
        names.dedup();
        LabelSet { names }
    }

    pub fn from_records(records: &[CorpusRecord]) -> Self {
        Self::new(
            records
                .iter()
                .flat_map(|r| r.entities.iter().map(|e| e.label.clone()))
                .collect(),
        )
    }

    /// Number of entity types, excluding the non-entity class.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn class_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        class
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Token ids of one sentence with BEGIN/END sentinels around the `n` real
/// tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    ids: Vec<usize>,
}

impl Sentence {
    /// Real-token ids, without sentinels. Ids outside `0..vocab_size` or
    /// equal to a reserved id are mapped to UNK.
    pub fn from_ids(ids: &[usize], vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > max_len {
            return Err(Error::Validation(format!(
                "sentence length {} outside 1..={max_len}",
                ids.len()
            )));
        }
        let mut all = Vec::with_capacity(ids.len() + 2);
        all.push(BEGIN_ID);
        all.extend(ids.iter().map(|&id| {
            if id < RESERVED_TOKENS.len() || id >= vocab_size {
                UNK_ID
            } else {
                id
            }
        }));
        all.push(END_ID);
        Ok(Sentence { ids: all })
    }

    pub fn encode(tokens: &[String], vocab: &Vocab, max_len: usize) -> Result<Self> {
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        Self::from_ids(&ids, vocab.len(), max_len)
    }

    /// Number of real tokens.
    pub fn len(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All ids including sentinels.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Copy with the real tokens flagged in `unk` replaced by UNK.
    pub fn with_unknown(&self, unk: &[bool]) -> Sentence {
        let mut ids = self.ids.clone();
        for (id, &u) in ids[1..].iter_mut().zip(unk) {
            if u {
                *id = UNK_ID;
            }
        }
        Sentence { ids }
    }
}

/// A typed gold span over real-token indices, `end` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldEntity {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// All spans `(i, j)` with `i <= j < n` and `j - i + 1 <= max_span_len`,
/// ordered by `(i, j)`.
pub fn enumerate_spans(n: usize, max_span_len: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + max_span_len) {
            spans.push((i, j));
        }
    }
    spans
}

/// Number of spans [`enumerate_spans`] yields.
pub fn span_count(n: usize, max_span_len: usize) -> usize {
    let cap = max_span_len.min(n);
    // n - len + 1 spans of each length
    (1..=cap).map(|len| n - len + 1).sum()
}

/// Gold targets for the four tagger sub-tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggerLabels {
    pub start: Vec<usize>,
    pub end: Vec<usize>,
    pub entity: Vec<usize>,
    pub mention: BTreeSet<(usize, usize)>,
}

impl TaggerLabels {
    /// Derives labels from gold entities. Entities longer than `max_span_len`
    /// are dropped; the number dropped is returned alongside.
    pub fn build(n: usize, gold: &[GoldEntity], max_span_len: usize) -> (Self, usize) {
        let mut labels = TaggerLabels {
            start: vec![0; n],
            end: vec![0; n],
            entity: vec![0; n],
            mention: BTreeSet::new(),
        };
        let mut dropped = 0;
        for g in gold {
            if g.end - g.start + 1 > max_span_len {
                dropped += 1;
                continue;
            }
            labels.start[g.start] = 1;
            labels.end[g.end] = 1;
            labels.entity[g.start..=g.end].fill(1);
            labels.mention.insert((g.start, g.end));
        }
        (labels, dropped)
    }

    pub fn mention_targets(&self, spans: &[(usize, usize)]) -> Vec<usize> {
        spans
            .iter()
            .map(|s| usize::from(self.mention.contains(s)))
            .collect()
    }
}

/// Gold class of a candidate span: the lowest matching entity class, or
/// [`NON_ENTITY`].
pub fn type_target(span: (usize, usize), gold: &[GoldEntity]) -> usize {
    gold.iter()
        .filter(|g| (g.start, g.end) == span)
        .map(|g| g.label)
        .min()
        .unwrap_or(NON_ENTITY)
}

/// A sentence ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<String>,
    pub sentence: Sentence,
    pub gold: Vec<GoldEntity>,
    pub labels: TaggerLabels,
}

impl Example {
    /// Encodes a record. Entity types missing from `labels` are an error.
    pub fn from_record(
        record: &CorpusRecord,
        vocab: &Vocab,
        labels: &LabelSet,
        max_len: usize,
        max_span_len: usize,
    ) -> Result<Self> {
        let sentence = Sentence::encode(&record.tokens, vocab, max_len)?;
        let mut gold = Vec::with_capacity(record.entities.len());
        for e in &record.entities {
            let label = labels
                .class_of(&e.label)
                .ok_or_else(|| Error::Validation(format!("unknown entity type {:?}", e.label)))?;
            gold.push(GoldEntity {
                start: e.start,
                end: e.end,
                label,
            });
        }
        gold.sort();
        let (tagger_labels, dropped) = TaggerLabels::build(sentence.len(), &gold, max_span_len);
        if dropped > 0 {
            log::warn!("{dropped} gold span(s) longer than {max_span_len} tokens dropped from tagger labels");
        }
        Ok(Example {
            tokens: record.tokens.clone(),
            sentence,
            gold,
            labels: tagger_labels,
        })
    }
}

pub fn prepare_examples(
    records: &[CorpusRecord],
    vocab: &Vocab,
    labels: &LabelSet,
    max_len: usize,
    max_span_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Example::from_record(r, vocab, labels, max_len, max_span_len)
                .map_err(|e| Error::Validation(format!("record {}: {e}", i + 1)))
        })
        .collect()
}
