//! Synthetic nested-entity corpora from a small phrase grammar.
//!
//! Every type owns given-name and family-name lexicons plus a few head nouns
//! for each of two phrase shapes. A mention is a bare name, a prefix phrase
//! `the HEAD of CHILD` or a suffix phrase `CHILD HEAD`. Suffix phrases only
//! wrap names or other suffix phrases, so every sentence has one bracketing.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusRecord, EntityRecord};
use crate::error::{Error, Result};

const TYPE_NAMES: [&str; 8] = ["PER", "ORG", "GPE", "LOC", "FAC", "VEH", "WEA", "EVT"];
const HEADS_PER_SHAPE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGrammarConfig {
    pub sentences: usize,
    pub num_types: usize,
    /// Longest chain of nested mentions.
    pub max_depth: usize,
    /// Distinct word types the generator may emit.
    pub vocab_size: usize,
    /// Probability that a mention wraps a further nested mention.
    pub nest_prob: f64,
    pub max_top_level: usize,
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticGrammarConfig {
    fn default() -> Self {
        SyntheticGrammarConfig {
            sentences: 2000,
            num_types: 4,
            max_depth: 3,
            vocab_size: 500,
            nest_prob: 0.7,
            max_top_level: 3,
            max_fillers: 4,
            seed: 7,
        }
    }
}

impl SyntheticGrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.num_types > TYPE_NAMES.len() {
            return Err(Error::Config(format!("num_types must be in 1..={}", TYPE_NAMES.len())));
        }
        if self.max_depth == 0 || self.max_top_level == 0 || self.max_fillers == 0 {
            return Err(Error::Config("max_depth, max_top_level and max_fillers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nest_prob) {
            return Err(Error::Config("nest_prob must lie in [0, 1]".into()));
        }
        let fixed = 2 + self.num_types * 2 * HEADS_PER_SHAPE;
        if self.vocab_size < fixed + 3 * self.num_types + 8 {
            return Err(Error::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        Ok(())
    }

    /// Expected share of entities that nest in or contain another entity.
    pub fn expected_overlap_ratio(&self) -> f64 {
        let (p, d) = (self.nest_prob, self.max_depth);
        let mut mean = 0.0;
        let mut single = 0.0;
        for l in 1..=d {
            let prob = if l < d {
                p.powi(l as i32 - 1) * (1.0 - p)
            } else {
                p.powi(d as i32 - 1)
            };
            mean += l as f64 * prob;
            if l == 1 {
                single = prob;
            }
        }
        (mean - single) / mean
    }

    pub fn type_names(&self) -> Vec<String> {
        TYPE_NAMES[..self.num_types].iter().map(|s| s.to_string()).collect()
    }
}

struct Lexicon {
    given: Vec<Vec<String>>,
    family: Vec<Vec<String>>,
    prefix_heads: Vec<Vec<String>>,
    suffix_heads: Vec<Vec<String>>,
    fillers: Vec<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Shape {
    Name,
    Prefix,
    Suffix,
}

fn pseudo_words<R: Rng>(rng: &mut R, count: usize, seen: &mut BTreeSet<String>) -> Vec<String> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Lexicon {
    fn build<R: Rng>(rng: &mut R, config: &SyntheticGrammarConfig) -> Self {
        let mut seen: BTreeSet<String> = ["the", "of"].iter().map(|s| s.to_string()).collect();
        let t = config.num_types;
        let prefix_heads = (0..t).map(|_| pseudo_words(rng, HEADS_PER_SHAPE, &mut seen)).collect();
        let suffix_heads = (0..t).map(|_| pseudo_words(rng, HEADS_PER_SHAPE, &mut seen)).collect();
        let open = config.vocab_size - 2 - t * 2 * HEADS_PER_SHAPE;
        let given_per_type = open / 3 / t;
        let family_per_type = open / 6 / t;
        let given = (0..t).map(|_| pseudo_words(rng, given_per_type, &mut seen)).collect();
        let family = (0..t).map(|_| pseudo_words(rng, family_per_type, &mut seen)).collect();
        let fillers = pseudo_words(rng, open - (given_per_type + family_per_type) * t, &mut seen);
        Lexicon {
            given,
            family,
            prefix_heads,
            suffix_heads,
            fillers,
        }
    }
}

struct Builder<'a, R> {
    rng: &'a mut R,
    lex: &'a Lexicon,
    config: &'a SyntheticGrammarConfig,
    tokens: Vec<String>,
    entities: Vec<EntityRecord>,
}

impl<R: Rng> Builder<'_, R> {
    fn word(&mut self, w: &str) {
        self.tokens.push(w.to_string());
    }

    fn pick(&mut self, words: &[String]) {
        let w = words.choose(self.rng).unwrap().clone();
        self.tokens.push(w);
    }

    /// Emits one mention with `depth - 1` further levels below it. Inside a
    /// suffix phrase only names and suffix phrases may appear.
    fn mention(&mut self, depth: usize, inside_suffix: bool) {
        let ty = self.rng.random_range(0..self.config.num_types);
        let start = self.tokens.len();
        let shape = if depth == 1 {
            Shape::Name
        } else if inside_suffix || self.rng.random_bool(0.5) {
            Shape::Suffix
        } else {
            Shape::Prefix
        };
        let lex = self.lex;
        match shape {
            Shape::Name => {
                self.pick(&lex.given[ty]);
                if self.rng.random_bool(0.3) {
                    self.pick(&lex.family[ty]);
                }
            }
            Shape::Prefix => {
                self.word("the");
                self.pick(&lex.prefix_heads[ty]);
                self.word("of");
                self.mention(depth - 1, false);
            }
            Shape::Suffix => {
                self.mention(depth - 1, true);
                self.pick(&lex.suffix_heads[ty]);
            }
        }
        self.entities.push(EntityRecord {
            start,
            end: self.tokens.len() - 1,
            label: TYPE_NAMES[ty].to_string(),
        });
    }

    fn fillers(&mut self) {
        let k = self.rng.random_range(1..=self.config.max_fillers);
        for _ in 0..k {
            self.pick(&self.lex.fillers);
        }
    }

    fn chain_length(&mut self) -> usize {
        let mut l = 1;
        while l < self.config.max_depth && self.rng.random_bool(self.config.nest_prob) {
            l += 1;
        }
        l
    }
}

/// Generates `config.sentences` records. Byte-identical for a given config.
pub fn generate(config: &SyntheticGrammarConfig) -> Result<Vec<CorpusRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lex = Lexicon::build(&mut rng, config);
    let mut out = Vec::with_capacity(config.sentences);
    for _ in 0..config.sentences {
        let mut b = Builder {
            rng: &mut rng,
            lex: &lex,
            config,
            tokens: Vec::new(),
            entities: Vec::new(),
        };
        let trees = b.rng.random_range(1..=config.max_top_level);
        b.fillers();
        for _ in 0..trees {
            let depth = b.chain_length();
            b.mention(depth, false);
            b.fillers();
        }
        let mut entities = b.entities;
        entities.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
        out.push(CorpusRecord {
            tokens: b.tokens,
            entities,
        });
    }
    Ok(out)
}

/// Share of entities that overlap another entity of the same sentence.
pub fn overlap_ratio(records: &[CorpusRecord]) -> f64 {
    let mut total = 0usize;
    let mut overlapping = 0usize;
    for r in records {
        for (i, a) in r.entities.iter().enumerate() {
            total += 1;
            if r
                .entities
                .iter()
                .enumerate()
                .any(|(j, b)| i != j && a.start <= b.end && b.start <= a.end)
            {
                overlapping += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        overlapping as f64 / total as f64
    }
}

/// Splits `records` into consecutive train/dev/test parts by `ratios`.
pub fn split(records: Vec<CorpusRecord>, ratios: [f64; 3]) -> Result<[Vec<CorpusRecord>; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = records.len();
    let train = (ratios[0] * n as f64).round() as usize;
    let dev = ((ratios[1] * n as f64).round() as usize).min(n - train);
    let mut it = records.into_iter();
    let a: Vec<_> = it.by_ref().take(train).collect();
    let b: Vec<_> = it.by_ref().take(dev).collect();
    let c: Vec<_> = it.collect();
    Ok([a, b, c])
}
