#![allow(dead_code)]

use boningknife::data::{prepare_examples, CorpusRecord, Example, LabelSet, Vocab};
use boningknife::synth::{generate, SyntheticGrammarConfig};
use boningknife::{Model, ModelConfig, TrainConfig, Trainer};

pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub examples: Vec<Example>,
}

pub fn corpus(sentences: usize, seed: u64) -> Corpus {
    let records = generate(&SyntheticGrammarConfig {
        sentences,
        seed,
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocab::from_records(&records);
    let labels = LabelSet::from_records(&records);
    let examples = prepare_examples(&records, &vocab, &labels, 64, 12).unwrap();
    Corpus {
        records,
        vocab,
        labels,
        examples,
    }
}

pub fn tiny_model_config(c: &Corpus) -> ModelConfig {
    ModelConfig {
        vocab_size: c.vocab.len(),
        num_types: c.labels.len(),
        max_len: 64,
        d_model: 16,
        encoder_blocks: 1,
        encoder_heads: 2,
        heads: 4,
        d_low: 8,
        d_span: 8,
        d_hidden: 16,
        max_span_len: 12,
        ..Default::default()
    }
}

pub fn tiny_trainer(c: &Corpus, train: TrainConfig) -> Trainer {
    let model = Model::new(tiny_model_config(c), train.seed).unwrap();
    Trainer::new(model, train).unwrap()
}
