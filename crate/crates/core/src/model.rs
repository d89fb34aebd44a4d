//! The full model: encoder, mention tagger and type classifier wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{softmax_rows, TypeClassifier};
use crate::config::{CandidateSource, ModelConfig};
use crate::data::{enumerate_spans, type_target, GoldEntity, Sentence, TaggerLabels, NON_ENTITY};
use crate::encoder::{DualInfo, Encoder};
use crate::error::Result;
use crate::mask::MaskMatrix;
use crate::params::ParamStore;
use crate::tagger::{
    generate_candidates, positive_probs, start_end_candidates, MentionCandidateSet, MentionTagger,
};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub tagger: MentionTagger,
    pub classifier: TypeClassifier,
}

/// Tagger sub-task losses. Disabled sub-tasks are `None`.
#[derive(Clone, Copy, Debug)]
pub struct TaggerLosses {
    pub start: Option<Var>,
    pub end: Option<Var>,
    pub entity: Option<Var>,
    pub mention: Var,
}

/// Everything the tagging stage produces for one sentence.
#[derive(Clone, Debug)]
pub struct TaggerOutput {
    pub n: usize,
    pub spans: Vec<(usize, usize)>,
    pub dual: DualInfo,
    /// Entity probabilities from the provisional pass that built the focus mask.
    pub provisional_entity: Vec<f64>,
    pub focus_mask: MaskMatrix,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub p_entity: Vec<f64>,
    pub p_mention: Vec<f64>,
    pub losses: Option<TaggerLosses>,
}

#[derive(Clone, Debug)]
pub struct TypingOutput {
    pub spans: Vec<(usize, usize)>,
    pub logits: Option<Var>,
    /// Class distribution per span; class 0 is non-entity.
    pub probs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub loss: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub entities: Vec<PredictedEntity>,
    pub candidates: MentionCandidateSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let tagger = MentionTagger::new(&mut params, &mut rng, &config);
        let classifier = TypeClassifier::new(&mut params, &mut rng, &config);
        Ok(Model {
            config,
            params,
            encoder,
            tagger,
            classifier,
        })
    }

    /// Builds the focus mask from a provisional dual-info pass that uses the
    /// global mask in both branches. Nothing downstream differentiates
    /// through this selection.
    fn focus_mask(&self, tape: &mut Tape, base: Var, global: &MaskMatrix, n: usize) -> Result<(MaskMatrix, Vec<f64>)> {
        let ab = &self.config.ablation;
        if !ab.focus_attention {
            return Ok((global.clone(), Vec::new()));
        }
        if !ab.entity_detection {
            let none = vec![0.0; n];
            return Ok((MaskMatrix::focus(&none, self.config.window, self.config.tau_ent), none));
        }
        let provisional = self.encoder.dual_info(tape, base, global, global)?;
        let rows: Vec<usize> = (1..=n).collect();
        let tokens = tape.gather_rows(provisional.output, &rows)?;
        let logits = self.tagger.entity_logits(tape, tokens)?;
        let p = positive_probs(tape.value(logits));
        Ok((MaskMatrix::focus(&p, self.config.window, self.config.tau_ent), p))
    }

    /// Encoder plus mention tagger. With `labels`, the sub-task losses are
    /// attached.
    pub fn tag(&self, tape: &mut Tape, sentence: &Sentence, labels: Option<&TaggerLabels>) -> Result<TaggerOutput> {
        let n = sentence.len();
        let ab = &self.config.ablation;
        let base = self.encoder.encode_base(tape, sentence)?;
        let global = MaskMatrix::global(n + 2);
        let (focus_mask, provisional_entity) = self.focus_mask(tape, base, &global, n)?;
        let dual = self.encoder.dual_info(tape, base, &global, &focus_mask)?;
        let rows: Vec<usize> = (1..=n).collect();
        let tokens = tape.gather_rows(dual.output, &rows)?;

        let proj = self.tagger.project_boundaries(tape, tokens)?;
        let (start_logits, end_logits) = self.tagger.start_end_logits(tape, &proj)?;
        let entity_logits = self.tagger.entity_logits(tape, tokens)?;
        let spans = enumerate_spans(n, self.config.max_span_len);
        let scores = self.tagger.biaffine_span_scores(tape, &proj, &spans)?;
        let gate = if ab.entity_detection {
            Some(self.tagger.span_gate(tape, entity_logits, &spans)?)
        } else {
            None
        };
        let mention_logits = self.tagger.mention_logits(tape, scores, gate)?;

        let losses = match labels {
            Some(l) => {
                let (start, end) = if ab.start_end {
                    (
                        Some(tape.cross_entropy(start_logits, &l.start)?),
                        Some(tape.cross_entropy(end_logits, &l.end)?),
                    )
                } else {
                    (None, None)
                };
                let entity = if ab.entity_detection {
                    Some(tape.cross_entropy(entity_logits, &l.entity)?)
                } else {
                    None
                };
                let mention = tape.cross_entropy(mention_logits, &l.mention_targets(&spans))?;
                Some(TaggerLosses {
                    start,
                    end,
                    entity,
                    mention,
                })
            }
            None => None,
        };

        Ok(TaggerOutput {
            n,
            p_start: positive_probs(tape.value(start_logits)),
            p_end: positive_probs(tape.value(end_logits)),
            p_entity: positive_probs(tape.value(entity_logits)),
            p_mention: positive_probs(tape.value(mention_logits)),
            spans,
            dual,
            provisional_entity,
            focus_mask,
            losses,
        })
    }

    /// Candidate spans for the typing stage. `forced` spans (gold mentions in
    /// training) are always included.
    pub fn candidates(&self, out: &TaggerOutput, forced: &[(usize, usize)]) -> MentionCandidateSet {
        let c = &self.config;
        match c.ablation.candidates {
            CandidateSource::Tagger => generate_candidates(&out.spans, &out.p_mention, c.tau_mention, forced),
            CandidateSource::StartEndPairs => {
                start_end_candidates(&out.p_start, &out.p_end, c.tau_mention, c.max_span_len, forced)
            }
            CandidateSource::AllSpans => generate_candidates(&out.spans, &out.p_mention, 0.0, forced),
        }
    }

    /// Type classification of `spans`. With `gold`, the mean cross-entropy
    /// loss is attached (absent when `spans` is empty).
    pub fn type_spans(
        &self,
        tape: &mut Tape,
        out: &TaggerOutput,
        spans: &[(usize, usize)],
        gold: Option<&[GoldEntity]>,
    ) -> Result<TypingOutput> {
        let targets: Vec<usize> = gold
            .map(|g| spans.iter().map(|&s| type_target(s, g)).collect())
            .unwrap_or_default();
        if spans.is_empty() {
            return Ok(TypingOutput {
                spans: Vec::new(),
                logits: None,
                probs: Vec::new(),
                targets,
                loss: None,
            });
        }
        let ctx = self.classifier.prepare(tape, out.dual.output)?;
        let rep = self.classifier.four_level_representation(tape, &ctx, spans)?;
        let logits = self.classifier.classify(tape, &rep)?;
        let loss = match gold {
            Some(_) => Some(tape.cross_entropy(logits, &targets)?),
            None => None,
        };
        Ok(TypingOutput {
            spans: spans.to_vec(),
            probs: softmax_rows(tape.value(logits)),
            logits: Some(logits),
            targets,
            loss,
        })
    }

    /// Inference on one sentence.
    pub fn predict(&self, sentence: &Sentence) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let tagged = self.tag(&mut tape, sentence, None)?;
        let candidates = self.candidates(&tagged, &[]);
        let typed = self.type_spans(&mut tape, &tagged, &candidates.spans(), None)?;
        Ok(Prediction {
            entities: decode_entities(&typed),
            candidates,
        })
    }
}

/// Keeps every span whose most probable class is an entity type.
pub fn decode_entities(typed: &TypingOutput) -> Vec<PredictedEntity> {
    typed
        .spans
        .iter()
        .zip(&typed.probs)
        .filter_map(|(&(start, end), probs)| {
            let (label, &prob) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (label != NON_ENTITY).then_some(PredictedEntity {
                start,
                end,
                label,
                prob,
            })
        })
        .collect()
}
