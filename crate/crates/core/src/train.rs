//! Alternating joint optimisation of the tagger and the type classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::optim::{AdamWConfig, AdamWState};
use crate::tape::{Tape, Var};

/// Normalised weights of the four tagger sub-task losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub start: f64,
    pub end: f64,
    pub entity_detection: f64,
    pub mention: f64,
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.start, self.end, self.entity_detection, self.mention]
    }

    fn from_array(a: [f64; 4]) -> Self {
        LossWeights {
            start: a[0],
            end: a[1],
            entity_detection: a[2],
            mention: a[3],
        }
    }
}

/// Focal-style weights `a_i = s_i / sum_j s_j` with `s_i = (1 - exp(-L_i))^beta`,
/// losses ordered (start, end, entity detection, mention).
pub fn adaptive_weights(losses: [f64; 4], beta: f64) -> Result<LossWeights> {
    adaptive_weights_masked(losses, [true; 4], beta)
}

/// As [`adaptive_weights`], restricted to the `active` sub-tasks; inactive
/// ones get weight 0. If every active score is 0 the weights are uniform.
pub fn adaptive_weights_masked(losses: [f64; 4], active: [bool; 4], beta: f64) -> Result<LossWeights> {
    if let Some(bad) = losses.iter().zip(active).find(|(l, a)| *a && !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Contract(format!("sub-task loss must be finite and non-negative, got {}", bad.0)));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(Error::Config("no active tagger sub-task".into()));
    }
    let mut scores = [0.0; 4];
    for i in 0..4 {
        if active[i] {
            scores[i] = (1.0 - (-losses[i]).exp()).powf(beta);
        }
    }
    let total: f64 = scores.iter().sum();
    let mut alpha = [0.0; 4];
    for i in 0..4 {
        if active[i] {
            alpha[i] = if total > 0.0 {
                scores[i] / total
            } else {
                1.0 / count as f64
            };
        }
    }
    Ok(LossWeights::from_array(alpha))
}

/// `sum_i a_i L_i`.
pub fn tagger_total_loss(losses: [f64; 4], weights: &LossWeights) -> f64 {
    losses
        .iter()
        .zip(weights.as_array())
        .map(|(l, a)| l * a)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Tagger,
    Type,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Exponent of the adaptive loss weights.
    pub beta: f64,
    /// Steps per objective before switching; 0 optimises the summed
    /// objective every step.
    pub alternation_period: usize,
    /// Linear decay of the learning rate over the run, down to 5% of `lr`.
    pub lr_decay: bool,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: u64,
    /// Probability of replacing a training token by UNK.
    pub token_dropout: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 13,
            beta: 0.5,
            alternation_period: 1,
            lr_decay: false,
            warmup_steps: 0,
            token_dropout: 0.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("lr must be positive; weight_decay and beta non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::Config("token_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn objective_at(&self, step: u64) -> Objective {
        match self.alternation_period {
            0 => Objective::Joint,
            p if (step / p as u64) % 2 == 0 => Objective::Tagger,
            _ => Objective::Type,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub objective: Objective,
    pub l_start: f64,
    pub l_end: f64,
    pub l_entity_detection: f64,
    pub l_mention: f64,
    pub alpha: LossWeights,
    pub l_tagger: f64,
    pub l_type: f64,
    /// `l_tagger + l_type`.
    pub l_train: f64,
    pub candidates: usize,
    /// Whether parameters were updated (a type step with no candidates skips).
    pub updated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_l_tagger: f64,
    pub mean_l_type: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamWState,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps total over the whole run, for learning-rate decay.
    pub planned_steps: u64,
    /// Sentences whose typing stage saw no candidates during training.
    pub empty_candidate_sentences: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamWState::new(config.adamw(), &model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
            epoch: 0,
            planned_steps: 0,
            empty_candidate_sentences: 0,
        })
    }

    /// Sentence order of an epoch; a pure function of the seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn current_lr(&self) -> f64 {
        let mut lr = self.config.lr;
        if self.step < self.config.warmup_steps {
            lr *= (self.step + 1) as f64 / self.config.warmup_steps as f64;
        }
        if self.config.lr_decay && self.planned_steps > 0 {
            let frac = (self.step as f64 / self.planned_steps as f64).min(1.0);
            lr *= (1.0 - frac).max(0.05);
        }
        lr
    }

    /// Forward, weighting, backward and update on one batch.
    pub fn joint_step(&mut self, batch: &[&Example]) -> Result<StepLog> {
        let objective = self.config.objective_at(self.step);
        let model = &self.model;
        let ab = &model.config.ablation;
        let active = [ab.start_end, ab.start_end, ab.entity_detection, true];
        let mut tape = Tape::new(&model.params);
        let mut sub: [Vec<Var>; 4] = Default::default();
        let mut type_losses = Vec::new();
        let mut candidates = 0;
        let mut empty = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.rotate_left(17) ^ self.step);
        for ex in batch {
            let sentence = if self.config.token_dropout > 0.0 {
                let unk: Vec<bool> = (0..ex.sentence.len())
                    .map(|_| rng.random_bool(self.config.token_dropout))
                    .collect();
                ex.sentence.with_unknown(&unk)
            } else {
                ex.sentence.clone()
            };
            let tagged = model.tag(&mut tape, &sentence, Some(&ex.labels))?;
            let losses = tagged.losses.expect("labels were supplied");
            for (slot, v) in sub.iter_mut().zip([losses.start, losses.end, losses.entity, Some(losses.mention)]) {
                if let Some(v) = v {
                    slot.push(v);
                }
            }
            let forced: Vec<(usize, usize)> = ex.labels.mention.iter().copied().collect();
            let cands = model.candidates(&tagged, &forced);
            candidates += cands.len();
            let typed = model.type_spans(&mut tape, &tagged, &cands.spans(), Some(&ex.gold))?;
            match typed.loss {
                Some(l) => type_losses.push(l),
                None => empty += 1,
            }
        }
        let mut means = [0.0; 4];
        let mut mean_vars: [Option<Var>; 4] = [None; 4];
        for i in 0..4 {
            if !sub[i].is_empty() {
                let w = 1.0 / sub[i].len() as f64;
                let terms: Vec<(Var, f64)> = sub[i].iter().map(|&v| (v, w)).collect();
                let v = tape.weighted_sum(&terms)?;
                means[i] = tape.value(v).item();
                mean_vars[i] = Some(v);
            }
        }
        let alpha = adaptive_weights_masked(means, active, self.config.beta)?;
        let weighted: Vec<(Var, f64)> = mean_vars
            .iter()
            .zip(alpha.as_array())
            .filter_map(|(v, a)| v.map(|v| (v, a)))
            .collect();
        let l_tagger = tape.weighted_sum(&weighted)?;
        let l_type = if type_losses.is_empty() {
            None
        } else {
            let w = 1.0 / type_losses.len() as f64;
            let terms: Vec<(Var, f64)> = type_losses.iter().map(|&v| (v, w)).collect();
            Some(tape.weighted_sum(&terms)?)
        };
        let tagger_value = tape.value(l_tagger).item();
        let type_value = l_type.map_or(0.0, |v| tape.value(v).item());
        if !tagger_value.is_finite() || !type_value.is_finite() {
            return Err(self.numerical_failure(batch, means, type_value, tape.non_finite()));
        }
        let loss = match (objective, l_type) {
            (Objective::Tagger, _) => Some(l_tagger),
            (Objective::Type, t) => t,
            (Objective::Joint, Some(t)) => Some(tape.add(l_tagger, t)?),
            (Objective::Joint, None) => Some(l_tagger),
        };
        let grads = match loss {
            Some(l) => Some(tape.backward(l)?),
            None => None,
        };
        drop(tape);
        let lr = self.current_lr();
        let updated = grads.is_some();
        if let Some(g) = grads {
            if !g.all_finite() {
                return Err(self.numerical_failure(batch, means, type_value, None));
            }
            self.optimizer.step_with_lr(&mut self.model.params, &g, lr)?;
        }
        self.empty_candidate_sentences += empty;
        let log = StepLog {
            step: self.step,
            epoch: self.epoch,
            objective,
            l_start: means[0],
            l_end: means[1],
            l_entity_detection: means[2],
            l_mention: means[3],
            alpha,
            l_tagger: tagger_value,
            l_type: type_value,
            l_train: tagger_value + type_value,
            candidates,
            updated,
        };
        self.step += 1;
        Ok(log)
    }

    fn numerical_failure(
        &self,
        batch: &[&Example],
        means: [f64; 4],
        l_type: f64,
        first_bad: Option<(usize, &'static str)>,
    ) -> Error {
        let sentences: Vec<String> = batch.iter().map(|e| e.tokens.join(" ")).collect();
        Error::Numerical(format!(
            "step {}: sub-losses {:?}, type loss {}, first non-finite node {:?}; batch: {:?}",
            self.step, means, l_type, first_bad, sentences
        ))
    }

    /// One pass over `examples` in the epoch's shuffled order.
    pub fn train_epoch(&mut self, examples: &[Example], mut on_step: impl FnMut(&StepLog)) -> Result<EpochStats> {
        let started = Instant::now();
        let order = self.epoch_order(examples.len(), self.epoch);
        let mut stats = EpochStats {
            epoch: self.epoch,
            ..Default::default()
        };
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let log = self.joint_step(&batch)?;
            stats.steps += 1;
            stats.mean_l_tagger += log.l_tagger;
            stats.mean_l_type += log.l_type;
            on_step(&log);
        }
        if stats.steps > 0 {
            stats.mean_l_tagger /= stats.steps as f64;
            stats.mean_l_type /= stats.steps as f64;
        }
        stats.seconds = started.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(stats)
    }

    /// Plans learning-rate decay for `epochs` passes over `n` sentences.
    pub fn plan(&mut self, n: usize, epochs: usize) {
        self.planned_steps = (n.div_ceil(self.config.batch_size) * epochs) as u64;
    }
}

/// Per-epoch summary of a [`Trainer::fit`] run.
#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    #[serde(flatten)]
    pub stats: EpochStats,
    pub dev_f1: Option<f64>,
    pub dev_nested_f1: Option<f64>,
}

/// Outcome of [`Trainer::fit`]. With a dev set, `best` holds the parameters
/// of the epoch with the highest dev micro-F1 (earliest on ties).
pub struct FitSummary {
    pub epochs: Vec<EpochSummary>,
    pub best: Option<(usize, Model, EvalReport)>,
}

impl Trainer {
    /// Trains until `config.epochs` epochs are complete, evaluating on `dev`
    /// after each epoch. `on_epoch` runs after every epoch (checkpointing).
    pub fn fit(
        &mut self,
        train: &[Example],
        dev: Option<&[Example]>,
        threads: usize,
        mut on_step: impl FnMut(&StepLog),
        mut on_epoch: impl FnMut(&Trainer, &EpochSummary) -> Result<()>,
    ) -> Result<FitSummary> {
        self.plan(train.len(), self.config.epochs);
        let mut summary = FitSummary {
            epochs: Vec::new(),
            best: None,
        };
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch(train, &mut on_step)?;
            let report = match dev {
                Some(d) => Some(evaluate(&self.model, d, threads)?),
                None => None,
            };
            let epoch = EpochSummary {
                stats,
                dev_f1: report.as_ref().map(|r| r.micro.f1),
                dev_nested_f1: report.as_ref().map(|r| r.nested.f1),
            };
            if let Some(r) = report {
                let better = summary.best.as_ref().is_none_or(|(_, _, b)| r.micro.f1 > b.micro.f1);
                if better {
                    summary.best = Some((epoch.stats.epoch, self.model.clone(), r));
                }
            }
            on_epoch(self, &epoch)?;
            summary.epochs.push(epoch);
        }
        Ok(summary)
    }
}
