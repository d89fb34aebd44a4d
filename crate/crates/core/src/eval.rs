//! Exact-match evaluation, flat/nested breakdown and candidate benchmarking.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{enumerate_spans, Example, GoldEntity};
use crate::error::{Error, Result};
use crate::model::{decode_entities, Model, PredictedEntity};
use crate::tape::Tape;

/// `(start, end, class)`.
pub type Labeled = (usize, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    /// Perfect score when there is nothing to find and nothing predicted.
    fn vacuous(self) -> Self {
        if self.tp + self.fp + self.fn_ == 0 {
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                ..self
            }
        } else {
            self
        }
    }
}

fn check_lengths<A, B>(pred: &[A], gold: &[B]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predicted sentences against {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Micro precision, recall and F1 under exact `(start, end, type)` match.
pub fn micro_prf(pred: &[Vec<Labeled>], gold: &[Vec<Labeled>]) -> Result<Prf> {
    check_lengths(pred, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let p: BTreeSet<_> = p.iter().copied().collect();
        let g: BTreeSet<_> = g.iter().copied().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_).vacuous())
}

/// Whether each entity overlaps another one in the same list.
pub fn nested_flags(entities: &[Labeled]) -> Vec<bool> {
    entities
        .iter()
        .enumerate()
        .map(|(i, a)| {
            entities
                .iter()
                .enumerate()
                .any(|(j, b)| i != j && (a.0, a.1) != (b.0, b.1) && a.0 <= b.1 && b.0 <= a.1)
        })
        .collect()
}

/// Scores flat and nested gold entities separately. A gold entity is nested
/// if it overlaps another gold entity. A correct prediction counts toward the
/// subset of the gold entity it matches; a wrong one toward the subset given
/// by its overlap status among the predictions.
pub fn flat_nested_prf(pred: &[Vec<Labeled>], gold: &[Vec<Labeled>]) -> Result<(Prf, Prf)> {
    check_lengths(pred, gold)?;
    let mut counts = [[0usize; 3]; 2];
    for (p, g) in pred.iter().zip(gold) {
        let p: Vec<Labeled> = p.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let g: Vec<Labeled> = g.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let g_nested = nested_flags(&g);
        let p_nested = nested_flags(&p);
        for (e, &nested) in g.iter().zip(&g_nested) {
            let k = nested as usize;
            if p.contains(e) {
                counts[k][0] += 1;
            } else {
                counts[k][2] += 1;
            }
        }
        for (e, &nested) in p.iter().zip(&p_nested) {
            if !g.contains(e) {
                counts[nested as usize][1] += 1;
            }
        }
    }
    let f = |c: [usize; 3]| Prf::from_counts(c[0], c[1], c[2]).vacuous();
    Ok((f(counts[0]), f(counts[1])))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub encode_tag_secs: f64,
    pub typing_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub micro: Prf,
    pub flat: Prf,
    pub nested: Prf,
    pub gold_entities: usize,
    pub predicted_entities: usize,
    /// Candidate spans passed to typing.
    pub candidates: usize,
    /// Spans enumerated by the tagger.
    pub enumerated_spans: usize,
    /// All `n (n + 1) / 2` spans.
    pub all_spans: usize,
    /// Fraction of distinct gold spans among the candidates.
    pub candidate_recall: f64,
    pub candidate_precision: f64,
    pub timings: StageTimings,
}

/// Predictions for one sentence with its stage timings.
#[derive(Clone, Debug)]
pub struct SentenceResult {
    pub entities: Vec<PredictedEntity>,
    pub candidates: Vec<(usize, usize)>,
    pub enumerated: usize,
    pub tag_secs: f64,
    pub typing_secs: f64,
}

pub fn predict_timed(model: &Model, example: &Example) -> Result<SentenceResult> {
    let mut tape = Tape::new(&model.params);
    let t0 = Instant::now();
    let tagged = model.tag(&mut tape, &example.sentence, None)?;
    let tag_secs = t0.elapsed().as_secs_f64();
    let cands = model.candidates(&tagged, &[]);
    let t1 = Instant::now();
    let typed = model.type_spans(&mut tape, &tagged, &cands.spans(), None)?;
    let typing_secs = t1.elapsed().as_secs_f64();
    Ok(SentenceResult {
        entities: decode_entities(&typed),
        candidates: cands.spans(),
        enumerated: tagged.spans.len(),
        tag_secs,
        typing_secs,
    })
}

/// Worker threads from `BONINGKNIFE_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("BONINGKNIFE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f` over `items` on at most `threads` workers, preserving order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn gold_labeled(gold: &[GoldEntity]) -> Vec<Labeled> {
    gold.iter().map(|g| (g.start, g.end, g.label)).collect()
}

pub fn evaluate(model: &Model, examples: &[Example], threads: usize) -> Result<EvalReport> {
    let started = Instant::now();
    let results = parallel_map(examples, threads, |ex| predict_timed(model, ex))?;
    let pred: Vec<Vec<Labeled>> = results
        .iter()
        .map(|r| r.entities.iter().map(|e| (e.start, e.end, e.label)).collect())
        .collect();
    let gold: Vec<Vec<Labeled>> = examples.iter().map(|e| gold_labeled(&e.gold)).collect();
    let micro = micro_prf(&pred, &gold)?;
    let (flat, nested) = flat_nested_prf(&pred, &gold)?;
    let mut report = EvalReport {
        sentences: examples.len(),
        micro,
        flat,
        nested,
        ..Default::default()
    };
    let (mut hit, mut gold_spans) = (0usize, 0usize);
    for (r, ex) in results.iter().zip(examples) {
        let spans: BTreeSet<(usize, usize)> = ex.gold.iter().map(|g| (g.start, g.end)).collect();
        gold_spans += spans.len();
        hit += r.candidates.iter().filter(|s| spans.contains(s)).count();
        report.candidates += r.candidates.len();
        report.enumerated_spans += r.enumerated;
        let n = ex.sentence.len();
        report.all_spans += n * (n + 1) / 2;
        report.gold_entities += ex.gold.len();
        report.predicted_entities += r.entities.len();
        report.timings.encode_tag_secs += r.tag_secs;
        report.timings.typing_secs += r.typing_secs;
    }
    report.candidate_recall = if gold_spans == 0 { 1.0 } else { hit as f64 / gold_spans as f64 };
    report.candidate_precision = if report.candidates == 0 {
        0.0
    } else {
        hit as f64 / report.candidates as f64
    };
    report.timings.total_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Typing cost and accuracy with tagger candidates against typing every span.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub sentences: usize,
    pub enumerated_spans: usize,
    pub tagger_candidates: usize,
    pub candidate_ratio: f64,
    pub candidate_recall: f64,
    pub encode_tag_secs: f64,
    pub tagger_typing_secs: f64,
    pub all_span_typing_secs: f64,
    /// `all_span_typing_secs / tagger_typing_secs`.
    pub typing_speedup: f64,
    pub tagger_f1: f64,
    pub all_span_f1: f64,
}

pub fn bench_candidates(model: &Model, examples: &[Example]) -> Result<BenchReport> {
    let mut report = BenchReport {
        sentences: examples.len(),
        ..Default::default()
    };
    let mut pred_tagger = Vec::new();
    let mut pred_all = Vec::new();
    let mut gold = Vec::new();
    let (mut hit, mut gold_spans) = (0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::new(&model.params);
        let t0 = Instant::now();
        let tagged = model.tag(&mut tape, &ex.sentence, None)?;
        report.encode_tag_secs += t0.elapsed().as_secs_f64();
        let cands = model.candidates(&tagged, &[]).spans();

        let t1 = Instant::now();
        let typed = model.type_spans(&mut tape, &tagged, &cands, None)?;
        report.tagger_typing_secs += t1.elapsed().as_secs_f64();
        pred_tagger.push(decode_entities(&typed).iter().map(|e| (e.start, e.end, e.label)).collect());

        let all = enumerate_spans(ex.sentence.len(), model.config.max_span_len);
        let t2 = Instant::now();
        let typed_all = model.type_spans(&mut tape, &tagged, &all, None)?;
        report.all_span_typing_secs += t2.elapsed().as_secs_f64();
        pred_all.push(decode_entities(&typed_all).iter().map(|e| (e.start, e.end, e.label)).collect());

        let spans: BTreeSet<(usize, usize)> = ex.gold.iter().map(|g| (g.start, g.end)).collect();
        gold_spans += spans.len();
        hit += cands.iter().filter(|s| spans.contains(s)).count();
        report.enumerated_spans += all.len();
        report.tagger_candidates += cands.len();
        gold.push(gold_labeled(&ex.gold));
    }
    report.candidate_ratio = if report.enumerated_spans == 0 {
        0.0
    } else {
        report.tagger_candidates as f64 / report.enumerated_spans as f64
    };
    report.candidate_recall = if gold_spans == 0 { 1.0 } else { hit as f64 / gold_spans as f64 };
    report.typing_speedup = report.all_span_typing_secs / report.tagger_typing_secs.max(1e-12);
    report.tagger_f1 = micro_prf(&pred_tagger, &gold)?.f1;
    report.all_span_f1 = micro_prf(&pred_all, &gold)?.f1;
    Ok(report)
}
