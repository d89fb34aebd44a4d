mod common;

use boningknife::checkpoint::Checkpoint;
use boningknife::eval::evaluate;
use boningknife::train::{Objective, StepLog};
use boningknife::TrainConfig;
use common::{corpus, tiny_trainer};

fn steps(trainer: &mut boningknife::Trainer, batch: &[&boningknife::data::Example], n: usize) -> Vec<StepLog> {
    (0..n).map(|_| trainer.joint_step(batch).unwrap()).collect()
}

#[test]
fn summed_objective_decreases_on_a_fixed_batch() {
    let c = corpus(16, 3);
    let batch: Vec<_> = c.examples.iter().collect();
    let mut t = tiny_trainer(
        &c,
        TrainConfig {
            alternation_period: 0,
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    // keeps the typing candidates at the gold spans so the objective is fixed
    t.model.config.tau_mention = 0.99;
    let logs = steps(&mut t, &batch, 51);
    for w in logs.windows(2) {
        assert!(
            w[1].l_train < w[0].l_train,
            "step {}: {} -> {}",
            w[1].step,
            w[0].l_train,
            w[1].l_train
        );
    }
}

#[test]
fn each_step_updates_only_the_active_objective() {
    let c = corpus(8, 4);
    let batch: Vec<_> = c.examples.iter().collect();
    let mut t = tiny_trainer(&c, TrainConfig::default());
    for _ in 0..4 {
        let before = t.model.params.clone();
        let log = t.joint_step(&batch).unwrap();
        let changed = |prefix: &str| {
            before
                .entries()
                .iter()
                .zip(t.model.params.entries())
                .filter(|(a, _)| a.name.starts_with(prefix))
                .any(|(a, b)| a.value != b.value)
        };
        match log.objective {
            Objective::Tagger => {
                assert!(changed("tagger.") && changed("encoder."));
                assert!(!changed("typer."));
            }
            Objective::Type => {
                assert!(changed("typer.") && changed("encoder."));
                assert!(!changed("tagger."));
            }
            Objective::Joint => unreachable!(),
        }
    }
}

#[test]
fn same_seed_same_losses() {
    let c = corpus(8, 5);
    let run = || {
        let mut t = tiny_trainer(
            &c,
            TrainConfig {
                batch_size: 2,
                token_dropout: 0.1,
                ..Default::default()
            },
        );
        let mut logs = Vec::new();
        t.train_epoch(&c.examples, |l| logs.push(l.clone())).unwrap();
        t.train_epoch(&c.examples, |l| logs.push(l.clone())).unwrap();
        (logs, evaluate(&t.model, &c.examples, 1).unwrap().micro)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_next_steps() {
    let c = corpus(12, 6);
    let config = TrainConfig {
        batch_size: 4,
        epochs: 3,
        lr_decay: true,
        token_dropout: 0.1,
        ..Default::default()
    };
    let mut full = tiny_trainer(&c, config.clone());
    full.plan(c.examples.len(), 3);
    let mut reference = Vec::new();
    for _ in 0..3 {
        full.train_epoch(&c.examples, |l| reference.push(l.clone())).unwrap();
    }

    let mut first = tiny_trainer(&c, config);
    first.plan(c.examples.len(), 3);
    first.train_epoch(&c.examples, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::from_trainer(&first, &c.vocab, &c.labels).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().restore_trainer(None).unwrap();
    let mut after = Vec::new();
    for _ in 0..2 {
        resumed.train_epoch(&c.examples, |l| after.push(l.clone())).unwrap();
    }
    assert_eq!(after, reference[3..]);
    assert_eq!(resumed.model.params, full.model.params);
}

#[test]
fn an_empty_candidate_batch_skips_the_type_update() {
    let c = corpus(8, 7);
    let mut t = tiny_trainer(&c, TrainConfig::default());
    let record = boningknife::data::CorpusRecord {
        tokens: c.records[0].tokens.clone(),
        entities: Vec::new(),
    };
    let plain = &boningknife::data::Example::from_record(&record, &c.vocab, &c.labels, 64, 12).unwrap();
    t.model.config.tau_mention = 0.999_999;
    t.joint_step(&[plain]).unwrap();
    let log = t.joint_step(&[plain]).unwrap();
    assert_eq!(log.objective, Objective::Type);
    assert!(!log.updated);
    assert_eq!(log.l_type, 0.0);
    assert!(t.empty_candidate_sentences >= 1);
}
