use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use boningknife::checkpoint::Checkpoint;
use boningknife::data::{load_corpus, prepare_examples, CorpusRecord, LabelSet, Sentence, Vocab};
use boningknife::eval::{bench_candidates, evaluate, parallel_map, thread_count};
use boningknife::model::{decode_entities, Model};
use boningknife::synth::{generate, split};
use boningknife::{Error, Result, Tape, Trainer};
use serde::Serialize;

use crate::run_config::{set, RunConfig};
use crate::{EvalArgs, GenArgs, PredictArgs, TrainArgs};

const SPLIT_FILES: [&str; 3] = ["train.jsonl", "dev.jsonl", "test.jsonl"];

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, text + "\n")?;
    }
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    let s = &mut config.synth;
    set(&mut s.seed, a.seed);
    set(&mut s.sentences, a.sentences);
    set(&mut s.num_types, a.types);
    set(&mut s.max_depth, a.depth);
    set(&mut s.vocab_size, a.vocab_size);
    set(&mut s.nest_prob, a.nest_prob);
    if let Some(r) = a.split {
        config.split = [r[0], r[1], r[2]];
    }
    let records = generate(&config.synth)?;
    let parts = split(records, config.split)?;
    if !a.force {
        if let Some(f) = SPLIT_FILES.iter().find(|f| a.out.join(f).exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                a.out.join(f).display()
            )));
        }
    }
    fs::create_dir_all(&a.out)?;
    for (name, part) in SPLIT_FILES.iter().zip(&parts) {
        boningknife::data::write_corpus(&a.out.join(name), part)?;
    }
    config.save(&a.out.join("config.json"))?;
    log::info!(
        "wrote {} / {} / {} sentences to {}",
        parts[0].len(),
        parts[1].len(),
        parts[2].len(),
        a.out.display()
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(BufWriter::new(file))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    let t = &mut config.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.lr, a.lr);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.seed, a.seed);
    set(&mut t.checkpoint_every, a.checkpoint_every);
    set(&mut config.model.d_model, a.d_model);
    set(&mut config.model.max_span_len, a.max_span_len);
    config.train.validate()?;

    let train_records = load_corpus(&a.train)?;
    let dev_records = a.dev.as_deref().map(load_corpus).transpose()?;

    let (mut trainer, vocab, labels) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            config.model = ckpt.model.clone();
            let trainer = ckpt.restore_trainer(Some(config.train.clone()))?;
            (trainer, ckpt.vocab()?, ckpt.labels.clone())
        }
        None => {
            let vocab = Vocab::from_records(&train_records);
            let labels = LabelSet::from_records(&train_records);
            config.model.vocab_size = vocab.len();
            config.model.num_types = labels.len();
            let model = Model::new(config.model.clone(), config.train.seed)?;
            (Trainer::new(model, config.train.clone())?, vocab, labels)
        }
    };
    let m = &config.model;
    let train_examples = prepare_examples(&train_records, &vocab, &labels, m.max_len, m.max_span_len)?;
    let dev_examples = dev_records
        .as_ref()
        .map(|r| prepare_examples(r, &vocab, &labels, m.max_len, m.max_span_len))
        .transpose()?;

    fs::create_dir_all(&a.out)?;
    config.save(&a.out.join("config.json"))?;
    vocab.save(&a.out.join("vocab.txt"))?;
    log::info!(
        "{} training sentences, {} types, {} parameters",
        train_examples.len(),
        labels.len(),
        trainer.model.params.num_scalars()
    );

    let mut log_file = open_log(&a.out.join("train_log.jsonl"), a.resume.is_some())?;
    let mut log_error = None;
    let every = config.train.checkpoint_every;
    let out = a.out.clone();
    let summary = trainer.fit(
        &train_examples,
        dev_examples.as_deref(),
        thread_count(),
        |step| {
            if let Err(e) = serde_json::to_writer(&mut log_file, step)
                .map_err(io::Error::from)
                .and_then(|_| log_file.write_all(b"\n"))
            {
                log_error.get_or_insert(e);
            }
        },
        |tr, epoch| {
            log::info!(
                "epoch {} done in {:.1}s: tagger {:.4}, type {:.4}{}",
                tr.epoch,
                epoch.stats.seconds,
                epoch.stats.mean_l_tagger,
                epoch.stats.mean_l_type,
                epoch.dev_f1.map(|f| format!(", dev F1 {f:.4}")).unwrap_or_default()
            );
            if every > 0 && tr.epoch % every == 0 {
                Checkpoint::from_trainer(tr, &vocab, &labels).save(&out.join(format!("checkpoint-epoch{}.json", tr.epoch)))?;
            }
            Ok(())
        },
    )?;
    log_file.flush()?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    Checkpoint::from_trainer(&trainer, &vocab, &labels).save(&a.out.join("model.json"))?;
    if let Some((epoch, model, report)) = &summary.best {
        Checkpoint::from_model(model, &vocab, &labels).save(&a.out.join("best.json"))?;
        log::info!("best dev F1 {:.4} after epoch {}", report.micro.f1, epoch + 1);
    }
    write_json(&summary.epochs, Some(&a.out.join("epochs.json")))?;
    Ok(())
}

struct Loaded {
    model: Model,
    vocab: Vocab,
    labels: LabelSet,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Loaded {
        model: ckpt.restore_model()?,
        vocab: ckpt.vocab()?,
        labels: ckpt.labels,
    })
}

fn labelled(a: &EvalArgs) -> Result<(Model, Vec<boningknife::data::Example>)> {
    let l = load_model(&a.model)?;
    let records = load_corpus(&a.data)?;
    let c = &l.model.config;
    let examples = prepare_examples(&records, &l.vocab, &l.labels, c.max_len, c.max_span_len)?;
    Ok((l.model, examples))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, examples) = labelled(&a)?;
    let report = evaluate(&model, &examples, thread_count())?;
    write_json(&report, a.out.as_deref())
}

pub fn bench(a: EvalArgs) -> Result<()> {
    let (model, examples) = labelled(&a)?;
    let report = bench_candidates(&model, &examples)?;
    write_json(&report, a.out.as_deref())
}

#[derive(Serialize)]
struct OutEntity<'a> {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: &'a str,
    prob: f64,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    tokens: &'a [String],
    entities: Vec<OutEntity<'a>>,
}

struct Tagged {
    entities: Vec<(usize, usize, usize, f64)>,
    attention: Option<[(usize, Vec<f64>); 2]>,
}

fn tag_record(l: &Loaded, record: &CorpusRecord, dump: bool) -> Result<Tagged> {
    let sentence = Sentence::encode(&record.tokens, &l.vocab, l.model.config.max_len)?;
    let mut tape = Tape::new(&l.model.params);
    let tagged = l.model.tag(&mut tape, &sentence, None)?;
    let cands = l.model.candidates(&tagged, &[]);
    let typed = l.model.type_spans(&mut tape, &tagged, &cands.spans(), None)?;
    let entities = decode_entities(&typed)
        .into_iter()
        .map(|e| (e.start, e.end, e.label, e.prob))
        .collect();
    let attention = dump.then(|| {
        [tagged.dual.global_attention, tagged.dual.focus_attention].map(|v| {
            let w = tape.attention_weights(v).expect("attention node");
            (w.cols, w.mean_over_heads())
        })
    });
    Ok(Tagged { entities, attention })
}

fn write_matrix(path: &Path, cols: usize, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let records = load_corpus(&a.data)?;
    let dump = a.dump_attention.is_some();
    let results = parallel_map(&records, thread_count(), |r| tag_record(&l, r, dump))
        .map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", a.data.display())),
            other => other,
        })?;
    if let Some(dir) = &a.dump_attention {
        fs::create_dir_all(dir)?;
        for (i, r) in results.iter().enumerate() {
            if let Some([(gc, g), (fc, f)]) = &r.attention {
                write_matrix(&dir.join(format!("{i:05}_global.csv")), *gc, g)?;
                write_matrix(&dir.join(format!("{i:05}_focus.csv")), *fc, f)?;
            }
        }
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (record, r) in records.iter().zip(&results) {
        let entities = r
            .entities
            .iter()
            .map(|&(start, end, class, prob)| OutEntity {
                start,
                end,
                label: l.labels.name(class).unwrap_or("?"),
                prob,
            })
            .collect();
        serde_json::to_writer(
            &mut out,
            &OutRecord {
                tokens: &record.tokens,
                entities,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
