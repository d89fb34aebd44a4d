use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boningknife"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small model that trains in seconds.
const SMALL: &str = r#"{
  "model": {"d_model": 32, "encoder_blocks": 1, "encoder_heads": 4, "heads": 4,
            "d_low": 16, "d_span": 16, "d_hidden": 32, "max_len": 64, "max_span_len": 12},
  "train": {"batch_size": 2, "lr": 0.003, "weight_decay": 0.0, "epochs": 2}
}"#;

fn gen(dir: &Path, sentences: usize) {
    let o = run(&["gen", "--out", p(dir), "--seed", "7", "--sentences", &sentences.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_is_deterministic_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 50);
    gen(&b, 50);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = |f: &str| fs::read_to_string(a.join(f)).unwrap().lines().count();
    assert_eq!((lines("train.jsonl"), lines("dev.jsonl"), lines("test.jsonl")), (40, 5, 5));

    let again = run(&["gen", "--out", p(&a), "--seed", "7", "--sentences", "50"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    let forced = run(&["gen", "--out", p(&a), "--seed", "8", "--sentences", "50", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());

    // re-running from the echoed config reproduces the corpus
    let c = tmp.path().join("c");
    let echo = run(&["gen", "--out", p(&c), "--config", p(&b.join("config.json"))]);
    assert_eq!(code(&echo), 0, "{}", stderr(&echo));
    assert_eq!(fs::read(c.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());
}

#[test]
fn bad_split_ratios_are_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--out", p(tmp.path()), "--split", "0.8,0.1,0.2"]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("train.jsonl").exists());
}

#[test]
fn unknown_config_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20);
    let cfg = write_config(tmp.path(), r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#);
    let o = run(&[
        "train",
        "--train",
        p(&tmp.path().join("train.jsonl")),
        "--out",
        p(&tmp.path().join("run")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["nonsense"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20);
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--train",
        p(&tmp.path().join("train.jsonl")),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--epochs",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt: Value = serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(ckpt["progress"]["step"], 0);
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap(), "");
    // the echoed config carries the override
    let echoed: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["epochs"], 0);
    let vocab = fs::read_to_string(out.join("vocab.txt")).unwrap();
    let first: Vec<&str> = vocab.lines().take(4).collect();
    assert_eq!(first, ["<pad>", "<unk>", "<s>", "</s>"]);
}

#[test]
fn data_errors_exit_two_and_shape_errors_name_the_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20);
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--train",
        p(&tmp.path().join("train.jsonl")),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--epochs",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = out.join("model.json");

    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"tokens\":[\"a\",\"b\"],\"entities\":[{\"start\":1,\"end\":0,\"type\":\"PER\"}]}\n").unwrap();
    let o = run(&["eval", "--model", p(&model), "--data", p(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    fs::write(&bad, "not json\n").unwrap();
    assert_eq!(code(&run(&["predict", "--model", p(&model), "--data", p(&bad)])), 2);

    let mut ckpt: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let params = ckpt["params"].as_array_mut().unwrap();
    let victim = params
        .iter_mut()
        .find(|t| t["name"] == "typer.fusion.weight")
        .expect("parameter present");
    victim["shape"] = serde_json::json!([1, 1]);
    victim["values"] = serde_json::json!([0.0]);
    let broken = tmp.path().join("broken.json");
    fs::write(&broken, serde_json::to_string(&ckpt).unwrap()).unwrap();
    let o = run(&["eval", "--model", p(&broken), "--data", p(&tmp.path().join("dev.jsonl"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("typer.fusion.weight"), "{}", stderr(&o));
}

fn train_small(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = write_config(dir, SMALL);
    let train = dir.join("train.jsonl");
    let mut args = vec!["train", "--train", p(&train), "--out", p(out), "--config", p(&cfg)];
    args.extend_from_slice(extra);
    run(&args)
}

fn log_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 12);
    let full = tmp.path().join("full");
    let o = train_small(tmp.path(), &full, &["--epochs", "2", "--checkpoint-every", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(full.join("checkpoint-epoch1.json").exists());
    assert!(full.join("checkpoint-epoch2.json").exists());

    let half = tmp.path().join("half");
    let o = train_small(tmp.path(), &half, &["--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = tmp.path().join("resumed");
    let o = train_small(
        tmp.path(),
        &resumed,
        &["--epochs", "2", "--resume", p(&half.join("checkpoint-epoch1.json"))],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let reference = log_lines(&full.join("train_log.jsonl"));
    let first = log_lines(&half.join("train_log.jsonl"));
    let second = log_lines(&resumed.join("train_log.jsonl"));
    assert!(!second.is_empty());
    assert_eq!(reference[..first.len()], first[..]);
    assert_eq!(reference[first.len()..], second[..]);
    for line in &reference {
        for key in ["step", "objective", "l_start", "l_end", "l_entity_detection", "l_mention", "alpha", "l_type"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(
        fs::read(full.join("model.json")).unwrap(),
        fs::read(resumed.join("model.json")).unwrap()
    );
}

#[test]
fn predict_handles_empty_corpora_and_dumps_attention() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20);
    let out = tmp.path().join("run");
    let o = train_small(tmp.path(), &out, &["--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = out.join("model.json");

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = run(&["predict", "--model", p(&model), "--data", p(&empty)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let five = tmp.path().join("five.jsonl");
    fs::write(&five, "{\"tokens\":[\"a\",\"b\",\"c\",\"d\",\"e\"]}\n").unwrap();
    let dump = tmp.path().join("att");
    let pred = tmp.path().join("pred.jsonl");
    let o = run(&[
        "predict",
        "--model",
        p(&model),
        "--data",
        p(&five),
        "--out",
        p(&pred),
        "--dump-attention",
        p(&dump),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut files: Vec<String> = fs::read_dir(&dump)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["00000_focus.csv", "00000_global.csv"]);
    for f in &files {
        let text = fs::read_to_string(dump.join(f)).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 7);
        for row in &rows {
            assert_eq!(row.len(), 7);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        }
    }
    let line: Value = serde_json::from_str(fs::read_to_string(&pred).unwrap().trim()).unwrap();
    assert_eq!(line["tokens"].as_array().unwrap().len(), 5);
    assert!(line["entities"].is_array());
}

#[test]
fn an_overfit_model_scores_perfectly_on_its_training_set() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 10);
    let out = tmp.path().join("run");
    let o = train_small(tmp.path(), &out, &["--epochs", "60", "--checkpoint-every", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = tmp.path().join("report.json");
    let o = run(&[
        "eval",
        "--model",
        p(&out.join("model.json")),
        "--data",
        p(&tmp.path().join("train.jsonl")),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["micro"]["f1"], 1.0, "{r}");

    // bench and multi-threaded evaluation agree with the single-threaded report
    let o = run(&["bench", "--model", p(&out.join("model.json")), "--data", p(&tmp.path().join("train.jsonl"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(b["tagger_f1"], 1.0);
    let o = Command::new(env!("CARGO_BIN_EXE_boningknife"))
        .args(["eval", "--model", p(&out.join("model.json")), "--data", p(&tmp.path().join("train.jsonl"))])
        .env("BONINGKNIFE_THREADS", "3")
        .output()
        .unwrap();
    let threaded: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(threaded["micro"], r["micro"]);
}
