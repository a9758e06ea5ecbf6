mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bioalbert"))
        .args(args)
        .env("BIOALBERT_HOME", home)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/corpus")
        .join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path();
    assert_eq!(bin(h, &["--help"]).status.code(), Some(0));
    assert_eq!(bin(h, &["--version"]).status.code(), Some(0));
    assert_eq!(bin(h, &[]).status.code(), Some(1));
    assert_eq!(bin(h, &["transmogrify"]).status.code(), Some(1));
    assert_eq!(bin(h, &["report", "--frobnicate"]).status.code(), Some(1));
    let missing = h.join("absent.jsonl");
    // Stochastic stages refuse to run without an explicit seed.
    let o = bin(h, &["train-tokenizer", "--input", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    assert_eq!(
        bin(h, &["train-tokenizer", "--input", p(&missing), "--seed", "1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bin(h, &["evaluate", "--predictions", p(&missing)]).status.code(),
        Some(2)
    );
    let bad = h.join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(bin(h, &["evaluate", "--predictions", p(&bad)]).status.code(), Some(2));
}

#[test]
fn evaluate_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.jsonl");
    fs::write(
        &f,
        concat!(
            r#"{"id":"s1","family":"ner","prediction":[{"type":"Disease","start":0,"end":2}]}"#,
            "\n",
            r#"{"id":"s2","family":"ner","prediction":[{"type":"Chemical","start":3,"end":4},{"type":"Disease","start":5,"end":7}]}"#,
            "\n",
        ),
    )
    .unwrap();
    let o = ok(bin(
        dir.path(),
        &[
            "evaluate",
            "--predictions",
            p(&f),
            "--gold",
            p(&f),
            "--metric",
            "entity-f1",
        ],
    ));
    assert_eq!(stdout(&o), "100.00\n");
}

#[test]
fn evaluate_joins_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    let pred = dir.path().join("pred.jsonl");
    fs::write(
        &gold,
        "{\"id\":\"a\",\"family\":\"re\",\"gold\":\"treat\"}\n\
         {\"id\":\"b\",\"family\":\"re\",\"gold\":\"false\"}\n\
         {\"id\":\"c\",\"family\":\"re\",\"gold\":\"treat\"}\n",
    )
    .unwrap();
    fs::write(
        &pred,
        "{\"id\":\"c\",\"family\":\"re\",\"prediction\":\"false\"}\n\
         {\"id\":\"a\",\"family\":\"re\",\"prediction\":\"treat\"}\n\
         {\"id\":\"b\",\"family\":\"re\",\"prediction\":\"false\"}\n",
    )
    .unwrap();
    let scores = dir.path().join("out/scores.json");
    let o = ok(bin(
        dir.path(),
        &[
            "evaluate",
            "--predictions",
            p(&pred),
            "--gold",
            p(&gold),
            "--record",
            p(&scores),
            "--dataset",
            "DDI",
        ],
    ));
    // One of two positive gold relations found, no false positives.
    assert_eq!(stdout(&o), "66.67\n");
    let o = ok(bin(
        dir.path(),
        &[
            "evaluate",
            "--predictions",
            p(&pred),
            "--gold",
            p(&gold),
            "--include-negative",
        ],
    ));
    assert_eq!(stdout(&o), "66.67\n");

    let o = ok(bin(dir.path(), &["report", "--scores", p(&scores)]));
    let text = stdout(&o);
    assert!(text.contains("DDI"), "{text}");
    assert!(text.contains("66.67"), "{text}");

    let json = ok(bin(dir.path(), &["report", "--scores", p(&scores), "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert!(v.is_object());

    fs::write(&pred, "{\"id\":\"z\",\"family\":\"re\",\"prediction\":\"treat\"}\n").unwrap();
    assert_eq!(
        bin(dir.path(), &["evaluate", "--predictions", p(&pred), "--gold", p(&gold)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn report_reproduces_reference_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&ok(bin(dir.path(), &["report"])));
    for needle in ["Share/Clefe", "+19.44 \u{2191}", "-7.56 \u{2193}", "BioASQ 6b", "95.70"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    let out = dir.path().join("table.json");
    ok(bin(dir.path(), &["report", "--format", "json", "--output", p(&out)]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v.is_object());
    let again = stdout(&ok(bin(dir.path(), &["report"])));
    assert_eq!(text, again);
}

#[test]
fn preprocess_matches_golden_files_and_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path();
    let input = fixture("input.txt");

    ok(bin(h, &["preprocess", "--input", p(&input)]));
    assert_eq!(
        fs::read(h.join("segments.jsonl")).unwrap(),
        fs::read(fixture("expected_512.jsonl")).unwrap()
    );

    let config = h.join("run.conf");
    fs::write(&config, "# shared settings\nmax_words = 8\nthreads=3\n").unwrap();
    let from_config = h.join("eight.jsonl");
    ok(bin(
        h,
        &[
            "--config",
            p(&config),
            "preprocess",
            "--input",
            p(&input),
            "--output",
            p(&from_config),
        ],
    ));
    assert_eq!(
        fs::read(&from_config).unwrap(),
        fs::read(fixture("expected_8.jsonl")).unwrap()
    );

    let overridden = h.join("override.jsonl");
    ok(bin(
        h,
        &[
            "preprocess",
            "--config",
            p(&config),
            "--input",
            p(&input),
            "--max-words",
            "512",
            "--output",
            p(&overridden),
        ],
    ));
    assert_eq!(
        fs::read(&overridden).unwrap(),
        fs::read(fixture("expected_512.jsonl")).unwrap()
    );

    fs::write(&config, "max_words\n").unwrap();
    assert_eq!(
        bin(h, &["--config", p(&config), "preprocess", "--input", p(&input)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn pretraining_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path();
    let corpus = h.join("corpus.txt");
    fs::write(&corpus, common::template_corpus(60, 2)).unwrap();
    ok(bin(h, &["preprocess", "--input", p(&corpus), "--max-words", "12"]));
    ok(bin(
        h,
        &["train-tokenizer", "--vocab-size", "60", "--lower-case", "--seed", "1"],
    ));
    ok(bin(
        h,
        &[
            "build-pretrain-data",
            "--max-seq-len",
            "64",
            "--dupe-factor",
            "2",
            "--seed",
            "4",
        ],
    ));
    let vocab = fs::read_to_string(h.join("vocab.txt")).unwrap();
    assert!(vocab.lines().count() <= 60);
    let examples = fs::read_to_string(h.join("pretrain.jsonl")).unwrap();
    assert!(examples.lines().count() > 10);

    let common = [
        "pretrain",
        "--model",
        "micro",
        "--batch-size",
        "4",
        "--lr",
        "0.01",
        "--warmup-steps",
        "2",
        "--checkpoint-every",
        "5",
        "--seed",
        "8",
    ];
    let full = h.join("full");
    let mut args = common.to_vec();
    args.extend(["--steps", "10", "--output-dir", p(&full)]);
    ok(bin(h, &args));

    let part = h.join("part");
    let mut args = common.to_vec();
    args.extend(["--steps", "10", "--output-dir", p(&part)]);
    ok(bin(h, &args));
    fs::remove_file(part.join("final.balb")).unwrap();
    fs::remove_file(part.join("checkpoint-10.balb")).unwrap();
    let log = fs::read_to_string(part.join("log.csv")).unwrap();
    let first_half: String = log.lines().take(6).map(|l| format!("{l}\n")).collect();
    fs::write(part.join("log.csv"), first_half).unwrap();
    let ckpt = part.join("checkpoint-5.balb");
    let mut args = common.to_vec();
    args.extend(["--steps", "10", "--output-dir", p(&part), "--resume", p(&ckpt)]);
    ok(bin(h, &args));

    for name in ["final.balb", "checkpoint-10.balb", "log.csv"] {
        assert_eq!(
            fs::read(full.join(name)).unwrap(),
            fs::read(part.join(name)).unwrap(),
            "{name}"
        );
    }
    let log = fs::read_to_string(full.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,lr,mlm_loss,sop_loss"));
    assert_eq!(log.lines().count(), 11);
}

#[test]
fn finetune_writes_predictions_that_evaluate_agrees_with() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path();
    let vocab = h.join("vocab.txt");
    common::toy_vocab().save(&vocab).unwrap();
    let ckpt = h.join("init.balb");
    let config = bioalbert::model::ModelConfig::micro(50);
    let params = bioalbert::model::init_model(&config, 1).unwrap();
    bioalbert::model::save_checkpoint(&ckpt, &bioalbert::model::Checkpoint::new(config, params)).unwrap();

    let train = h.join("train.tsv");
    let mut rows = String::from("sentence\tlabel\n");
    for (i, d) in common::DRUGS.iter().enumerate() {
        rows.push_str(&format!(
            "the drug {d} treats {} in patients .\ttreat\n",
            common::treated_by(i)
        ));
        rows.push_str(&format!(
            "{d} and {} in patients .\tfalse\n",
            common::DISEASES[(i + 3) % 8]
        ));
    }
    fs::write(&train, rows).unwrap();
    let out = h.join("re");
    let o = ok(bin(
        h,
        &[
            "finetune",
            "--checkpoint",
            p(&ckpt),
            "--task",
            "re",
            "--train",
            p(&train),
            "--test",
            p(&train),
            "--output-dir",
            p(&out),
            "--steps",
            "300",
            "--batch-size",
            "8",
            "--lr",
            "0.002",
            "--warmup-steps",
            "20",
            "--max-seq-len",
            "32",
            "--checkpoint-every",
            "100",
            "--seed",
            "5",
        ],
    ));
    let printed = stdout(&o);
    assert!(printed.starts_with("micro-f1 "), "{printed}");
    let score = printed.trim().rsplit(' ').next().unwrap().to_string();
    let preds = out.join("predictions.jsonl");
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 16);
    for name in ["checkpoint-100.balb", "checkpoint-300.balb", "final.balb", "log.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let eval = ok(bin(h, &["evaluate", "--predictions", p(&preds)]));
    assert_eq!(stdout(&eval).trim(), score);
    assert_eq!(score, "100.00");
}
