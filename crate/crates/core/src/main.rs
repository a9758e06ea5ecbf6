use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use bioalbert::corpus::{pack_documents, read_corpus, read_jsonl, write_jsonl, Segment};
use bioalbert::metrics::{evaluate, format_pct, join_records, Average, EvalOptions, Metric, PredictionRecord};
use bioalbert::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ParameterStore};
use bioalbert::optim::{OptState, OptimizerConfig};
use bioalbert::pretrain::{pretrain, write_log_row, PretrainConfig, LOG_HEADER};
use bioalbert::pretrain_data::{
    build_pretrain_set, tokenize_segments, MaskingConfig, PretrainDataConfig, PretrainExample,
};
use bioalbert::report::{compare_to_reference, reproduce, DatasetScore, EvalReport, ReferenceTable};
use bioalbert::tasks::{finetune, load_conll, load_qa, load_tsv, predict, Dataset, TaskConfig, TaskFamily, TsvSchema};
use bioalbert::tokenizer::{train_unigram_with, TrainerConfig, Vocab};

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Biomedical ALBERT pipeline: corpus preparation, tokenizer, pretraining,
/// fine-tuning and evaluation.
#[derive(Parser, Debug)]
#[command(name = "bioalbert", version)]
struct Cli {
    /// Flat key=value file of flag defaults; explicit flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a raw corpus into documents and pack them into word segments.
    #[command(args_override_self = true)]
    Preprocess(PreprocessArgs),
    /// Train a unigram subword vocabulary on a segment file.
    #[command(args_override_self = true)]
    TrainTokenizer(TrainTokenizerArgs),
    /// Build masked sentence-order pretraining examples.
    #[command(args_override_self = true)]
    BuildPretrainData(BuildDataArgs),
    /// Pretrain the encoder with MLM + SOP and LAMB.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Fine-tune a task head and write test-set predictions.
    #[command(args_override_self = true)]
    Finetune(FinetuneArgs),
    /// Score a prediction file.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Reference comparison table, reproduced from the bundled results.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Corpus file or directory of files.
    #[arg(long)]
    input: PathBuf,
    /// Segment JSONL [default: $BIOALBERT_HOME/segments.jsonl]
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    max_words: usize,
    #[arg(long, default_value_t = 20)]
    min_chars: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct TrainTokenizerArgs {
    /// Segment JSONL [default: $BIOALBERT_HOME/segments.jsonl]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Vocabulary file [default: $BIOALBERT_HOME/vocab.txt]
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    #[arg(long)]
    lower_case: bool,
    #[arg(long, default_value_t = 16)]
    max_piece_chars: usize,
    #[arg(long, default_value_t = 2)]
    em_iterations: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_sentences: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BuildDataArgs {
    /// Segment JSONL [default: $BIOALBERT_HOME/segments.jsonl]
    #[arg(long)]
    segments: Option<PathBuf>,
    /// [default: $BIOALBERT_HOME/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Example JSONL [default: $BIOALBERT_HOME/pretrain.jsonl]
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 5)]
    dupe_factor: usize,
    #[arg(long, default_value_t = 20)]
    max_predictions: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    swap_prob: f64,
    #[arg(long)]
    lower_case: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelSize {
    Base,
    Large,
    Micro,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelSize::Base)]
    model: ModelSize,
    #[arg(long)]
    embedding_size: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_size: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
}

impl ModelArgs {
    fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = match self.model {
            ModelSize::Base => ModelConfig::base(vocab_size),
            ModelSize::Large => ModelConfig::large(vocab_size),
            ModelSize::Micro => ModelConfig::micro(vocab_size),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.embedding_size, self.embedding_size);
        set(&mut c.hidden_size, self.hidden_size);
        set(&mut c.num_layers, self.num_layers);
        set(&mut c.num_heads, self.num_heads);
        set(&mut c.ffn_size, self.ffn_size);
        set(&mut c.max_positions, self.max_positions);
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Example JSONL [default: $BIOALBERT_HOME/pretrain.jsonl]
    #[arg(long)]
    examples: Option<PathBuf>,
    /// [default: $BIOALBERT_HOME/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// [default: $BIOALBERT_HOME/pretrain]
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Start from these weights instead of a fresh initialisation.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue from a checkpoint, optimizer state included.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.00176)]
    lr: f64,
    #[arg(long, default_value_t = 3125)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 10_000)]
    checkpoint_every: u64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// [default: $BIOALBERT_HOME/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_family)]
    task: TaskFamily,
    /// Training data: CoNLL for ner, JSONL for qa, TSV otherwise.
    #[arg(long)]
    train: PathBuf,
    /// Data to predict after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// [default: $BIOALBERT_HOME/finetune-<task>]
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Class labels for re, comma separated [default: sorted training labels]
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    text_column: Option<String>,
    #[arg(long)]
    text2_column: Option<String>,
    #[arg(long)]
    target_column: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 320)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// [default: 512 for ner, 128 otherwise]
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Keep letter case (inputs are lower-cased by default).
    #[arg(long)]
    cased: bool,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 30)]
    max_answer_len: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AverageArg {
    Micro,
    Macro,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Gold records joined on id; without it each record's gold field is used.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// [default: the family's metric]
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Relation class excluded from micro F1 (repeatable) [default: detected]
    #[arg(long)]
    negative_class: Vec<String>,
    #[arg(long)]
    include_negative: bool,
    #[arg(long, value_enum, default_value_t = AverageArg::Micro)]
    average: AverageArg,
    /// Add the score to this JSON score file under --dataset.
    #[arg(long, requires = "dataset")]
    record: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Format {
    Text,
    Json,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Reference results JSON [default: bundled]
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Score file written by `evaluate --record`; compared with the reference.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// [default: stdout]
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<TaskFamily, String> {
    s.parse().map_err(|e: bioalbert::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: bioalbert::Error| e.to_string())
}

fn home() -> PathBuf {
    std::env::var_os("BIOALBERT_HOME").map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn or_home(p: &Option<PathBuf>, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| home().join(name))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

/// Reads `--config` and splices its entries in right after the subcommand
/// name, so flags given on the command line override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let v = it.next().ok_or_else(|| usage("--config needs a path"))?;
            config = Some(PathBuf::from(v));
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        match value.trim() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => injected.push(OsString::from(format!("--{key}={v}"))),
        }
    }
    let names = [
        "preprocess",
        "train-tokenizer",
        "build-pretrain-data",
        "pretrain",
        "finetune",
        "evaluate",
        "report",
    ];
    let at = rest
        .iter()
        .position(|a| names.contains(&a.to_string_lossy().as_ref()))
        .ok_or_else(|| usage("missing subcommand"))?;
    rest.splice(at + 1..at + 1, injected);
    Ok(rest)
}

fn run_preprocess(a: &PreprocessArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    let docs = read_corpus(&a.input, a.min_chars)?;
    let segments = pack_documents(&docs, a.max_words, a.threads)?;
    let out = or_home(&a.output, "segments.jsonl");
    ensure_parent(&out)?;
    write_jsonl(&out, &segments)?;
    eprintln!(
        "{} documents, {} segments -> {}",
        docs.len(),
        segments.len(),
        out.display()
    );
    Ok(())
}

fn run_train_tokenizer(a: &TrainTokenizerArgs) -> Result<()> {
    let input = or_home(&a.input, "segments.jsonl");
    require_file(&input, "segment file")?;
    let segments: Vec<Segment> = read_jsonl(&input)?;
    let lines: Vec<String> = segments.iter().map(|s| s.words.join(" ")).collect();
    let config = TrainerConfig {
        target_size: a.vocab_size,
        max_piece_chars: a.max_piece_chars,
        em_iterations: a.em_iterations,
        lower_case: a.lower_case,
        max_sentences: a.max_sentences,
        seed: a.seed,
        ..TrainerConfig::default()
    };
    let (vocab, _) = train_unigram_with(&lines, &config)?;
    let out = or_home(&a.output, "vocab.txt");
    ensure_parent(&out)?;
    vocab.save(&out)?;
    eprintln!("{} pieces -> {}", vocab.size(), out.display());
    Ok(())
}

fn run_build_data(a: &BuildDataArgs) -> Result<()> {
    let seg_path = or_home(&a.segments, "segments.jsonl");
    let vocab_path = or_home(&a.vocab, "vocab.txt");
    require_file(&seg_path, "segment file")?;
    require_file(&vocab_path, "vocabulary")?;
    let segments: Vec<Segment> = read_jsonl(&seg_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let config = PretrainDataConfig {
        max_seq_len: a.max_seq_len,
        masking: MaskingConfig {
            mask_prob: a.mask_prob,
            max_predictions: a.max_predictions,
            ..MaskingConfig::default()
        },
        dupe_factor: a.dupe_factor,
        swap_prob: a.swap_prob,
        lower_case: a.lower_case,
        seed: a.seed,
    };
    let docs = tokenize_segments(&segments, &vocab, a.lower_case);
    let examples = build_pretrain_set(&docs, vocab.size(), &config, a.threads)?;
    let out = or_home(&a.output, "pretrain.jsonl");
    ensure_parent(&out)?;
    write_jsonl(&out, &examples)?;
    eprintln!("{} examples -> {}", examples.len(), out.display());
    Ok(())
}

fn to_checkpoint(model: &ModelConfig, params: &ParameterStore<f32>, state: &OptState<f32>) -> Checkpoint {
    Checkpoint {
        config: model.clone(),
        step: state.step,
        params: params.clone(),
        first_moments: state.m.clone(),
        second_moments: state.v.clone(),
    }
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let examples_path = or_home(&a.examples, "pretrain.jsonl");
    require_file(&examples_path, "example file")?;
    let examples: Vec<PretrainExample> = read_jsonl(&examples_path)?;
    let dir = or_home(&a.output_dir, "pretrain");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (model, mut params, mut state) = if let Some(path) = a.resume.as_ref().or(a.init.as_ref()) {
        let ckpt = load_checkpoint(path)?;
        let mut state = OptState::new(OptimizerConfig::default());
        if a.resume.is_some() {
            state.step = ckpt.step;
            state.m = ckpt.first_moments;
            state.v = ckpt.second_moments;
        }
        (ckpt.config, ckpt.params, state)
    } else {
        let vocab_path = or_home(&a.vocab, "vocab.txt");
        require_file(&vocab_path, "vocabulary")?;
        let model = a.model.build(Vocab::load(&vocab_path)?.size())?;
        let params = init_model(&model, a.seed)?;
        (model, params, OptState::new(OptimizerConfig::default()))
    };
    if let Some(bad) = examples
        .iter()
        .flat_map(|e| e.input_ids.iter().chain(&e.mlm_labels))
        .find(|&&id| id as usize >= model.vocab_size)
    {
        bail!(
            "example token id {bad} is outside the model vocabulary of {}",
            model.vocab_size
        );
    }
    let config = PretrainConfig {
        total_steps: a.steps,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
    };
    if a.warmup_steps > a.steps {
        return Err(usage("--warmup-steps exceeds --steps"));
    }

    let log_path = dir.join("log.csv");
    let mut log = if a.resume.is_some() && log_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w =
            BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
        writeln!(w, "{LOG_HEADER}")?;
        w
    };
    let mut io_err = None;
    pretrain(
        &mut params,
        &mut state,
        &model,
        &examples,
        &config,
        |row, params, state| {
            if let Err(e) = write_log_row(&mut log, row) {
                io_err = Some(e);
            }
            if a.checkpoint_every > 0 && row.step % a.checkpoint_every == 0 {
                save_checkpoint(
                    dir.join(format!("checkpoint-{}.balb", row.step)),
                    &to_checkpoint(&model, params, state),
                )?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = io_err {
        return Err(anyhow!(e).context("writing pretraining log"));
    }
    log.flush()?;
    save_checkpoint(dir.join("final.balb"), &to_checkpoint(&model, &params, &state))?;
    eprintln!("pretrained to step {} -> {}", state.step, dir.display());
    Ok(())
}

fn load_task_data(
    path: &Path,
    family: TaskFamily,
    schema: Option<&TsvSchema>,
    labels: Option<&[String]>,
) -> Result<Dataset> {
    require_file(path, "dataset")?;
    let data = match family {
        TaskFamily::Ner => load_conll(path)?,
        TaskFamily::Qa => load_qa(path)?,
        _ => load_tsv(path, family, schema.expect("tsv schema"), labels)?,
    };
    Ok(data)
}

fn run_finetune(a: &FinetuneArgs) -> Result<()> {
    let vocab_path = or_home(&a.vocab, "vocab.txt");
    require_file(&vocab_path, "vocabulary")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let vocab = Vocab::load(&vocab_path)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;

    let schema = match a.task {
        TaskFamily::Ner | TaskFamily::Qa => None,
        f => {
            let mut s = TsvSchema::for_family(f)?;
            if let Some(c) = &a.text_column {
                s.text = c.clone();
            }
            if let Some(c) = &a.text2_column {
                s.text2 = Some(c.clone());
            }
            if let Some(c) = &a.target_column {
                s.target = c.clone();
            }
            s.id = a.id_column.clone();
            Some(s)
        }
    };
    let train = load_task_data(&a.train, a.task, schema.as_ref(), a.labels.as_deref())?;
    let mut task = TaskConfig::for_dataset(&train);
    task.batch_size = a.batch_size;
    task.peak_lr = a.lr;
    task.total_steps = a.steps;
    task.warmup_steps = a.warmup_steps;
    task.weight_decay = a.weight_decay;
    task.checkpoint_every = a.checkpoint_every;
    task.lower_case = !a.cased;
    task.qa_top_k = a.top_k;
    task.max_answer_len = a.max_answer_len;
    if let Some(n) = a.max_seq_len {
        task.max_seq_len = n;
    }
    task.validate(ckpt.config.max_positions)
        .map_err(|e| usage(e.to_string()))?;

    let dir = or_home(&a.output_dir, &format!("finetune-{}", a.task));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = ckpt.config.clone();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let outcome = pool.install(|| {
        finetune(
            ckpt.params,
            &model,
            &vocab,
            &train,
            &task,
            a.seed,
            |step, params, state| {
                save_checkpoint(
                    dir.join(format!("checkpoint-{step}.balb")),
                    &to_checkpoint(&model, params, state),
                )
            },
        )
    })?;
    let mut log = BufWriter::new(File::create(dir.join("log.csv"))?);
    writeln!(log, "step,loss")?;
    for (step, loss) in &outcome.losses {
        writeln!(log, "{step},{loss}")?;
    }
    log.flush()?;
    save_checkpoint(
        dir.join("final.balb"),
        &to_checkpoint(&model, &outcome.params, &outcome.state),
    )?;

    if let Some(test_path) = &a.test {
        let test = load_task_data(test_path, a.task, schema.as_ref(), Some(&train.labels))?;
        let preds = pool.install(|| predict(&outcome.params, &model, &vocab, &task, &test))?;
        let records: Vec<PredictionRecord> = preds.into_iter().map(PredictionRecord::from).collect();
        let out = dir.join("predictions.jsonl");
        write_jsonl(&out, &records)?;
        let pairs = join_records(&records, None)?;
        let metric = Metric::for_family(a.task);
        match evaluate(&pairs, metric, &EvalOptions::default()) {
            Ok(score) => println!("{metric} {}", format_pct(100.0 * score)),
            Err(e) => eprintln!("{metric} undefined: {e}"),
        }
        eprintln!("{} predictions -> {}", records.len(), out.display());
    }
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    require_file(&a.predictions, "prediction file")?;
    let preds: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let gold: Option<Vec<PredictionRecord>> = match &a.gold {
        Some(p) => {
            require_file(p, "gold file")?;
            Some(read_jsonl(p)?)
        }
        None => None,
    };
    let pairs = join_records(&preds, gold.as_deref())?;
    let family = pairs
        .first()
        .map(|p| p.family)
        .ok_or_else(|| anyhow!("no records to evaluate"))?;
    if let Some(p) = pairs.iter().find(|p| p.family != family) {
        bail!("record {:?} is {} but the file starts with {family}", p.id, p.family);
    }
    let metric = a.metric.unwrap_or(Metric::for_family(family));
    let opts = EvalOptions {
        negative_classes: a.negative_class.clone(),
        include_negative: a.include_negative,
        average: match a.average {
            AverageArg::Micro => Average::Micro,
            AverageArg::Macro => Average::Macro,
        },
    };
    let score = 100.0 * evaluate(&pairs, metric, &opts)?;
    println!("{}", format_pct(score));

    if let (Some(path), Some(dataset)) = (&a.record, &a.dataset) {
        let mut report: EvalReport = if path.exists() {
            serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?
        } else {
            EvalReport::default()
        };
        let entry = DatasetScore {
            dataset: dataset.clone(),
            family,
            metric,
            value: score,
        };
        match report.scores.iter_mut().find(|s| &s.dataset == dataset) {
            Some(s) => *s = entry,
            None => report.scores.push(entry),
        }
        ensure_parent(path)?;
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let table = match &a.reference {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::bundled()?,
    };
    let text = match &a.scores {
        None => {
            let r = reproduce(&table)?;
            match a.format {
                Format::Text => r.to_text(),
                Format::Json => r.to_json()?,
            }
        }
        Some(p) => {
            require_file(p, "score file")?;
            let report: EvalReport =
                serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?;
            let c = compare_to_reference(&report, &table)?;
            match a.format {
                Format::Text => c.to_text(),
                Format::Json => c.to_json()?,
            }
        }
    };
    match &a.output {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::TrainTokenizer(a) => run_train_tokenizer(a),
        Command::BuildPretrainData(a) => run_build_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Report(a) => run_report(a),
    }
}

fn exit_for(err: &anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    if err.downcast_ref::<UsageError>().is_some() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return exit_for(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
