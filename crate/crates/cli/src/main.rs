use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use symdistill::config::{ConfigError, ExperimentConfig};
use symdistill::corpus::{
    generate_corpus, load_dataset, load_templates, save_dataset, shipped_templates, stratified_split, CorpusError,
    Dataset, FixType, Split,
};
use symdistill::encode::VocabError;
use symdistill::metrics::{evaluate, EvalReport};
use symdistill::structured::{run_structured_study, DecoderConfig, MicroF1Scope, StructuredError, StudyConfig, StudyReport};
use symdistill::student::Variant;
use symdistill::teacher::{supervise_dataset, RuleTable, TeacherEndpointConfig, TeacherError, TeacherMode};
use symdistill::tinylearn::CheckpointError;
use symdistill::trainer::{self, run_paired_experiment, PairedReport, RunDir, TrainError};

const EXIT_IO: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_EMPTY_SUPERVISION: u8 = 3;

#[derive(Parser)]
#[command(name = "symdistill", version, about = "Bug-type classification with symbolic reasoning distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of buggy programs as JSONL.
    Inject(InjectArgs),
    /// Attach teacher supervision to a corpus.
    Teach(TeachArgs),
    /// Train one student variant.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Train label-only and distilled students for each seed and compare.
    Pair(PairArgs),
    /// Run the structured JSON output study.
    JsonDistill(JsonDistillArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct InjectArgs {
    /// Template collection (TOML). Defaults to the built-in templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Examples per fix type.
    #[arg(long, default_value_t = 32)]
    per_class: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeachMode {
    Oracle,
    Llm,
}

#[derive(Args)]
struct TeachArgs {
    /// Input corpus JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = TeachMode::Oracle)]
    mode: TeachMode,
    /// Teacher endpoint URL (llm mode).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long, default_value = "teacher")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "SYMDISTILL_TEACHER_TOKEN")]
    token_env: String,
    /// Retries after the first attempt.
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Base backoff in milliseconds; retry k waits base * 2^k.
    #[arg(long, default_value_t = 1000)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    /// Rule table (TOML) for oracle mode. Defaults to the built-in table.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Filter report path. Defaults to `<out>.filter.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Experiment settings. Flags override the config file, which overrides
/// the built-in defaults.
#[derive(Args, Default)]
struct ExperimentArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Weight of the reasoning loss.
    #[arg(long = "lambda")]
    lambda_reason: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    min_count: Option<String>,
    /// Tag decision threshold.
    #[arg(long)]
    threshold: Option<String>,
    /// Train fraction used when the corpus has no split yet.
    #[arg(long)]
    split_ratio: Option<String>,
    #[arg(long)]
    split_seed: Option<String>,
    /// all_classes or present_only.
    #[arg(long)]
    macro_average: Option<String>,
    /// ordered or set.
    #[arg(long)]
    trace_match: Option<String>,
}

impl ExperimentArgs {
    fn resolve(&self, seeds: Option<&str>) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let flags = [
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("lambda_reason", &self.lambda_reason),
            ("embed_dim", &self.embed_dim),
            ("hidden_dim", &self.hidden_dim),
            ("max_len", &self.max_len),
            ("min_count", &self.min_count),
            ("threshold", &self.threshold),
            ("split_ratio", &self.split_ratio),
            ("split_seed", &self.split_seed),
            ("macro_average", &self.macro_average),
            ("trace_match", &self.trace_match),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        if let Some(s) = seeds {
            c.set("seeds", s)?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Supervised corpus JSONL.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "reasoning_distilled")]
    variant: Variant,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory holding the checkpoint, vocabulary and config.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "reasoning_distilled")]
    variant: Variant,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Print JSON instead of text tables.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Seed list such as `1,2,3` or a range `1..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MicroScope {
    ValidOnly,
    AllExamples,
}

#[derive(Args)]
struct JsonDistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Training examples kept after the 70/15/15 split.
    #[arg(long, default_value_t = 74)]
    train_size: usize,
    /// Seed for classifier and decoder initialization.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    decoder_epochs: Option<usize>,
    #[arg(long)]
    decoder_lr: Option<f64>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
    /// Which outputs count toward micro F1.
    #[arg(long, value_enum, default_value_t = MicroScope::ValidOnly)]
    micro_f1: MicroScope,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

/// An error with a chosen exit code.
#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn fail(code: u8, kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    CliError {
        code,
        kind,
        message: message.into(),
    }
    .into()
}

fn classify_train(e: &TrainError) -> (u8, &'static str) {
    match e {
        TrainError::Io { .. }
        | TrainError::Checkpoint(CheckpointError::Io { .. })
        | TrainError::Vocab(VocabError::Io(_)) => (EXIT_IO, "io"),
        TrainError::Checkpoint(_) | TrainError::Vocab(VocabError::Format { .. }) => (EXIT_IO, "format"),
        TrainError::Config(_) => (EXIT_INPUT, "config"),
        TrainError::UnsupervisedExample(_) | TrainError::EmptyTrainSplit | TrainError::Vocab(_) => {
            (EXIT_INPUT, "corpus")
        }
        TrainError::Tensor(_) | TrainError::Metrics(_) => (EXIT_IO, "training"),
    }
}

fn classify_corpus(e: &CorpusError) -> (u8, &'static str) {
    match e {
        CorpusError::Io { .. } => (EXIT_IO, "io"),
        _ => (EXIT_INPUT, "corpus"),
    }
}

/// Exit code and error kind for the first recognized error in the chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return (e.code, e.kind);
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return classify_corpus(e);
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io { .. } => (EXIT_IO, "io"),
                _ => (EXIT_INPUT, "config"),
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return classify_train(e);
        }
        if let Some(e) = cause.downcast_ref::<StructuredError>() {
            return match e {
                StructuredError::Corpus(c) => classify_corpus(c),
                StructuredError::Train(t) => classify_train(t),
                StructuredError::MissingProvenance(_) | StructuredError::EmptySplit => (EXIT_INPUT, "corpus"),
                _ => (EXIT_IO, "structured"),
            };
        }
        if let Some(e) = cause.downcast_ref::<TeacherError>() {
            return match e {
                TeacherError::Transport { .. } => (EXIT_IO, "teacher"),
                _ => (EXIT_INPUT, "teacher"),
            };
        }
        if cause.downcast_ref::<CheckpointError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return (EXIT_IO, "io");
        }
    }
    (EXIT_IO, "error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            let body = serde_json::json!({
                "error": kind,
                "message": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inject(a) => inject(a),
        Command::Teach(a) => teach(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Pair(a) => pair(a),
        Command::JsonDistill(a) => json_distill(a),
        Command::Report(a) => report(a),
    }
}

fn inject(a: InjectArgs) -> Result<()> {
    let owned;
    let templates = match &a.templates {
        Some(path) => {
            owned = load_templates(path)?;
            &owned[..]
        }
        None => shipped_templates(),
    };
    let ds = generate_corpus(templates, a.per_class, a.seed)?;
    save_dataset(&ds, &a.out)?;
    let counts = ds.class_counts();
    println!("wrote {} examples to {}", ds.len(), a.out.display());
    for class in FixType::ALL {
        println!("  {:<20}{:>5}", class.name(), counts[class.index()]);
    }
    Ok(())
}

fn teach(a: TeachArgs) -> Result<()> {
    let ds = load_dataset(&a.input)?;
    let mode = match a.mode {
        TeachMode::Oracle => TeacherMode::Oracle(match &a.rules {
            Some(path) => RuleTable::load(path)?,
            None => RuleTable::shipped().clone(),
        }),
        TeachMode::Llm => {
            let url = a
                .endpoint
                .clone()
                .ok_or_else(|| fail(EXIT_INPUT, "config", "--endpoint is required in llm mode"))?;
            TeacherMode::Llm(TeacherEndpointConfig {
                url,
                model: a.model.clone(),
                token_env: Some(a.token_env.clone()),
                retries: a.retries,
                backoff_unit_ms: a.backoff_ms,
                concurrency: a.concurrency,
                timeout_ms: a.timeout_ms,
            })
        }
    };
    let (supervised, filter) = supervise_dataset(&ds, &mode)?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".filter.json");
        PathBuf::from(p)
    });
    save_dataset(&supervised, &a.out)?;
    let json = serde_json::to_string_pretty(&filter)?;
    std::fs::write(&report_path, format!("{json}\n")).with_context(|| format!("writing {}", report_path.display()))?;
    println!("{json}");
    if filter.retained == 0 {
        return Err(fail(
            EXIT_EMPTY_SUPERVISION,
            "empty_supervision",
            format!("no example of {} kept valid supervision", filter.total),
        ));
    }
    Ok(())
}

/// Loads a corpus and splits it unless every example already has a split.
fn load_split(path: &Path, config: &ExperimentConfig) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if !ds.is_empty() && ds.examples.iter().all(|e| e.split.is_some()) {
        return Ok(ds);
    }
    Ok(stratified_split(&ds, config.split_ratio, config.split_seed)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = a.experiment.resolve(None)?;
    let ds = load_split(&a.data, &config)?;
    let cfg = config.train_config(a.variant, a.seed);
    let outcome = trainer::train(&ds, &cfg)?;
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_config(&config.to_text())?;
    dir.save_outcome(&outcome, a.seed)?;
    dir.write_log(&[(a.variant, a.seed, &outcome.log[..])])?;
    let validation = ds.validation();
    if !validation.is_empty() {
        let r = evaluate(&outcome.model, &outcome.vocab, &validation, cfg.eval).map_err(TrainError::from)?;
        dir.write(&dir.report_json_path(), &format!("{}\n", r.to_json()))?;
        dir.write(&dir.report_text_path(), &r.to_text())?;
        print!("{}", r.to_text());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dir = RunDir::open(&a.run_dir);
    let mut config = ExperimentConfig::default();
    config.apply_file(&dir.config_path())?;
    let ds = load_split(&a.data, &config)?;
    let (model, vocab) = dir.load_model(a.variant, a.seed)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let examples: Vec<_> = ds.split_examples(split).collect();
    if examples.is_empty() {
        return Err(fail(EXIT_INPUT, "corpus", "the requested split is empty"));
    }
    let r = evaluate(&model, &vocab, &examples, config.eval_options()).map_err(TrainError::from)?;
    if a.json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.to_text());
    }
    Ok(())
}

fn pair(a: PairArgs) -> Result<()> {
    let config = a.experiment.resolve(a.seeds.as_deref())?;
    let ds = load_split(&a.data, &config)?;
    let base = config.train_config(Variant::ReasoningDistilled, 0);
    let out = run_paired_experiment(&ds, &base, &config.seeds)?;
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_config(&config.to_text())?;
    let logs: Vec<(Variant, u64, &[_])> = out
        .report
        .runs
        .iter()
        .map(|r| (r.variant, r.seed, &r.log[..]))
        .collect();
    dir.write_log(&logs)?;
    for (run, outcome) in out.report.runs.iter().zip(&out.outcomes) {
        dir.save_outcome(outcome, run.seed)?;
    }
    dir.write(&dir.report_json_path(), &format!("{}\n", out.report.to_json()))?;
    dir.write(&dir.report_text_path(), &out.report.to_text())?;
    print!("{}", out.report.to_text());
    Ok(())
}

fn json_distill(a: JsonDistillArgs) -> Result<()> {
    let config = a.experiment.resolve(None)?;
    let ds = load_dataset(&a.data)?;
    let defaults = DecoderConfig::default();
    let study = StudyConfig {
        train_size: a.train_size,
        split_seed: config.split_seed,
        classifier: config.train_config(Variant::ReasoningDistilled, a.seed),
        decoder: DecoderConfig {
            epochs: a.decoder_epochs.unwrap_or(defaults.epochs),
            lr: a.decoder_lr.unwrap_or(defaults.lr),
            hidden_dim: a.decoder_hidden.unwrap_or(defaults.hidden_dim),
            seed: a.seed,
            ..defaults
        },
        micro_f1: match a.micro_f1 {
            MicroScope::ValidOnly => MicroF1Scope::ValidOnly,
            MicroScope::AllExamples => MicroF1Scope::AllExamples,
        },
        ..StudyConfig::default()
    };
    let out = run_structured_study(&ds, &study)?;
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_config(&config.to_text())?;
    let root = &a.run_dir;
    dir.write(&root.join("structured.json"), &format!("{}\n", out.report.to_json()))?;
    dir.write(&root.join("structured.txt"), &out.report.to_text())?;
    out.decoder
        .to_checkpoint()
        .save(&root.join("checkpoints").join(format!("decoder-seed{}.json", a.seed)))
        .map_err(TrainError::from)?;
    print!("{}", out.report.to_text());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let dir = RunDir::open(&a.run_dir);
    let read = |p: PathBuf| std::fs::read_to_string(p).ok();
    let mut sections = Vec::new();
    if let Some(text) = read(dir.config_path()) {
        sections.push(format!("Effective config\n{}", indent(&text)));
    }
    if let Some(json) = read(dir.report_json_path()) {
        if let Ok(r) = serde_json::from_str::<PairedReport>(&json) {
            sections.push(r.to_text());
        } else if let Ok(r) = serde_json::from_str::<EvalReport>(&json) {
            sections.push(r.to_text());
        } else {
            return Err(fail(EXIT_IO, "format", format!("unrecognized report {}", dir.report_json_path().display())));
        }
    }
    if let Some(json) = read(a.run_dir.join("structured.json")) {
        let r: StudyReport = serde_json::from_str(&json).context("structured.json")?;
        sections.push(r.to_text());
    }
    if sections.len() <= 1 {
        return Err(fail(
            EXIT_IO,
            "io",
            format!("{} holds no reports", a.run_dir.display()),
        ));
    }
    println!("{}", sections.join("\n"));
    Ok(())
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}
