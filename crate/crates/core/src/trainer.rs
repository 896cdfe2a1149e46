//! Training loops, the paired label-only vs. distilled experiment, and the
//! on-disk run directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example};
use crate::encode::{encode, VocabError, Vocabulary, DEFAULT_MAX_LEN};
use crate::metrics::{evaluate, fmt3, EvalOptions, EvalReport, MetricsError};
use crate::student::{StudentConfig, StudentModel, TrainItem, Variant};
use crate::tinylearn::{AdamConfig, AdamState, CheckpointError, Rng, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training example {0} has no valid supervision")]
    UnsupervisedExample(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    pub lambda_reason: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub threshold: f64,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            seed: 1,
            variant: Variant::ReasoningDistilled,
            lambda_reason: 1.0,
            embed_dim: 32,
            hidden_dim: 64,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
            threshold: 0.5,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn student_config(&self, vocab_size: usize) -> StudentConfig {
        StudentConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            lambda_reason: self.lambda_reason,
            threshold: self.threshold,
            ..StudentConfig::new(vocab_size, self.variant)
        }
    }

    /// The label-only twin of this config: same everything except the loss.
    pub fn label_only(&self) -> Self {
        Self {
            variant: Variant::LabelOnly,
            lambda_reason: 0.0,
            ..self.clone()
        }
    }

    pub fn distilled(&self) -> Self {
        Self {
            variant: Variant::ReasoningDistilled,
            ..self.clone()
        }
    }
}

/// Names of the fields on which two configs differ.
pub fn config_delta(a: &TrainConfig, b: &TrainConfig) -> Vec<&'static str> {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let mut out = Vec::new();
    for key in [
        "epochs",
        "batch_size",
        "lr",
        "seed",
        "variant",
        "lambda_reason",
        "embed_dim",
        "hidden_dim",
        "max_len",
        "min_count",
        "threshold",
        "eval",
    ] {
        if va[key] != vb[key] {
            out.push(key);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_tag_micro_f1: Option<f64>,
    pub val_exact_match: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub vocab: Vocabulary,
    pub adam: AdamState,
    pub log: Vec<EpochLog>,
}

/// Tensor-ready training items; fails on any example without valid
/// supervision. Labels are the teacher's.
pub fn training_items(examples: &[&Example], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainItem>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let sup = e
                .valid_supervision()
                .ok_or_else(|| TrainError::UnsupervisedExample(e.id.clone()))?;
            Ok(TrainItem::new(encode(e, vocab, max_len), sup.fix_type, &sup.trace))
        })
        .collect()
}

/// Vocabulary over the training split's tokens.
pub fn build_vocab(train: &[&Example], min_count: usize) -> Result<Vocabulary, VocabError> {
    Vocabulary::build(train.iter().copied(), min_count)
}

fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Trains `model` in place on the dataset's train split. Validation metrics
/// are logged per epoch when the dataset has a validation split.
pub fn train_model(
    model: &mut StudentModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(AdamState, Vec<EpochLog>), TrainError> {
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let train = dataset.train();
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let items = training_items(&train, vocab, config.max_len)?;
    let validation = dataset.validation();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = Rng::new(shuffle_seed(config.seed));
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = rng.permutation(items.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grads) = model.batch_loss(&batch)?;
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: loss_sum / items.len() as f64,
            val_accuracy: None,
            val_macro_f1: None,
            val_tag_micro_f1: None,
            val_exact_match: None,
        };
        if !validation.is_empty() {
            let r = evaluate(model, vocab, &validation, config.eval)?;
            entry.val_accuracy = Some(r.accuracy);
            entry.val_macro_f1 = Some(r.macro_f1);
            entry.val_tag_micro_f1 = r.tag_micro_f1;
            entry.val_exact_match = r.exact_match;
        }
        log.push(entry);
    }
    Ok((adam, log))
}

/// Builds the vocabulary, initializes a model from `config.seed` and trains it.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let train = dataset.train();
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let vocab = build_vocab(&train, config.min_count)?;
    let mut model = StudentModel::init(config.student_config(vocab.size()), config.seed);
    let (adam, log) = train_model(&mut model, &vocab, dataset, config)?;
    Ok(TrainOutcome { model, vocab, adam, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub variant: Variant,
    pub config: TrainConfig,
    pub report: EvalReport,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMeans {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub seeds: Vec<u64>,
    /// Two rows per seed: label-only first, then distilled.
    pub runs: Vec<PairedRun>,
    pub label_only: VariantMeans,
    pub distilled: VariantMeans,
    /// Distilled minus label-only.
    pub diff: VariantMeans,
    /// Seeds where the distilled macro F1 is strictly higher.
    pub distilled_wins: usize,
}

impl PairedReport {
    pub fn run(&self, seed: u64, variant: Variant) -> Option<&PairedRun> {
        self.runs.iter().find(|r| r.seed == seed && r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Paired validation results");
        let _ = writeln!(s, "  {:<6}{:<22}{:>10}{:>10}{:>10}{:>10}", "Seed", "Variant", "Accuracy", "Macro F1", "Tag F1", "EM");
        for r in &self.runs {
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt3);
            let _ = writeln!(
                s,
                "  {:<6}{:<22}{:>10}{:>10}{:>10}{:>10}",
                r.seed,
                r.variant.name(),
                fmt3(r.report.accuracy),
                fmt3(r.report.macro_f1),
                opt(r.report.tag_micro_f1),
                opt(r.report.exact_match)
            );
        }
        let _ = writeln!(s, "\n  {:<28}{:>10}{:>10}", "Mean", "Accuracy", "Macro F1");
        for (name, m) in [("label_only", &self.label_only), ("reasoning_distilled", &self.distilled), ("difference", &self.diff)] {
            let _ = writeln!(s, "  {:<28}{:>10}{:>10}", name, fmt3(m.accuracy), fmt3(m.macro_f1));
        }
        let _ = writeln!(s, "\n  distilled ahead on macro F1 in {} of {} seeds", self.distilled_wins, self.seeds.len());
        s
    }
}

/// Output of one paired run: the report plus the trained models.
pub struct PairedOutcome {
    pub report: PairedReport,
    /// Same order as `report.runs`.
    pub outcomes: Vec<TrainOutcome>,
}

/// Trains both variants for every seed. The two configs of a pair differ
/// only in the loss. Runs execute on separate threads; results are collected
/// in seed order so the report does not depend on scheduling.
pub fn run_paired_experiment(dataset: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<PairedOutcome, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    let mut jobs = Vec::new();
    for &seed in seeds {
        let with_seed = TrainConfig { seed, ..base.clone() };
        let lo = with_seed.label_only();
        let di = with_seed.distilled();
        let delta = config_delta(&lo, &di);
        debug_assert!(delta.iter().all(|k| *k == "variant" || *k == "lambda_reason"), "{delta:?}");
        jobs.push(lo);
        jobs.push(di);
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let mut results: Vec<Option<Result<TrainOutcome, TrainError>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<TrainOutcome, TrainError>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(cfg) = jobs.get(i) else { break };
                let r = train(dataset, cfg);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    for (slot, out) in slots.into_iter().zip(results.iter_mut()) {
        *out = slot.into_inner().expect("slot lock");
    }

    let validation = dataset.validation();
    let mut runs = Vec::new();
    let mut outcomes = Vec::new();
    for (cfg, result) in jobs.iter().zip(results) {
        let outcome = result.expect("every job ran")?;
        let report = if validation.is_empty() {
            return Err(TrainError::Metrics(MetricsError::EmptySplit));
        } else {
            evaluate(&outcome.model, &outcome.vocab, &validation, cfg.eval)?
        };
        runs.push(PairedRun {
            seed: cfg.seed,
            variant: cfg.variant,
            config: cfg.clone(),
            report,
            log: outcome.log.clone(),
        });
        outcomes.push(outcome);
    }

    let mean = |variant: Variant| {
        let rows: Vec<&PairedRun> = runs.iter().filter(|r| r.variant == variant).collect();
        let n = rows.len() as f64;
        VariantMeans {
            accuracy: rows.iter().map(|r| r.report.accuracy).sum::<f64>() / n,
            macro_f1: rows.iter().map(|r| r.report.macro_f1).sum::<f64>() / n,
        }
    };
    let label_only = mean(Variant::LabelOnly);
    let distilled = mean(Variant::ReasoningDistilled);
    let diff = VariantMeans {
        accuracy: distilled.accuracy - label_only.accuracy,
        macro_f1: distilled.macro_f1 - label_only.macro_f1,
    };
    let distilled_wins = runs
        .chunks(2)
        .filter(|pair| pair[1].report.macro_f1 > pair[0].report.macro_f1)
        .count();
    Ok(PairedOutcome {
        report: PairedReport {
            seeds: seeds.to_vec(),
            runs,
            label_only,
            distilled,
            diff,
            distilled_wins,
        },
        outcomes,
    })
}

/// `runs/<name>/{config, checkpoints/, log.jsonl, report.json, report.txt}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, TrainError> {
        let ck = root.join("checkpoints");
        fs::create_dir_all(&ck).map_err(io(&ck))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_text_path(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn checkpoint_path(&self, variant: Variant, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}-seed{seed}.json", variant.name()))
    }

    pub fn write(&self, path: &Path, contents: &str) -> Result<(), TrainError> {
        fs::write(path, contents).map_err(io(path))
    }

    pub fn write_config(&self, text: &str) -> Result<(), TrainError> {
        self.write(&self.config_path(), text)
    }

    /// One JSON line per epoch, tagged with variant and seed.
    pub fn write_log(&self, runs: &[(Variant, u64, &[EpochLog])]) -> Result<(), TrainError> {
        let path = self.log_path();
        let mut f = fs::File::create(&path).map_err(io(&path))?;
        for (variant, seed, log) in runs {
            for entry in log.iter() {
                let mut v = serde_json::to_value(entry).expect("log serializes");
                let obj = v.as_object_mut().expect("log entry is an object");
                obj.insert("variant".into(), serde_json::json!(variant.name()));
                obj.insert("seed".into(), serde_json::json!(seed));
                writeln!(f, "{}", serde_json::to_string(&v).expect("log serializes")).map_err(io(&path))?;
            }
        }
        Ok(())
    }

    pub fn save_outcome(&self, outcome: &TrainOutcome, seed: u64) -> Result<(), TrainError> {
        outcome.vocab.save(&self.vocab_path())?;
        let ck = outcome.model.to_checkpoint(Some(&outcome.adam));
        ck.save(&self.checkpoint_path(outcome.model.config.variant, seed))?;
        Ok(())
    }

    pub fn load_model(&self, variant: Variant, seed: u64) -> Result<(StudentModel, Vocabulary), TrainError> {
        let ck = crate::tinylearn::Checkpoint::load(&self.checkpoint_path(variant, seed))?;
        let model = StudentModel::from_checkpoint(&ck)?;
        let vocab = Vocabulary::load(&self.vocab_path())?;
        Ok((model, vocab))
    }
}
