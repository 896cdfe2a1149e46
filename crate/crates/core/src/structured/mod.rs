//! Structured JSON targets (defect class, single-hunk patch, explanation),
//! a small decoder trained on them, and validity / exact-match scoring.

pub mod decoder;
pub mod diff;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{three_way_split, CorpusError, Dataset, Example, FixType, SiteKind, Split};
use crate::encode::{encode, Vocabulary};
use crate::metrics::{fmt3, EvalOptions};
use crate::student::StudentModel;
use crate::tinylearn::{Rng, TensorError};
use crate::trainer::{self, TrainConfig, TrainError};

pub use decoder::{output_tokens, train_decoder, DecoderConfig, DecoderItem, DecoderModel, OutputVocab};
pub use diff::{apply_patch, unified_diff, PatchError};

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error("example {0} has no edit record")]
    MissingProvenance(String),
    #[error("split is empty")]
    EmptySplit,
    #[error("target of example {0} uses tokens outside the output vocabulary")]
    OutOfVocabulary(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Teacher-side structured output. Field order is the canonical key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonTarget {
    pub defect_class: FixType,
    pub patch: String,
    pub explanation: String,
}

impl JsonTarget {
    /// Compact JSON with keys in canonical order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("target serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Templated explanation for an edit; at most 20 whitespace tokens.
pub fn explanation(fix_type: FixType, site: SiteKind, in_condition: bool) -> String {
    let what = match fix_type {
        FixType::WrongCondition => "the condition compares with the wrong operator",
        FixType::LoopBound => "the loop stops one iteration early or late",
        FixType::WrongOperator => "an arithmetic operator was swapped for another",
        FixType::InitError => "a variable is read before it is initialized",
        FixType::MissingCase => "a switch case was dropped so its input is unhandled",
        FixType::OffByOneIndex => "an array index is off by one",
        FixType::WrongReturn => "the function returns the wrong value",
        FixType::IoFormat => "the output format string prints the wrong layout",
        FixType::WrongConstant if in_condition => "a constant inside a condition has the wrong value",
        FixType::WrongConstant => "a numeric constant has the wrong value",
    };
    format!("{} site: {what}", site.name())
}

/// Structured target for an example, built from its edit record.
pub fn make_json_target(example: &Example) -> Result<JsonTarget, StructuredError> {
    let edit = &example
        .provenance
        .as_ref()
        .ok_or_else(|| StructuredError::MissingProvenance(example.id.clone()))?
        .edit;
    Ok(JsonTarget {
        defect_class: edit.fix_type,
        patch: unified_diff(&example.buggy_source, &example.reference_source),
        explanation: explanation(edit.fix_type, edit.site_kind, edit.in_condition),
    })
}

/// Whether decoded text is a JSON object with exactly the three target keys.
/// Returns the parsed object when it is.
pub fn parse_output(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let serde_json::Value::Object(map) = serde_json::from_str(text).ok()? else {
        return None;
    };
    let keys_ok = map.len() == 3 && ["defect_class", "patch", "explanation"].iter().all(|k| map.contains_key(*k));
    keys_ok.then_some(map)
}

/// Denominator for the structured micro F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroF1Scope {
    /// Only valid-JSON outputs make class decisions.
    #[default]
    ValidOnly,
    /// Invalid outputs count as a missed gold class.
    AllExamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredScores {
    pub n: usize,
    pub json_validity: f64,
    pub defect_exact_match: f64,
    pub defect_micro_f1: f64,
    pub patch_apply_rate: f64,
}

/// Scores decoded outputs against their examples.
pub fn score_outputs(
    outputs: &[String],
    examples: &[&Example],
    scope: MicroF1Scope,
) -> Result<StructuredScores, StructuredError> {
    if examples.is_empty() || outputs.len() != examples.len() {
        return Err(StructuredError::EmptySplit);
    }
    let (mut valid, mut correct, mut applies) = (0usize, 0usize, 0usize);
    let (mut fp, mut fn_) = (0usize, 0usize);
    for (text, ex) in outputs.iter().zip(examples) {
        let Some(map) = parse_output(text) else {
            if scope == MicroF1Scope::AllExamples {
                fn_ += 1;
            }
            continue;
        };
        valid += 1;
        let predicted = map
            .get("defect_class")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse::<FixType>().ok());
        match predicted {
            Some(p) if p == ex.gold_fix_type => correct += 1,
            Some(_) => {
                fp += 1;
                fn_ += 1;
            }
            None => fn_ += 1,
        }
        if let Some(patch) = map.get("patch").and_then(|v| v.as_str()) {
            if apply_patch(&ex.buggy_source, patch).is_ok() {
                applies += 1;
            }
        }
    }
    let n = examples.len();
    let denom = 2 * correct + fp + fn_;
    Ok(StructuredScores {
        n,
        json_validity: valid as f64 / n as f64,
        defect_exact_match: correct as f64 / n as f64,
        defect_micro_f1: if denom == 0 { 0.0 } else { 2.0 * correct as f64 / denom as f64 },
        patch_apply_rate: if valid == 0 { 0.0 } else { applies as f64 / valid as f64 },
    })
}

/// Greedy outputs of `model` for each example.
pub fn decode_examples(
    model: &DecoderModel,
    vocab: &Vocabulary,
    examples: &[&Example],
) -> Result<Vec<String>, StructuredError> {
    examples
        .iter()
        .map(|e| {
            let seq = encode(e, vocab, model.encoder_config.max_len);
            Ok(model.decode(&seq, &model.vocab.allowed(&e.buggy_source))?)
        })
        .collect()
}

pub fn evaluate_structured(
    model: &DecoderModel,
    vocab: &Vocabulary,
    examples: &[&Example],
    scope: MicroF1Scope,
) -> Result<StructuredScores, StructuredError> {
    if examples.is_empty() {
        return Err(StructuredError::EmptySplit);
    }
    score_outputs(&decode_examples(model, vocab, examples)?, examples, scope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Training examples kept after the three-way split.
    pub train_size: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub classifier: TrainConfig,
    pub decoder: DecoderConfig,
    pub micro_f1: MicroF1Scope,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            train_size: 74,
            validation_fraction: 0.15,
            test_fraction: 0.15,
            split_seed: 7,
            classifier: TrainConfig::default(),
            decoder: DecoderConfig::default(),
            micro_f1: MicroF1Scope::ValidOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub split: Split,
    pub scores: StructuredScores,
    /// Fix-type accuracy of the classifier trained on the same examples.
    pub classifier_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub train_size: usize,
    pub rows: Vec<StudyRow>,
    pub decoder_loss: Vec<f64>,
    /// Fraction of training targets whose patch round-trips.
    pub target_round_trip: f64,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Structured output study ({} training examples)", self.train_size);
        let _ = writeln!(
            s,
            "  {:<12}{:>5}{:>14}{:>13}{:>10}{:>13}{:>16}",
            "Split", "n", "JSON validity", "Exact match", "Micro F1", "Patch apply", "Classifier acc"
        );
        for r in &self.rows {
            let split = match r.split {
                Split::Train => "train",
                Split::Validation => "validation",
                Split::Test => "test",
            };
            let c = &r.scores;
            let _ = writeln!(
                s,
                "  {:<12}{:>5}{:>14}{:>13}{:>10}{:>13}{:>16}",
                split,
                c.n,
                fmt3(c.json_validity),
                fmt3(c.defect_exact_match),
                fmt3(c.defect_micro_f1),
                fmt3(c.patch_apply_rate),
                fmt3(r.classifier_accuracy)
            );
        }
        s
    }
}

/// Outcome of [`run_structured_study`], with the trained models.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub report: StudyReport,
    pub dataset: Dataset,
    pub classifier: StudentModel,
    pub vocab: Vocabulary,
    pub decoder: DecoderModel,
}

/// Three-way split, keep `train_size` training examples, train a classifier
/// and a decoder on them, and score both on the validation and test splits.
pub fn run_structured_study(dataset: &Dataset, config: &StudyConfig) -> Result<StudyOutcome, StructuredError> {
    let mut ds = three_way_split(dataset, config.validation_fraction, config.test_fraction, config.split_seed)?;
    let mut train_idx: Vec<usize> = (0..ds.examples.len())
        .filter(|&i| ds.examples[i].split == Some(Split::Train))
        .collect();
    Rng::new(config.split_seed ^ 0x74).shuffle(&mut train_idx);
    for &i in train_idx.iter().skip(config.train_size) {
        ds.examples[i].split = None;
    }

    let classifier = trainer::train(&ds, &config.classifier)?;
    let train = ds.train();
    let targets = train
        .iter()
        .map(|e| make_json_target(e))
        .collect::<Result<Vec<_>, _>>()?;
    let round_trips = train
        .iter()
        .zip(&targets)
        .filter(|(e, t)| apply_patch(&e.buggy_source, &t.patch).as_deref() == Ok(e.reference_source.as_str()))
        .count();
    let out_vocab = OutputVocab::build(&targets);
    let items = train
        .iter()
        .zip(&targets)
        .map(|(e, t)| {
            Ok(DecoderItem {
                seq: encode(e, &classifier.vocab, config.classifier.max_len),
                target: out_vocab
                    .encode_target(t)
                    .ok_or_else(|| StructuredError::OutOfVocabulary(e.id.clone()))?,
            })
        })
        .collect::<Result<Vec<_>, StructuredError>>()?;
    let mut decoder = DecoderModel::init(&classifier.model, out_vocab, config.decoder);
    let decoder_loss = train_decoder(&mut decoder, &items)?;

    let options = EvalOptions::default();
    let mut rows = Vec::new();
    for split in [Split::Validation, Split::Test] {
        let examples: Vec<&Example> = ds.split_examples(split).collect();
        let scores = evaluate_structured(&decoder, &classifier.vocab, &examples, config.micro_f1)?;
        let report = crate::metrics::evaluate(&classifier.model, &classifier.vocab, &examples, options)
            .map_err(TrainError::from)?;
        rows.push(StudyRow {
            split,
            scores,
            classifier_accuracy: report.accuracy,
        });
    }
    let report = StudyReport {
        train_size: train.len(),
        rows,
        decoder_loss,
        target_round_trip: round_trips as f64 / train.len().max(1) as f64,
    };
    Ok(StudyOutcome {
        report,
        dataset: ds,
        classifier: classifier.model,
        vocab: classifier.vocab,
        decoder,
    })
}
