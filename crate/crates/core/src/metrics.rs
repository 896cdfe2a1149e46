//! Evaluation metrics: fix-type accuracy and F1, reasoning-tag F1, trace
//! exact match, and fix-type accuracy conditioned on trace correctness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, FixType, NUM_FIX_TYPES};
use crate::encode::{encode, Vocabulary};
use crate::student::{StudentModel, Variant};
use crate::teacher::{ReasoningTag, NUM_TAGS};
use crate::tinylearn::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no examples to evaluate")]
    EmptyInput,
    #[error("length mismatch: {0} predictions vs {1} golds")]
    LengthMismatch(usize, usize),
    #[error("model produces no reasoning traces")]
    NoTraceOutputs,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How per-class F1 scores are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroAverage {
    /// Mean over all nine classes; absent classes contribute 0.
    #[default]
    AllClasses,
    /// Mean over classes with at least one gold example.
    PresentOnly,
}

/// How two traces are compared for exact match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMatch {
    #[default]
    Ordered,
    Set,
}

impl TraceMatch {
    pub fn matches(self, pred: &[ReasoningTag], gold: &[ReasoningTag]) -> bool {
        match self {
            TraceMatch::Ordered => pred == gold,
            TraceMatch::Set => {
                let mut a = pred.to_vec();
                let mut b = gold.to_vec();
                a.sort();
                a.dedup();
                b.sort();
                b.dedup();
                a == b
            }
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

pub fn accuracy(preds: &[FixType], golds: &[FixType]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_FIX_TYPES]; NUM_FIX_TYPES],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[FixType], golds: &[FixType]) -> Self {
        let mut cm = Self::default();
        for (p, g) in preds.iter().zip(golds) {
            cm.counts[g.index()][p.index()] += 1;
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

/// F1 from counts; 0 when precision + recall is 0 or undefined.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> [f64; NUM_FIX_TYPES] {
    let mut out = [0.0; NUM_FIX_TYPES];
    for (c, slot) in out.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        *slot = f1(tp, cm.predicted(c) - tp, cm.support(c) - tp);
    }
    out
}

pub fn macro_f1(cm: &ConfusionMatrix, average: MacroAverage) -> f64 {
    let scores = per_class_f1(cm);
    let included: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| average == MacroAverage::AllClasses || cm.support(c) > 0)
        .map(|(_, &s)| s)
        .collect();
    if included.is_empty() {
        return 0.0;
    }
    included.iter().sum::<f64>() / included.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_tag_f1: Vec<f64>,
    pub per_tag_accuracy: Vec<f64>,
}

/// Tag-level scores treating each (example, tag) membership as a binary
/// decision. A tag with no positives in either list scores F1 = 1, and so
/// does the pooled micro F1 when nothing is positive anywhere.
pub fn tag_f1(preds: &[Vec<ReasoningTag>], golds: &[Vec<ReasoningTag>]) -> Result<TagScores, MetricsError> {
    check_lengths(preds.len(), golds.len())?;
    let mut tp = [0u64; NUM_TAGS];
    let mut fp = [0u64; NUM_TAGS];
    let mut fn_ = [0u64; NUM_TAGS];
    let mut agree = [0u64; NUM_TAGS];
    for (p, g) in preds.iter().zip(golds) {
        for tag in ReasoningTag::ALL {
            let i = tag.index();
            match (p.contains(&tag), g.contains(&tag)) {
                (true, true) => tp[i] += 1,
                (true, false) => fp[i] += 1,
                (false, true) => fn_[i] += 1,
                (false, false) => {}
            }
            if p.contains(&tag) == g.contains(&tag) {
                agree[i] += 1;
            }
        }
    }
    let vacuous_f1 = |tp: u64, fp: u64, fn_: u64| if tp + fp + fn_ == 0 { 1.0 } else { f1(tp, fp, fn_) };
    let per_tag_f1: Vec<f64> = (0..NUM_TAGS).map(|i| vacuous_f1(tp[i], fp[i], fn_[i])).collect();
    let n = preds.len() as f64;
    Ok(TagScores {
        micro_f1: vacuous_f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()),
        macro_f1: per_tag_f1.iter().sum::<f64>() / NUM_TAGS as f64,
        per_tag_accuracy: agree.iter().map(|&a| a as f64 / n).collect(),
        per_tag_f1,
    })
}

pub fn exact_match(
    preds: &[Vec<ReasoningTag>],
    golds: &[Vec<ReasoningTag>],
    mode: TraceMatch,
) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| mode.matches(p, g)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Everything the metrics need about one evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub gold_fix: FixType,
    pub pred_fix: FixType,
    pub gold_trace: Vec<ReasoningTag>,
    /// `None` for models that do not produce traces.
    pub pred_trace: Option<Vec<ReasoningTag>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAccuracy {
    /// `None` when the partition is empty.
    pub acc_given_trace_correct: Option<f64>,
    pub acc_given_trace_incorrect: Option<f64>,
    pub n_correct_trace: usize,
    pub n_incorrect_trace: usize,
}

pub fn conditional_accuracy(records: &[EvalRecord], mode: TraceMatch) -> Result<ConditionalAccuracy, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut n = [0usize; 2];
    let mut hits = [0usize; 2];
    for r in records {
        let pred_trace = r.pred_trace.as_ref().ok_or(MetricsError::NoTraceOutputs)?;
        let part = usize::from(!mode.matches(pred_trace, &r.gold_trace));
        n[part] += 1;
        if r.pred_fix == r.gold_fix {
            hits[part] += 1;
        }
    }
    let rate = |k: usize| (n[k] > 0).then(|| hits[k] as f64 / n[k] as f64);
    Ok(ConditionalAccuracy {
        acc_given_trace_correct: rate(0),
        acc_given_trace_incorrect: rate(1),
        n_correct_trace: n[0],
        n_incorrect_trace: n[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub macro_average: MacroAverage,
    pub trace_match: TraceMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub fix_type: FixType,
    pub support: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScore {
    pub tag: ReasoningTag,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<ClassScore>,
    pub tag_micro_f1: Option<f64>,
    pub tag_macro_f1: Option<f64>,
    pub exact_match: Option<f64>,
    pub per_tag: Option<Vec<TagScore>>,
    pub conditional: Option<ConditionalAccuracy>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Assembles a report. Trace metrics are filled only when every record
    /// carries a predicted trace.
    pub fn from_records(records: &[EvalRecord], options: EvalOptions) -> Result<Self, MetricsError> {
        if records.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let preds: Vec<FixType> = records.iter().map(|r| r.pred_fix).collect();
        let golds: Vec<FixType> = records.iter().map(|r| r.gold_fix).collect();
        let cm = ConfusionMatrix::from_pairs(&preds, &golds);
        let f1s = per_class_f1(&cm);
        let per_class_f1 = FixType::ALL
            .iter()
            .map(|&f| ClassScore {
                fix_type: f,
                support: cm.support(f.index()),
                f1: f1s[f.index()],
            })
            .collect();

        let mut report = Self {
            n: records.len(),
            accuracy: accuracy(&preds, &golds)?,
            macro_f1: macro_f1(&cm, options.macro_average),
            per_class_f1,
            tag_micro_f1: None,
            tag_macro_f1: None,
            exact_match: None,
            per_tag: None,
            conditional: None,
            confusion: cm,
        };
        let pred_traces: Option<Vec<Vec<ReasoningTag>>> = records.iter().map(|r| r.pred_trace.clone()).collect();
        if let Some(pred_traces) = pred_traces {
            let gold_traces: Vec<Vec<ReasoningTag>> = records.iter().map(|r| r.gold_trace.clone()).collect();
            let scores = tag_f1(&pred_traces, &gold_traces)?;
            report.tag_micro_f1 = Some(scores.micro_f1);
            report.tag_macro_f1 = Some(scores.macro_f1);
            report.exact_match = Some(exact_match(&pred_traces, &gold_traces, options.trace_match)?);
            report.per_tag = Some(
                ReasoningTag::ALL
                    .iter()
                    .map(|&t| TagScore {
                        tag: t,
                        f1: scores.per_tag_f1[t.index()],
                        accuracy: scores.per_tag_accuracy[t.index()],
                    })
                    .collect(),
            );
            report.conditional = Some(conditional_accuracy(records, options.trace_match)?);
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text tables: classification, reasoning, per-class F1
    /// and conditional accuracy.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Fix-type classification (n = {})", self.n);
        let _ = writeln!(s, "  {:<24}{:>10}", "Accuracy", fmt3(self.accuracy));
        let _ = writeln!(s, "  {:<24}{:>10}", "Macro F1", fmt3(self.macro_f1));
        if let (Some(micro), Some(macro_), Some(em)) = (self.tag_micro_f1, self.tag_macro_f1, self.exact_match) {
            let _ = writeln!(s, "\nReasoning prediction");
            let _ = writeln!(s, "  {:<24}{:>10}", "Tag micro F1", fmt3(micro));
            let _ = writeln!(s, "  {:<24}{:>10}", "Tag macro F1", fmt3(macro_));
            let _ = writeln!(s, "  {:<24}{:>10}", "Exact match", fmt3(em));
        }
        let _ = writeln!(s, "\nPer-fix-type F1");
        let _ = writeln!(s, "  {:<24}{:>8}{:>10}", "Fix type", "Support", "F1");
        for c in &self.per_class_f1 {
            let _ = writeln!(s, "  {:<24}{:>8}{:>10}", c.fix_type.name(), c.support, fmt3(c.f1));
        }
        if let Some(per_tag) = &self.per_tag {
            let _ = writeln!(s, "\nPer-tag scores");
            let _ = writeln!(s, "  {:<24}{:>10}{:>10}", "Tag", "F1", "Accuracy");
            for t in per_tag {
                let _ = writeln!(s, "  {:<24}{:>10}{:>10}", t.tag.name(), fmt3(t.f1), fmt3(t.accuracy));
            }
        }
        if let Some(c) = &self.conditional {
            let _ = writeln!(s, "\nFix-type accuracy by trace correctness");
            let _ = writeln!(s, "  {:<24}{:>8}{:>10}", "Trace", "Count", "Accuracy");
            let _ = writeln!(s, "  {:<24}{:>8}{:>10}", "correct", c.n_correct_trace, fmt_opt(c.acc_given_trace_correct));
            let _ = writeln!(s, "  {:<24}{:>8}{:>10}", "incorrect", c.n_incorrect_trace, fmt_opt(c.acc_given_trace_incorrect));
        } else {
            let _ = writeln!(s, "\nFix-type accuracy by trace correctness: not applicable (no trace predictions)");
        }
        s
    }
}

pub fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), fmt3)
}

/// Runs the model on every example and builds its records. Gold traces come
/// from valid supervision; examples without it get an empty gold trace.
pub fn predict_records(
    model: &StudentModel,
    vocab: &Vocabulary,
    examples: &[&Example],
) -> Result<Vec<EvalRecord>, MetricsError> {
    examples
        .iter()
        .map(|e| {
            let pred = model.forward(&encode(e, vocab, model.config.max_len))?;
            Ok(EvalRecord {
                gold_fix: e.gold_fix_type,
                pred_fix: pred.predicted_fix,
                gold_trace: e.valid_supervision().map(|s| s.trace.tags.clone()).unwrap_or_default(),
                pred_trace: (model.config.variant == Variant::ReasoningDistilled).then_some(pred.predicted_trace),
            })
        })
        .collect()
}

pub fn evaluate(
    model: &StudentModel,
    vocab: &Vocabulary,
    examples: &[&Example],
    options: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    EvalReport::from_records(&predict_records(model, vocab, examples)?, options)
}
