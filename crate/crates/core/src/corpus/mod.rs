//! Synthetic corpus of short C programs, each with exactly one injected bug.

pub mod cmini;
mod io;
mod mutate;
mod split;
mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::teacher::TeacherSupervision;
use crate::tinylearn::rng::Rng;

pub use io::{load_dataset, save_dataset};
pub use mutate::{candidates, inject_bug, Candidate, MutationTable};
pub use split::{stratified_split, three_way_split, validation_quotas};
pub use template::{load_templates, parse_templates, shipped_templates, ProgramTemplate};

/// Closed set of bug categories a student predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FixType {
    WrongCondition,
    LoopBound,
    WrongOperator,
    InitError,
    MissingCase,
    OffByOneIndex,
    WrongReturn,
    IoFormat,
    WrongConstant,
}

pub const NUM_FIX_TYPES: usize = 9;

impl FixType {
    pub const ALL: [FixType; NUM_FIX_TYPES] = [
        FixType::WrongCondition,
        FixType::LoopBound,
        FixType::WrongOperator,
        FixType::InitError,
        FixType::MissingCase,
        FixType::OffByOneIndex,
        FixType::WrongReturn,
        FixType::IoFormat,
        FixType::WrongConstant,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FixType::WrongCondition => "WRONG_CONDITION",
            FixType::LoopBound => "LOOP_BOUND",
            FixType::WrongOperator => "WRONG_OPERATOR",
            FixType::InitError => "INIT_ERROR",
            FixType::MissingCase => "MISSING_CASE",
            FixType::OffByOneIndex => "OFF_BY_ONE_INDEX",
            FixType::WrongReturn => "WRONG_RETURN",
            FixType::IoFormat => "IO_FORMAT",
            FixType::WrongConstant => "WRONG_CONSTANT",
        }
    }

    /// The edit-site kind that hosts bugs of this type.
    pub fn site_kind(self) -> SiteKind {
        match self {
            FixType::WrongCondition => SiteKind::Comparison,
            FixType::LoopBound => SiteKind::LoopBound,
            FixType::WrongOperator => SiteKind::BinaryOperator,
            FixType::InitError => SiteKind::Initialization,
            FixType::MissingCase => SiteKind::SwitchCase,
            FixType::OffByOneIndex => SiteKind::ArrayIndex,
            FixType::WrongReturn => SiteKind::ReturnExpr,
            FixType::IoFormat => SiteKind::IoFormat,
            FixType::WrongConstant => SiteKind::Constant,
        }
    }
}

impl fmt::Display for FixType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown fix type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    Comparison,
    LoopBound,
    BinaryOperator,
    Initialization,
    SwitchCase,
    ArrayIndex,
    ReturnExpr,
    IoFormat,
    Constant,
}

impl SiteKind {
    pub const ALL: [SiteKind; 9] = [
        SiteKind::Comparison,
        SiteKind::LoopBound,
        SiteKind::BinaryOperator,
        SiteKind::Initialization,
        SiteKind::SwitchCase,
        SiteKind::ArrayIndex,
        SiteKind::ReturnExpr,
        SiteKind::IoFormat,
        SiteKind::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Comparison => "comparison",
            SiteKind::LoopBound => "loop-bound",
            SiteKind::BinaryOperator => "binary-operator",
            SiteKind::Initialization => "initialization",
            SiteKind::SwitchCase => "switch-case",
            SiteKind::ArrayIndex => "array-index",
            SiteKind::ReturnExpr => "return-expr",
            SiteKind::IoFormat => "io-format",
            SiteKind::Constant => "constant",
        }
    }

    pub(crate) fn short(self) -> &'static str {
        match self {
            SiteKind::Comparison => "cmp",
            SiteKind::LoopBound => "loop",
            SiteKind::BinaryOperator => "op",
            SiteKind::Initialization => "init",
            SiteKind::SwitchCase => "case",
            SiteKind::ArrayIndex => "index",
            SiteKind::ReturnExpr => "ret",
            SiteKind::IoFormat => "fmt",
            SiteKind::Constant => "const",
        }
    }
}

impl FromStr for SiteKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown site kind `{s}`"))
    }
}

/// One textual edit turning the reference source into the buggy source.
///
/// `reference[offset..offset + before.len()] == before`, and the buggy
/// source holds `after` at the same offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedEdit {
    pub site_id: String,
    pub site_kind: SiteKind,
    pub offset: usize,
    pub before: String,
    pub after: String,
    pub fix_type: FixType,
    #[serde(default)]
    pub in_condition: bool,
}

impl InjectedEdit {
    pub fn apply(&self, reference: &str) -> Option<String> {
        splice(reference, self.offset, &self.before, &self.after)
    }

    /// Undo the edit on the buggy source.
    pub fn revert(&self, buggy: &str) -> Option<String> {
        splice(buggy, self.offset, &self.after, &self.before)
    }
}

fn splice(text: &str, offset: usize, expect: &str, replacement: &str) -> Option<String> {
    let end = offset.checked_add(expect.len())?;
    if text.get(offset..end)? != expect {
        return None;
    }
    let mut out = String::with_capacity(text.len() + replacement.len());
    out.push_str(&text[..offset]);
    out.push_str(replacement);
    out.push_str(&text[end..]);
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub edit: InjectedEdit,
}

/// One failing test: input, the reference output, and what the buggy
/// program did instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailingCase {
    pub input: String,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub buggy_source: String,
    pub reference_source: String,
    pub failing_behavior: Vec<FailingCase>,
    pub gold_fix_type: FixType,
    #[serde(default)]
    pub supervision: Option<TeacherSupervision>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Example {
    /// Supervision usable for training, if any.
    pub fn valid_supervision(&self) -> Option<&TeacherSupervision> {
        self.supervision.as_ref().filter(|s| s.valid)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub seed: u64,
    /// Train fraction used by the last split, if split.
    pub split_ratio: Option<f64>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, seed: u64) -> Self {
        Self {
            examples,
            seed,
            split_ratio: None,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split_examples(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == Some(split))
    }

    pub fn train(&self) -> Vec<&Example> {
        self.split_examples(Split::Train).collect()
    }

    pub fn validation(&self) -> Vec<&Example> {
        self.split_examples(Split::Validation).collect()
    }

    /// Example count per fix type, indexed by [`FixType::index`].
    pub fn class_counts(&self) -> [usize; NUM_FIX_TYPES] {
        let mut counts = [0; NUM_FIX_TYPES];
        for e in &self.examples {
            counts[e.gold_fix_type.index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("template `{template}` has no edit site that can host {fix_type}")]
    NoEditSite { template: String, fix_type: FixType },
    #[error("no template can host {0}")]
    CoverageGap(FixType),
    #[error("class {fix_type} has {count} examples; at least 2 are needed to split")]
    ClassTooSmall { fix_type: FixType, count: usize },
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("count per class must be at least 1")]
    EmptyRequest,
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("template `{id}`: {message}")]
    Template { id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Generates `count_per_class` examples for every fix type.
///
/// Example `k` is drawn from its own generator seeded with `seed ^ k`, so the
/// result does not depend on generation order.
pub fn generate_corpus(
    templates: &[ProgramTemplate],
    count_per_class: usize,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    if count_per_class == 0 {
        return Err(CorpusError::EmptyRequest);
    }
    let table = MutationTable::shipped();
    let mut pools = Vec::with_capacity(NUM_FIX_TYPES);
    for fix_type in FixType::ALL {
        let pool: Vec<(&ProgramTemplate, Vec<Candidate>)> = templates
            .iter()
            .map(|t| (t, candidates(t, fix_type, table)))
            .filter(|(_, c)| !c.is_empty())
            .collect();
        if pool.is_empty() {
            return Err(CorpusError::CoverageGap(fix_type));
        }
        pools.push(pool);
    }

    let mut examples = Vec::with_capacity(count_per_class * NUM_FIX_TYPES);
    for (class, pool) in pools.iter().enumerate() {
        for k in 0..count_per_class {
            let index = class * count_per_class + k;
            let mut rng = Rng::new(seed ^ index as u64);
            let (template, cands) = &pool[rng.below(pool.len())];
            let pick = Rng::new(rng.next_u64()).below(cands.len());
            let id = format!("ex{index:05}");
            examples.push(cands[pick].to_example(template, id));
        }
    }
    Ok(Dataset::new(examples, seed))
}
