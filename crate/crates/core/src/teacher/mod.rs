//! Teacher supervision: a fix-type label plus a short symbolic reasoning
//! trace per example, produced either by the rule-table oracle or by an
//! external LLM endpoint, and always passed through [`validate_supervision`].

mod llm;
mod rules;
pub mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, FixType};

pub use llm::{llm_supervise, parse_response, render_prompt, TeacherEndpointConfig};
pub use rules::{oracle_supervise, EditPredicate, Rule, RuleTable};

pub const NUM_TAGS: usize = 9;
pub const MAX_TRACE_LEN: usize = 4;

/// Closed tag vocabulary. Declaration order is the canonical trace order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasoningTag {
    LoopBoundError,
    ConstError,
    OpSubstitution,
    CmpError,
    MissingBranch,
    IndexError,
    ReturnError,
    IoError,
    InitUnset,
}

impl ReasoningTag {
    pub const ALL: [ReasoningTag; NUM_TAGS] = [
        ReasoningTag::LoopBoundError,
        ReasoningTag::ConstError,
        ReasoningTag::OpSubstitution,
        ReasoningTag::CmpError,
        ReasoningTag::MissingBranch,
        ReasoningTag::IndexError,
        ReasoningTag::ReturnError,
        ReasoningTag::IoError,
        ReasoningTag::InitUnset,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ReasoningTag::LoopBoundError => "LOOP_BOUND_ERROR",
            ReasoningTag::ConstError => "CONST_ERROR",
            ReasoningTag::OpSubstitution => "OP_SUBSTITUTION",
            ReasoningTag::CmpError => "CMP_ERROR",
            ReasoningTag::MissingBranch => "MISSING_BRANCH",
            ReasoningTag::IndexError => "INDEX_ERROR",
            ReasoningTag::ReturnError => "RETURN_ERROR",
            ReasoningTag::IoError => "IO_ERROR",
            ReasoningTag::InitUnset => "INIT_UNSET",
        }
    }
}

impl fmt::Display for ReasoningTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReasoningTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown reasoning tag `{s}`"))
    }
}

/// Ordered, duplicate-free tag list of length 1..=4.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReasoningTrace {
    pub tags: Vec<ReasoningTag>,
}

impl ReasoningTrace {
    /// Builds a trace after checking the trace invariants.
    pub fn new(tags: Vec<ReasoningTag>) -> Result<Self, RejectReason> {
        check_tags(&tags)?;
        Ok(Self { tags })
    }

    pub fn contains(&self, tag: ReasoningTag) -> bool {
        self.tags.contains(&tag)
    }

    /// 0/1 membership vector indexed by [`ReasoningTag::index`].
    pub fn indicator(&self) -> [f64; NUM_TAGS] {
        let mut v = [0.0; NUM_TAGS];
        for t in &self.tags {
            v[t.index()] = 1.0;
        }
        v
    }

    pub fn is_canonical(&self) -> bool {
        self.tags.windows(2).all(|w| w[0] < w[1])
    }
}

impl fmt::Display for ReasoningTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.tags.iter().map(|t| t.name()).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

fn check_tags(tags: &[ReasoningTag]) -> Result<(), RejectReason> {
    if tags.is_empty() {
        return Err(RejectReason::EmptyTrace);
    }
    for (i, t) in tags.iter().enumerate() {
        if tags[..i].contains(t) {
            return Err(RejectReason::DuplicateTag);
        }
    }
    if tags.len() > MAX_TRACE_LEN {
        return Err(RejectReason::TraceTooLong);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionSource {
    Oracle,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSupervision {
    pub fix_type: FixType,
    pub trace: ReasoningTrace,
    pub source: SupervisionSource,
    pub valid: bool,
}

/// Unvalidated teacher output, as strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSupervision {
    pub fix_type: String,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownFixType,
    UnknownTag,
    EmptyTrace,
    DuplicateTag,
    TraceTooLong,
    /// Response text was not a supervision record at all.
    ParseError,
}

impl RejectReason {
    pub const ALL: [RejectReason; 6] = [
        RejectReason::UnknownFixType,
        RejectReason::UnknownTag,
        RejectReason::EmptyTrace,
        RejectReason::DuplicateTag,
        RejectReason::TraceTooLong,
        RejectReason::ParseError,
    ];
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Checks a raw record against the closed vocabularies and trace invariants.
///
/// When several defects are present the first in this order is reported:
/// unknown fix type, unknown tag, empty trace, duplicate tag, too long.
/// Accepted traces are returned in canonical tag order.
pub fn validate_supervision(
    raw: &RawSupervision,
    source: SupervisionSource,
) -> Result<TeacherSupervision, RejectReason> {
    let fix_type: FixType = raw.fix_type.parse().map_err(|_| RejectReason::UnknownFixType)?;
    let tags = raw
        .trace
        .iter()
        .map(|t| t.parse::<ReasoningTag>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| RejectReason::UnknownTag)?;
    check_tags(&tags)?;
    let mut tags = tags;
    tags.sort();
    Ok(TeacherSupervision {
        fix_type,
        trace: ReasoningTrace { tags },
        source,
        valid: true,
    })
}

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("example {0} has no injected-edit provenance")]
    MissingProvenance(String),
    #[error("no rule covers fix type {fix_type} at a {site_kind} site")]
    NoRule { fix_type: FixType, site_kind: String },
    #[error("rule table: {0}")]
    RuleTable(String),
    #[error("teacher endpoint failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("teacher response could not be parsed: {0}")]
    Parse(String),
    #[error("teacher endpoint misconfigured: {0}")]
    Config(String),
}

/// Counts from one supervision pass. Reason keys use [`RejectReason`] names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub retained: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl FilterReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }

    pub fn rejected_for(&self, reason: RejectReason) -> usize {
        self.rejected.get(&reason).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub enum TeacherMode {
    Oracle(RuleTable),
    Llm(TeacherEndpointConfig),
}

/// Attaches supervision to every example and drops the ones whose teacher
/// output fails validation. Retained examples are otherwise untouched and
/// keep their input order.
pub fn supervise_dataset(
    dataset: &Dataset,
    mode: &TeacherMode,
) -> Result<(Dataset, FilterReport), TeacherError> {
    let outcomes: Vec<Result<TeacherSupervision, RejectReason>> = match mode {
        TeacherMode::Oracle(table) => dataset
            .examples
            .iter()
            .map(|e| rules::oracle_with(table, e).map(Ok))
            .collect::<Result<_, _>>()?,
        TeacherMode::Llm(config) => llm::supervise_all(&dataset.examples, config)?,
    };
    Ok(apply_outcomes(dataset, outcomes))
}

fn apply_outcomes(
    dataset: &Dataset,
    outcomes: Vec<Result<TeacherSupervision, RejectReason>>,
) -> (Dataset, FilterReport) {
    let mut report = FilterReport {
        total: dataset.len(),
        ..FilterReport::default()
    };
    let mut kept: Vec<Example> = Vec::new();
    for (example, outcome) in dataset.examples.iter().zip(outcomes) {
        match outcome {
            Ok(sup) => {
                let mut e = example.clone();
                e.supervision = Some(sup);
                kept.push(e);
            }
            Err(reason) => *report.rejected.entry(reason).or_default() += 1,
        }
    }
    report.retained = kept.len();
    let out = Dataset {
        examples: kept,
        seed: dataset.seed,
        split_ratio: dataset.split_ratio,
    };
    (out, report)
}
