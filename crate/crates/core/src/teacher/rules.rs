use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{ReasoningTag, ReasoningTrace, SupervisionSource, TeacherError, TeacherSupervision};
use crate::corpus::{Example, FixType, InjectedEdit, SiteKind};

/// Condition a rule places on the injected edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditPredicate {
    Any,
    /// Comparator swapped within the same direction, e.g. `<` and `<=`.
    BoundaryFlip,
    /// Comparator swapped across directions, e.g. `<` and `>`, `==` and `!=`.
    DirectionFlip,
    /// The edited token sits inside an if/while/for condition.
    InCondition,
}

impl EditPredicate {
    pub fn holds(self, edit: &InjectedEdit) -> bool {
        match self {
            EditPredicate::Any => true,
            EditPredicate::InCondition => edit.in_condition,
            EditPredicate::BoundaryFlip | EditPredicate::DirectionFlip => {
                match (comparator_family(&edit.before), comparator_family(&edit.after)) {
                    (Some(a), Some(b)) => (a == b) == (self == EditPredicate::BoundaryFlip),
                    _ => false,
                }
            }
        }
    }
}

fn comparator_family(op: &str) -> Option<u8> {
    match op.trim() {
        "<" | "<=" => Some(0),
        ">" | ">=" => Some(1),
        "==" => Some(2),
        "!=" => Some(3),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub fix_type: FixType,
    pub site_kind: SiteKind,
    pub when: EditPredicate,
    pub tags: Vec<ReasoningTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    pub version: u32,
    pub rules: Vec<Rule>,
}

#[derive(Deserialize)]
struct RuleFile {
    version: u32,
    #[serde(rename = "rule")]
    rules: Vec<RuleRow>,
}

#[derive(Deserialize)]
struct RuleRow {
    fix_type: String,
    site_kind: String,
    when: EditPredicate,
    tags: Vec<String>,
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self, TeacherError> {
        let file: RuleFile = toml::from_str(text).map_err(|e| TeacherError::RuleTable(e.to_string()))?;
        if file.version != 1 {
            return Err(TeacherError::RuleTable(format!("unsupported version {}", file.version)));
        }
        let mut rules = Vec::new();
        for (i, row) in file.rules.into_iter().enumerate() {
            let bad = |m: String| TeacherError::RuleTable(format!("rule {}: {m}", i + 1));
            let fix_type: FixType = row.fix_type.parse().map_err(bad)?;
            let site_kind: SiteKind = row.site_kind.parse().map_err(bad)?;
            let tags = row
                .tags
                .iter()
                .map(|t| t.parse::<ReasoningTag>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(bad)?;
            let trace = ReasoningTrace::new(tags).map_err(|r| bad(format!("invalid trace: {r}")))?;
            if !trace.is_canonical() {
                return Err(bad("tags are not in canonical order".into()));
            }
            rules.push(Rule {
                fix_type,
                site_kind,
                when: row.when,
                tags: trace.tags,
            });
        }
        Ok(Self {
            version: file.version,
            rules,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TeacherError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TeacherError::RuleTable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn shipped() -> &'static RuleTable {
        static TABLE: OnceLock<RuleTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            RuleTable::parse(include_str!("../../data/rules.toml")).expect("shipped rule table is valid")
        })
    }

    /// Tags for an edit: the first row matching fix type, site kind and predicate.
    pub fn expand(&self, edit: &InjectedEdit) -> Result<ReasoningTrace, TeacherError> {
        self.rules
            .iter()
            .find(|r| r.fix_type == edit.fix_type && r.site_kind == edit.site_kind && r.when.holds(edit))
            .map(|r| ReasoningTrace { tags: r.tags.clone() })
            .ok_or_else(|| TeacherError::NoRule {
                fix_type: edit.fix_type,
                site_kind: edit.site_kind.name().to_string(),
            })
    }
}

/// Oracle supervision from the shipped rule table.
pub fn oracle_supervise(example: &Example) -> Result<TeacherSupervision, TeacherError> {
    oracle_with(RuleTable::shipped(), example)
}

pub(crate) fn oracle_with(table: &RuleTable, example: &Example) -> Result<TeacherSupervision, TeacherError> {
    let edit = &example
        .provenance
        .as_ref()
        .ok_or_else(|| TeacherError::MissingProvenance(example.id.clone()))?
        .edit;
    Ok(TeacherSupervision {
        fix_type: example.gold_fix_type,
        trace: table.expand(edit)?,
        source: SupervisionSource::Oracle,
        valid: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edit(fix_type: FixType, before: &str, after: &str, in_condition: bool) -> InjectedEdit {
        InjectedEdit {
            site_id: "x@0".into(),
            site_kind: fix_type.site_kind(),
            offset: 0,
            before: before.into(),
            after: after.into(),
            fix_type,
            in_condition,
        }
    }

    #[test]
    fn predicates() {
        let e = edit(FixType::WrongCondition, "<", "<=", true);
        assert!(EditPredicate::BoundaryFlip.holds(&e));
        assert!(!EditPredicate::DirectionFlip.holds(&e));
        let e = edit(FixType::WrongCondition, "==", "!=", true);
        assert!(EditPredicate::DirectionFlip.holds(&e));
        let e = edit(FixType::WrongOperator, "+", "-", false);
        assert!(!EditPredicate::BoundaryFlip.holds(&e));
        assert!(!EditPredicate::DirectionFlip.holds(&e));
    }

    #[test]
    fn shipped_expansions() {
        let t = RuleTable::shipped();
        use ReasoningTag::*;
        let cases = [
            (edit(FixType::LoopBound, "<", "<=", true), vec![LoopBoundError, CmpError]),
            (edit(FixType::WrongCondition, ">", "<", true), vec![CmpError, MissingBranch]),
            (edit(FixType::WrongCondition, ">", ">=", true), vec![CmpError]),
            (edit(FixType::InitError, " = 0", "", false), vec![InitUnset]),
            (edit(FixType::WrongConstant, "10", "11", true), vec![ConstError, CmpError]),
            (edit(FixType::WrongConstant, "10", "11", false), vec![ConstError]),
        ];
        for (e, tags) in cases {
            assert_eq!(t.expand(&e).unwrap().tags, tags, "{e:?}");
        }
    }

    #[test]
    fn every_fix_type_has_a_fallback_row() {
        let t = RuleTable::shipped();
        for f in FixType::ALL {
            assert!(
                t.rules.iter().any(|r| r.fix_type == f && r.when == EditPredicate::Any),
                "{f}"
            );
        }
    }

    #[test]
    fn rejects_non_canonical_rows() {
        let text = r#"
version = 1
[[rule]]
fix_type = "LOOP_BOUND"
site_kind = "loop-bound"
when = "any"
tags = ["CMP_ERROR", "LOOP_BOUND_ERROR"]
"#;
        assert!(matches!(RuleTable::parse(text), Err(TeacherError::RuleTable(_))));
    }

    #[test]
    fn unmatched_edit_is_an_error() {
        let table = RuleTable {
            version: 1,
            rules: vec![],
        };
        let e = edit(FixType::IoFormat, "\"%d\\n\"", "\"%d\"", false);
        assert!(matches!(table.expand(&e), Err(TeacherError::NoRule { .. })));
    }
}
