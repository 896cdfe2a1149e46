use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::cmini::{self, EditSite, Fault, DEFAULT_STEP_LIMIT};
use super::{
    CorpusError, Example, FailingCase, FixType, InjectedEdit, ProgramTemplate, Provenance,
    SiteKind,
};
use crate::tinylearn::rng::Rng;

const SHIPPED: &str = include_str!("../../data/mutations.toml");
/// Failing cases kept per example.
pub const MAX_FAILING_CASES: usize = 3;
const MAX_OBSERVED_CHARS: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rewrite {
    DropInitializer,
    DropCase,
    PlusOne,
    MinusOne,
    Zero,
    Negate,
    Increment,
    Decrement,
    DropNewline,
    NewlineToSpace,
    AppendNewline,
}

impl Rewrite {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "drop_initializer" => Rewrite::DropInitializer,
            "drop_case" => Rewrite::DropCase,
            "plus_one" => Rewrite::PlusOne,
            "minus_one" => Rewrite::MinusOne,
            "zero" => Rewrite::Zero,
            "negate" => Rewrite::Negate,
            "increment" => Rewrite::Increment,
            "decrement" => Rewrite::Decrement,
            "drop_newline" => Rewrite::DropNewline,
            "newline_to_space" => Rewrite::NewlineToSpace,
            "append_newline" => Rewrite::AppendNewline,
            _ => return None,
        })
    }

    /// Replacement text for the site text `before`, if the rewrite applies.
    fn apply(self, before: &str) -> Option<String> {
        let literal = before.trim().parse::<i64>().ok();
        let wrapped = || {
            if before.contains(|c: char| "=<>&|?".contains(c)) {
                format!("({before})")
            } else {
                before.to_string()
            }
        };
        match self {
            Rewrite::DropInitializer | Rewrite::DropCase => Some(String::new()),
            Rewrite::PlusOne | Rewrite::Increment => Some(match literal {
                Some(v) => (v + 1).to_string(),
                None if self == Rewrite::Increment => return None,
                None => format!("{} + 1", wrapped()),
            }),
            Rewrite::MinusOne | Rewrite::Decrement => match literal {
                Some(v) if v > 0 => Some((v - 1).to_string()),
                Some(_) => None,
                None if self == Rewrite::Decrement => None,
                None => Some(format!("{} - 1", wrapped())),
            },
            Rewrite::Zero => (literal != Some(0)).then(|| "0".to_string()),
            Rewrite::Negate => match literal {
                Some(0) => None,
                Some(_) => Some(format!("-{before}")),
                None if before.chars().all(|c| c.is_alphanumeric() || c == '_') => {
                    Some(format!("-{before}"))
                }
                None => Some(format!("-({before})")),
            },
            Rewrite::DropNewline => {
                let body = before.strip_suffix("\\n\"")?;
                Some(format!("{body}\""))
            }
            Rewrite::NewlineToSpace => {
                let at = before.rfind("\\n")?;
                Some(format!("{} {}", &before[..at], &before[at + 2..]))
            }
            Rewrite::AppendNewline => {
                if before.ends_with("\\n\"") {
                    return None;
                }
                let body = before.strip_suffix('"')?;
                Some(format!("{body}\\n\""))
            }
        }
    }
}

#[derive(Deserialize)]
struct TableFile {
    version: u32,
    operators: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    rewrites: BTreeMap<String, Vec<String>>,
}

/// Versioned rewrite rules per edit-site kind.
#[derive(Debug, Clone)]
pub struct MutationTable {
    pub version: u32,
    operators: BTreeMap<SiteKind, BTreeMap<String, Vec<String>>>,
    rewrites: BTreeMap<SiteKind, Vec<Rewrite>>,
}

impl MutationTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let file: TableFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if file.version != 1 {
            return Err(format!("unsupported mutation table version {}", file.version));
        }
        let mut operators = BTreeMap::new();
        for (kind, ops) in file.operators {
            operators.insert(kind.parse::<SiteKind>()?, ops);
        }
        let mut rewrites = BTreeMap::new();
        for (kind, names) in file.rewrites {
            let parsed = names
                .iter()
                .map(|n| Rewrite::parse(n).ok_or_else(|| format!("unknown rewrite `{n}`")))
                .collect::<Result<Vec<_>, _>>()?;
            rewrites.insert(kind.parse::<SiteKind>()?, parsed);
        }
        Ok(Self {
            version: file.version,
            operators,
            rewrites,
        })
    }

    pub fn shipped() -> &'static MutationTable {
        static TABLE: OnceLock<MutationTable> = OnceLock::new();
        TABLE.get_or_init(|| MutationTable::parse(SHIPPED).expect("shipped mutation table is valid"))
    }

    /// Replacement texts for a site, in table order.
    pub fn replacements(&self, kind: SiteKind, before: &str) -> Vec<String> {
        if let Some(ops) = self.operators.get(&kind) {
            return ops.get(before).cloned().unwrap_or_default();
        }
        self.rewrites
            .get(&kind)
            .map(|rs| rs.iter().filter_map(|r| r.apply(before)).collect())
            .unwrap_or_default()
    }
}

/// A concrete injectable bug with its recorded failing behavior.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub edit: InjectedEdit,
    pub buggy_source: String,
    pub failing: Vec<FailingCase>,
}

impl Candidate {
    pub fn to_example(&self, template: &ProgramTemplate, id: String) -> Example {
        Example {
            id,
            buggy_source: self.buggy_source.clone(),
            reference_source: template.source.clone(),
            failing_behavior: self.failing.clone(),
            gold_fix_type: self.edit.fix_type,
            supervision: None,
            split: None,
            provenance: Some(Provenance {
                template_id: template.id.clone(),
                edit: self.edit.clone(),
            }),
        }
    }
}

/// Every edit of `fix_type` the template admits that changes observable
/// behavior on at least one test input, in site then table order.
pub fn candidates(template: &ProgramTemplate, fix_type: FixType, table: &MutationTable) -> Vec<Candidate> {
    let mut out = Vec::new();
    for site in template.sites_of(fix_type.site_kind()) {
        let before = template.site_text(site);
        for after in table.replacements(site.kind, before) {
            if after == before {
                continue;
            }
            if let Some(c) = build_candidate(template, site, fix_type, before, &after) {
                out.push(c);
            }
        }
    }
    out
}

fn build_candidate(
    template: &ProgramTemplate,
    site: &EditSite,
    fix_type: FixType,
    before: &str,
    after: &str,
) -> Option<Candidate> {
    let edit = InjectedEdit {
        site_id: site.id.clone(),
        site_kind: site.kind,
        offset: site.start,
        before: before.to_string(),
        after: after.to_string(),
        fix_type,
        in_condition: site.in_condition,
    };
    let buggy_source = edit.apply(&template.source)?;
    let program = cmini::parse(&buggy_source).ok()?;
    let mut failing = Vec::new();
    for (input, expected) in template.inputs.iter().zip(&template.expected) {
        let run = program.run(input, DEFAULT_STEP_LIMIT);
        let mut observed = match run.fault {
            Some(Fault::StepLimit) => "timeout".to_string(),
            Some(fault) => format!("runtime error: {fault}"),
            None if &run.output == expected => continue,
            None if squash(&run.output) == squash(expected) => {
                format!("format mismatch: {}", clip(&run.output))
            }
            None => format!("wrong output: {} diff: {}", clip(&run.output), diff_summary(expected, &run.output)),
        };
        if run.uninit_reads > 0 {
            observed.push_str(" note: uninitialized read");
        }
        failing.push(FailingCase {
            input: input.clone(),
            expected: expected.clone(),
            observed,
        });
        if failing.len() == MAX_FAILING_CASES {
            break;
        }
    }
    (!failing.is_empty()).then_some(Candidate {
        edit,
        buggy_source,
        failing,
    })
}

/// Short description of how `observed` departs from `expected`: line count
/// change, then direction and size of the first differing number.
pub fn diff_summary(expected: &str, observed: &str) -> String {
    let exp: Vec<&str> = expected.lines().collect();
    let obs: Vec<&str> = observed.lines().collect();
    let mut parts = Vec::new();
    match obs.len().cmp(&exp.len()) {
        std::cmp::Ordering::Less => parts.push("missing lines".to_string()),
        std::cmp::Ordering::Greater => parts.push("extra lines".to_string()),
        std::cmp::Ordering::Equal => {}
    }
    let first = exp.iter().zip(&obs).position(|(e, o)| e != o);
    if let Some(i) = first {
        parts.push(format!("line {}", i + 1));
        let nums = |l: &str| -> Vec<i64> { l.split_whitespace().filter_map(|w| w.parse().ok()).collect() };
        let pair = nums(exp[i]).into_iter().zip(nums(obs[i])).find(|(e, o)| e != o);
        if let Some((e, o)) = pair {
            let d = o.wrapping_sub(e);
            parts.push(if o == -e {
                "sign flipped".to_string()
            } else if o == 0 {
                "zero".to_string()
            } else if d > 0 {
                format!("too high by {d}")
            } else {
                format!("too low by {}", d.unsigned_abs())
            });
        } else {
            parts.push("text differs".to_string());
        }
    }
    parts.join(" ")
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

fn clip(s: &str) -> String {
    if s.chars().count() <= MAX_OBSERVED_CHARS {
        s.to_string()
    } else {
        let mut out: String = s.chars().take(MAX_OBSERVED_CHARS).collect();
        out.push_str("...");
        out
    }
}

/// Injects one bug of `fix_type` into `template`, choosing among the
/// observable candidates with a generator seeded by `rng_seed`.
pub fn inject_bug(
    template: &ProgramTemplate,
    fix_type: FixType,
    rng_seed: u64,
) -> Result<Example, CorpusError> {
    let cands = candidates(template, fix_type, MutationTable::shipped());
    if cands.is_empty() {
        return Err(CorpusError::NoEditSite {
            template: template.id.clone(),
            fix_type,
        });
    }
    let pick = Rng::new(rng_seed).below(cands.len());
    let id = format!("{}-{}-{rng_seed}", template.id, fix_type.name().to_lowercase());
    Ok(cands[pick].to_example(template, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_template() -> ProgramTemplate {
        let src = "int main() {\n    int n, i;\n    int a[8];\n    scanf(\"%d\", &n);\n    for(i=0;i<n;i++) {\n        a[i] = i * 2;\n    }\n    printf(\"%d\\n\", a[n - 1]);\n    return 0;\n}\n";
        ProgramTemplate::new("loop", src, vec!["3".into(), "8".into()]).unwrap()
    }

    fn cond_template() -> ProgramTemplate {
        let src = "int main() {\n    int a, b;\n    int seen = 0;\n    scanf(\"%d %d\", &a, &b);\n    if (a > b) {\n        printf(\"first\\n\");\n    } else {\n        printf(\"second\\n\");\n    }\n    return 0;\n}\n";
        ProgramTemplate::new("cond", src, vec!["1 2".into(), "2 1".into(), "3 3".into()]).unwrap()
    }

    #[test]
    fn loop_bound_is_forced() {
        let ex = inject_bug(&loop_template(), FixType::LoopBound, 7).unwrap();
        assert!(ex.buggy_source.contains("i<=n"), "{}", ex.buggy_source);
        let edit = &ex.provenance.as_ref().unwrap().edit;
        assert_eq!((edit.before.as_str(), edit.after.as_str()), ("<", "<="));
        assert_eq!(ex.gold_fix_type, FixType::LoopBound);
        assert_eq!(ex.failing_behavior[0].observed, "runtime error: array index out of bounds");
    }

    #[test]
    fn comparison_pick_follows_seeded_table() {
        let t = cond_template();
        // The table lists `>` -> [`>=`, `<`]; both change behavior on the inputs.
        let table = MutationTable::shipped();
        assert_eq!(table.replacements(SiteKind::Comparison, ">"), [">=", "<"]);
        let enumerated = candidates(&t, FixType::WrongCondition, table);
        let afters: Vec<&str> = enumerated.iter().map(|c| c.edit.after.as_str()).collect();
        assert_eq!(afters, [">=", "<"]);
        let expected = afters[Rng::new(1).below(2)];
        let ex = inject_bug(&t, FixType::WrongCondition, 1).unwrap();
        assert!(ex.buggy_source.contains(&format!("if (a {expected} b)")));
    }

    #[test]
    fn missing_case_without_switch() {
        let err = inject_bug(&cond_template(), FixType::MissingCase, 3).unwrap_err();
        assert!(matches!(err, CorpusError::NoEditSite { fix_type: FixType::MissingCase, .. }));
    }

    #[test]
    fn deterministic_for_seed() {
        let t = &crate::corpus::shipped_templates()[0];
        let a = inject_bug(t, FixType::WrongConstant, 11).unwrap();
        let b = inject_bug(t, FixType::WrongConstant, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rewrites() {
        assert_eq!(Rewrite::PlusOne.apply("i").as_deref(), Some("i + 1"));
        assert_eq!(Rewrite::PlusOne.apply("3").as_deref(), Some("4"));
        assert_eq!(Rewrite::MinusOne.apply("0"), None);
        assert_eq!(Rewrite::Negate.apply("a % b").as_deref(), Some("-(a % b)"));
        assert_eq!(Rewrite::Negate.apply("x % 2 == 0").as_deref(), Some("-(x % 2 == 0)"));
        assert_eq!(Rewrite::DropNewline.apply("\"%d\\n\"").as_deref(), Some("\"%d\""));
        assert_eq!(Rewrite::NewlineToSpace.apply("\"%d\\n\"").as_deref(), Some("\"%d \""));
        assert_eq!(Rewrite::AppendNewline.apply("\"%d \"").as_deref(), Some("\"%d \\n\""));
        assert_eq!(Rewrite::AppendNewline.apply("\"%d\\n\""), None);
    }

    #[test]
    fn equivalent_mutants_are_filtered() {
        // `x * 1` -> `x / 1` prints the same value.
        let src = "int main() {\n    int x = 0;\n    scanf(\"%d\", &x);\n    printf(\"%d\\n\", x * 1);\n    return 0;\n}\n";
        let t = ProgramTemplate::new("eq", src, vec!["5".into()]).unwrap();
        let afters: Vec<String> = candidates(&t, FixType::WrongOperator, MutationTable::shipped())
            .into_iter()
            .map(|c| c.edit.after)
            .collect();
        assert_eq!(afters, ["+"]);
    }
}
