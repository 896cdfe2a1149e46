use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;

use super::cmini::{self, EditSite, DEFAULT_STEP_LIMIT};
use super::{CorpusError, SiteKind};

const SHIPPED: &str = include_str!("../../data/templates.toml");
const MAX_LINES: usize = 60;
const MIN_SITE_KINDS: usize = 3;

/// A bug-free program plus its test inputs and detected edit sites.
#[derive(Debug, Clone)]
pub struct ProgramTemplate {
    pub id: String,
    pub source: String,
    pub inputs: Vec<String>,
    pub edit_sites: Vec<EditSite>,
    /// Reference output for each input.
    pub expected: Vec<String>,
}

impl ProgramTemplate {
    pub fn new(id: &str, source: &str, inputs: Vec<String>) -> Result<Self, CorpusError> {
        let fail = |message: String| CorpusError::Template {
            id: id.to_string(),
            message,
        };
        let lines = source.lines().count();
        if lines > MAX_LINES {
            return Err(fail(format!("{lines} lines exceeds the {MAX_LINES}-line limit")));
        }
        if inputs.is_empty() {
            return Err(fail("no test inputs".into()));
        }
        let program = cmini::parse(source).map_err(|e| fail(e.to_string()))?;
        let kinds: BTreeSet<SiteKind> = program.sites.iter().map(|s| s.kind).collect();
        if kinds.len() < MIN_SITE_KINDS {
            return Err(fail(format!(
                "only {} distinct edit-site kinds, need {MIN_SITE_KINDS}",
                kinds.len()
            )));
        }
        let mut expected = Vec::with_capacity(inputs.len());
        for input in &inputs {
            let run = program.run(input, DEFAULT_STEP_LIMIT);
            if let Some(fault) = run.fault {
                return Err(fail(format!("reference fails on input {input:?}: {fault}")));
            }
            if run.uninit_reads > 0 {
                return Err(fail(format!("reference reads uninitialized memory on input {input:?}")));
            }
            // Determinism check: a second run must agree exactly.
            if program.run(input, DEFAULT_STEP_LIMIT).output != run.output {
                return Err(fail(format!("nondeterministic output on input {input:?}")));
            }
            expected.push(run.output);
        }
        Ok(Self {
            id: id.to_string(),
            source: source.to_string(),
            inputs,
            edit_sites: program.sites.clone(),
            expected,
        })
    }

    pub fn sites_of(&self, kind: SiteKind) -> impl Iterator<Item = &EditSite> {
        self.edit_sites.iter().filter(move |s| s.kind == kind)
    }

    pub fn site_text(&self, site: &EditSite) -> &str {
        &self.source[site.start..site.end]
    }
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    #[serde(default)]
    template: Vec<RawTemplate>,
}

#[derive(Deserialize)]
struct RawTemplate {
    id: String,
    inputs: Vec<String>,
    source: String,
}

/// Parses a TOML template collection.
pub fn parse_templates(text: &str) -> Result<Vec<ProgramTemplate>, CorpusError> {
    let file: TemplateFile = toml::from_str(text).map_err(|e| CorpusError::Template {
        id: "<file>".into(),
        message: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(CorpusError::Template {
            id: "<file>".into(),
            message: format!("unsupported template file version {}", file.version),
        });
    }
    file.template
        .into_iter()
        .map(|t| ProgramTemplate::new(&t.id, &t.source, t.inputs))
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<ProgramTemplate>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_templates(&text)
}

/// The template set bundled with the crate.
pub fn shipped_templates() -> &'static [ProgramTemplate] {
    static TEMPLATES: OnceLock<Vec<ProgramTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| parse_templates(SHIPPED).expect("shipped templates are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_templates_parse_and_run() {
        let ts = shipped_templates();
        assert!(ts.len() >= 15);
        for t in ts {
            assert_eq!(t.expected.len(), t.inputs.len(), "{}", t.id);
        }
    }

    #[test]
    fn every_site_kind_is_present_somewhere() {
        let kinds: BTreeSet<SiteKind> = shipped_templates()
            .iter()
            .flat_map(|t| t.edit_sites.iter().map(|s| s.kind))
            .collect();
        assert_eq!(kinds.len(), 9);
    }

    #[test]
    fn loop_template_sites() {
        let src = "int main() {\n    int n, i, s = 0;\n    scanf(\"%d\", &n);\n    for (i = 0; i < n; i++) {\n        s = s + i;\n    }\n    printf(\"%d\\n\", s);\n    return 0;\n}\n";
        let t = ProgramTemplate::new("loop", src, vec!["4".into()]).unwrap();
        assert_eq!(t.expected, vec!["6\n".to_string()]);
        let loop_sites: Vec<&str> = t.sites_of(SiteKind::LoopBound).map(|s| t.site_text(s)).collect();
        assert_eq!(loop_sites, ["<"]);
        let init: Vec<&str> = t.sites_of(SiteKind::Initialization).map(|s| t.site_text(s)).collect();
        assert_eq!(init, [" = 0"]);
        let fmt: Vec<&str> = t.sites_of(SiteKind::IoFormat).map(|s| t.site_text(s)).collect();
        assert_eq!(fmt, ["\"%d\\n\""]);
        // `return 0` in main is not a constant site.
        assert!(t.sites_of(SiteKind::Constant).all(|s| s.start < src.find("return").unwrap()));
    }

    #[test]
    fn too_few_site_kinds_rejected() {
        let err = ProgramTemplate::new("tiny", "int main() { return 0; }", vec!["".into()]).unwrap_err();
        assert!(matches!(err, CorpusError::Template { .. }));
    }

    #[test]
    fn faulting_reference_rejected() {
        let src = "int main() { int a[2]; int i = 5; a[i] = 1; printf(\"%d\\n\", a[0] + 1); return 0; }";
        let err = ProgramTemplate::new("oob", src, vec!["".into()]).unwrap_err();
        assert!(err.to_string().contains("out of bounds"), "{err}");
    }
}
