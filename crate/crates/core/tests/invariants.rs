mod support;

use std::collections::HashSet;

use proptest::prelude::*;
use symdistill::corpus::{inject_bug, load_dataset, save_dataset, shipped_templates, stratified_split};
use symdistill::encode::{encode, lex_c, Vocabulary};
use symdistill::metrics::{evaluate, EvalOptions, EvalRecord, EvalReport};
use symdistill::student::{StudentModel, Variant};
use symdistill::tinylearn::Checkpoint;
use symdistill::trainer::{train, TrainConfig};
use symdistill::{FixType, ReasoningTag, Split};

/// Independent lexer for the constructs that appear in the shipped
/// templates: words, integers, quoted literals, comments, directives and
/// operators matched longest first against an explicit set.
fn reference_lex(src: &str) -> Vec<String> {
    let three: HashSet<&str> = ["<<=", ">>=", "..."].into();
    let two: HashSet<&str> = [
        "<=", ">=", "==", "!=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<",
        ">>", "->", "##", "::",
    ]
    .into();
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut at_line_start = true;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            at_line_start = true;
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if src_at(&chars, i, "//") {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if src_at(&chars, i, "/*") {
            i += 2;
            while i < chars.len() && !src_at(&chars, i, "*/") {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '#' && at_line_start {
            let start = i;
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().trim_end().to_string());
        } else {
            at_line_start = false;
            let start = i;
            if c.is_ascii_alphabetic() || c == '_' {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
            } else if c.is_ascii_digit() {
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            } else if c == '"' || c == '\'' {
                i += 1;
                while i < chars.len() && chars[i] != c && chars[i] != '\n' {
                    i += if chars[i] == '\\' { 2 } else { 1 };
                }
                if i < chars.len() && chars[i] == c {
                    i += 1;
                }
            } else {
                let take = |n: usize| chars[i..(i + n).min(chars.len())].iter().collect::<String>();
                i += if three.contains(take(3).as_str()) {
                    3
                } else if two.contains(take(2).as_str()) {
                    2
                } else {
                    1
                };
            }
            out.push(chars[start..i].iter().collect());
        }
    }
    out
}

fn src_at(chars: &[char], i: usize, pat: &str) -> bool {
    pat.chars().enumerate().all(|(k, p)| chars.get(i + k) == Some(&p))
}

#[test]
fn lexer_matches_reference_on_fixture_corpus() {
    let mut sources = 0;
    for t in shipped_templates() {
        assert_eq!(lex_c(&t.source), reference_lex(&t.source), "template {}", t.id);
        sources += 1;
    }
    for e in &support::raw_corpus().examples {
        assert_eq!(lex_c(&e.buggy_source), reference_lex(&e.buggy_source), "{}", e.id);
        sources += 1;
    }
    assert!(sources > 288);
    assert_eq!(lex_c("x==-1"), ["x", "==", "-", "1"]);
}

#[test]
fn dataset_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let ds = support::supervised_corpus();
    save_dataset(ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.examples, ds.examples);
    let again = dir.path().join("again.jsonl");
    save_dataset(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn vocabulary_is_byte_stable() {
    let ds = support::supervised_corpus();
    let a = Vocabulary::build(ds.train(), 1).unwrap().to_text();
    let b = Vocabulary::build(ds.train(), 1).unwrap().to_text();
    assert_eq!(a, b);
    let v = Vocabulary::from_text(&a).unwrap();
    let oov = v.oov_rate(ds.validation());
    assert!((0.0..1.0).contains(&oov));
}

fn small_config(variant: Variant, lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        embed_dim: 8,
        hidden_dim: 12,
        max_len: 96,
        variant,
        lambda_reason: lambda,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_lambda_matches_label_only_fix_path() {
    let ds = support::supervised_corpus();
    let a = train(ds, &small_config(Variant::LabelOnly, 0.0)).unwrap();
    let b = train(ds, &small_config(Variant::ReasoningDistilled, 0.0)).unwrap();
    for id in a.model.fix_path_params() {
        assert_eq!(a.model.params.get(id), b.model.params.get(id), "{}", a.model.params.name(id));
    }
    let losses = |o: &symdistill::trainer::TrainOutcome| o.log.iter().map(|l| l.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.model.num_parameters(), b.model.num_parameters());
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let ds = support::supervised_corpus();
    let cfg = small_config(Variant::ReasoningDistilled, 1.0);
    let out = train(ds, &cfg).unwrap();
    let val = ds.validation();
    let before = evaluate(&out.model, &out.vocab, &val, cfg.eval).unwrap();
    let ck = Checkpoint::from_json(&out.model.to_checkpoint(Some(&out.adam)).to_json()).unwrap();
    let model = StudentModel::from_checkpoint(&ck).unwrap();
    let vocab = Vocabulary::from_text(&out.vocab.to_text()).unwrap();
    assert_eq!(evaluate(&model, &vocab, &val, cfg.eval).unwrap(), before);
}

#[test]
fn training_is_bit_deterministic() {
    let ds = support::supervised_corpus();
    let cfg = small_config(Variant::ReasoningDistilled, 1.0);
    let a = train(ds, &cfg).unwrap();
    let b = train(ds, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}

fn golden_records() -> Vec<EvalRecord> {
    use FixType::*;
    use ReasoningTag::*;
    let r = |g, p, gt: &[ReasoningTag], pt: &[ReasoningTag]| EvalRecord {
        gold_fix: g,
        pred_fix: p,
        gold_trace: gt.to_vec(),
        pred_trace: Some(pt.to_vec()),
    };
    vec![
        r(LoopBound, LoopBound, &[LoopBoundError, CmpError], &[LoopBoundError, CmpError]),
        r(LoopBound, OffByOneIndex, &[LoopBoundError, CmpError], &[LoopBoundError]),
        r(WrongOperator, WrongOperator, &[OpSubstitution], &[OpSubstitution]),
        r(InitError, InitError, &[InitUnset], &[InitUnset]),
        r(IoFormat, WrongConstant, &[IoError], &[ConstError]),
        r(WrongReturn, WrongReturn, &[ReturnError], &[ReturnError, CmpError]),
        r(MissingCase, MissingCase, &[MissingBranch], &[MissingBranch]),
    ]
}

fn check_golden(name: &str, actual: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from golden file");
}

#[test]
fn eval_report_matches_golden_files() {
    let report = EvalReport::from_records(&golden_records(), EvalOptions::default()).unwrap();
    check_golden("eval_report.txt", &report.to_text());
    check_golden("eval_report.json", &format!("{}\n", report.to_json()));
    let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

fn split_of(ds: &symdistill::Dataset, split: Split) -> Vec<String> {
    ds.split_examples(split).map(|e| e.id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn injected_edit_reverts_to_reference(t in 0usize..64, f in 0usize..9, seed in any::<u64>()) {
        let templates = shipped_templates();
        let template = &templates[t % templates.len()];
        let fix = FixType::from_index(f).unwrap();
        if let Ok(e) = inject_bug(template, fix, seed) {
            let edit = &e.provenance.as_ref().unwrap().edit;
            prop_assert_eq!(edit.revert(&e.buggy_source), Some(e.reference_source.clone()));
            prop_assert_ne!(&e.buggy_source, &e.reference_source);
            prop_assert_eq!(e.gold_fix_type, fix);
            prop_assert!(!e.failing_behavior.is_empty());
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic(ratio in 0.55f64..0.9, seed in any::<u64>()) {
        let ds = support::raw_corpus();
        let a = stratified_split(ds, ratio, seed).unwrap();
        let b = stratified_split(ds, ratio, seed).unwrap();
        prop_assert_eq!(split_of(&a, Split::Validation), split_of(&b, Split::Validation));
        let global = a.validation().len() as f64 / a.len() as f64;
        for class in FixType::ALL {
            let of_class: Vec<_> = a.examples.iter().filter(|e| e.gold_fix_type == class).collect();
            let val = of_class.iter().filter(|e| e.split == Some(Split::Validation)).count();
            let frac = val as f64 / of_class.len() as f64;
            prop_assert!((frac - global).abs() <= 1.0 / of_class.len() as f64);
        }
    }

    #[test]
    fn encoding_has_fixed_length(i in 0usize..288, max_len in 1usize..400) {
        let ds = support::supervised_corpus();
        let vocab = Vocabulary::build(ds.train(), 1).unwrap();
        let e = &ds.examples[i];
        let seq = encode(e, &vocab, max_len);
        prop_assert_eq!(seq.ids.len(), max_len);
        prop_assert!(seq.attention_len <= max_len);
        prop_assert!(seq.ids[seq.attention_len..].iter().all(|&id| id == 0));
        prop_assert!(seq.ids[..seq.attention_len].iter().all(|&id| id != 0));
    }

    #[test]
    fn lexer_agrees_with_reference_on_token_soup(
        parts in prop::collection::vec(
            prop::sample::select(vec![
                "a", "_x1", "42", "<", "<=", "<<=", "=", "==", "!", "!=", "-", "--", "->", "+", "++",
                "&", "&&", "|", "||", "(", ")", "{", "}", ";", ",", "\"s %d\\n\"", "'c'", " ", "\n",
                "/* c */", "// c\n",
            ]),
            0..40,
        )
    ) {
        let src: String = parts.concat();
        prop_assert_eq!(lex_c(&src), reference_lex(&src));
    }
}
