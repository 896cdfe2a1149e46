//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance target.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use symdistill::corpus::{generate_corpus, shipped_templates, stratified_split};
use symdistill::encode::TokenSequence;
use symdistill::metrics::{EvalOptions, EvalRecord, EvalReport, MacroAverage, TraceMatch};
use symdistill::structured::{apply_patch, make_json_target, JsonTarget};
use symdistill::student::{loss_joint, loss_label_only, StudentConfig, StudentModel, TrainItem, Variant};
use symdistill::teacher::stub::{StubResponse, StubServer};
use symdistill::teacher::{
    supervise_dataset, validate_supervision, FilterReport, RawSupervision, RejectReason, RuleTable,
    SupervisionSource, TeacherEndpointConfig, TeacherMode, MAX_TRACE_LEN, NUM_TAGS,
};
use symdistill::tinylearn::Rng;
use symdistill::{Dataset, FixType, ReasoningTag, ReasoningTrace};

pub const PER_CLASS: usize = 32;
pub const CORPUS_SEED: u64 = 42;
pub const SPLIT_RATIO: f64 = 0.8;
pub const SPLIT_SEED: u64 = 7;

/// The 9 × 32 corpus, unsupervised and unsplit.
pub fn raw_corpus() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_corpus(shipped_templates(), PER_CLASS, CORPUS_SEED).expect("corpus"))
}

/// The 9 × 32 corpus with oracle supervision and an 80/20 split.
pub fn supervised_corpus() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let (sup, report) =
            supervise_dataset(raw_corpus(), &TeacherMode::Oracle(RuleTable::shipped().clone())).expect("oracle");
        assert_eq!(report.retained, report.total);
        stratified_split(&sup, SPLIT_RATIO, SPLIT_SEED).expect("split")
    })
}

// ---------------------------------------------------------------------------
// Gradient check

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckResult {
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

fn random_item(rng: &mut Rng, vocab: usize, max_len: usize) -> (TrainItem, FixType, ReasoningTrace) {
    let len = 1 + rng.below(max_len);
    let mut ids: Vec<u32> = (0..len).map(|_| 1 + rng.below(vocab - 1) as u32).collect();
    ids.resize(max_len, 0);
    let seq = TokenSequence { ids, attention_len: len };
    let gold = FixType::from_index(rng.below(FixType::ALL.len())).unwrap();
    let mut tags: Vec<ReasoningTag> = ReasoningTag::ALL.iter().copied().filter(|_| rng.uniform() < 0.3).collect();
    tags.truncate(MAX_TRACE_LEN);
    if tags.is_empty() {
        tags.push(ReasoningTag::ALL[rng.below(NUM_TAGS)]);
    }
    let trace = ReasoningTrace::new(tags).expect("trace");
    (TrainItem::new(seq.clone(), gold, &trace), gold, trace)
}

/// Compares the graph gradients of the per-example loss with central
/// differences of the closed-form loss, over every parameter scalar of a
/// small randomly drawn model. One point is one (parameters, example) draw.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// gradients that are exactly zero from dividing by zero.
pub fn gradcheck(variant: Variant, points: usize, seed: u64) -> GradcheckResult {
    let mut rng = Rng::new(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut coordinates = 0;
    let lambda = 0.7;
    for point in 0..points {
        let config = StudentConfig {
            embed_dim: 5,
            hidden_dim: 6,
            max_len: 8,
            lambda_reason: lambda,
            ..StudentConfig::new(12, variant)
        };
        let mut model = StudentModel::init(config.clone(), seed.wrapping_add(point as u64));
        for t in model.params.tensors_mut() {
            for v in &mut t.data {
                *v = rng.uniform_range(-0.8, 0.8);
            }
        }
        let (item, gold, trace) = random_item(&mut rng, config.vocab_size, config.max_len);
        let (_, grads) = model.batch_loss(std::slice::from_ref(&item)).expect("batch loss");
        let loss = |m: &StudentModel| {
            let pred = m.forward(&item.seq).expect("forward");
            match variant {
                Variant::LabelOnly => loss_label_only(&pred, gold),
                Variant::ReasoningDistilled => loss_joint(&pred, gold, &trace, lambda),
            }
        };
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let analytic = grads.get(id).cloned();
            for k in 0..model.params.get(id).data.len() {
                let orig = model.params.get(id).data[k];
                model.params.get_mut(id).data[k] = orig + FD_STEP;
                let up = loss(&model);
                model.params.get_mut(id).data[k] = orig - FD_STEP;
                let down = loss(&model);
                model.params.get_mut(id).data[k] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.as_ref().map_or(0.0, |t| t.data[k]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                max_rel_err = max_rel_err.max(rel);
                coordinates += 1;
            }
        }
    }
    GradcheckResult {
        points,
        coordinates,
        max_rel_err,
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric recount

/// Random records with a bias toward agreement so every metric sees both
/// hits and misses.
pub fn random_records(rng: &mut Rng, max_n: usize) -> Vec<EvalRecord> {
    let n = 1 + rng.below(max_n);
    (0..n)
        .map(|_| {
            let gold_fix = FixType::from_index(rng.below(9)).unwrap();
            let pred_fix = if rng.uniform() < 0.5 {
                gold_fix
            } else {
                FixType::from_index(rng.below(9)).unwrap()
            };
            let gold_trace = random_tags(rng);
            let pred_trace = if rng.uniform() < 0.4 { gold_trace.clone() } else { random_tags(rng) };
            EvalRecord {
                gold_fix,
                pred_fix,
                gold_trace,
                pred_trace: Some(pred_trace),
            }
        })
        .collect()
}

fn random_tags(rng: &mut Rng) -> Vec<ReasoningTag> {
    let k = rng.below(4);
    let mut out: Vec<ReasoningTag> = (0..k).map(|_| ReasoningTag::ALL[rng.below(NUM_TAGS)]).collect();
    out.sort();
    out.dedup();
    // Occasionally out of canonical order, so ordered and set matching differ.
    if out.len() > 1 && rng.uniform() < 0.2 {
        out.reverse();
    }
    out
}

fn harmonic(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

fn mask(tags: &[ReasoningTag]) -> u32 {
    tags.iter().fold(0, |m, &t| m | 1 << ReasoningTag::ALL.iter().position(|&x| x == t).unwrap())
}

/// Recomputes every report metric with per-example loops and compares
/// against the library report. Returns the names of disagreeing metrics.
pub fn recount_mismatches(records: &[EvalRecord], options: EvalOptions) -> Vec<String> {
    let report = EvalReport::from_records(records, options).expect("report");
    let mut bad = Vec::new();
    let n = records.len();

    let hits = records.iter().filter(|r| r.pred_fix == r.gold_fix).count();
    if report.accuracy != hits as f64 / n as f64 {
        bad.push("accuracy".to_string());
    }

    let mut f1s = Vec::new();
    let mut present = Vec::new();
    for class in FixType::ALL {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for r in records {
            if r.pred_fix == class && r.gold_fix == class {
                tp += 1;
            } else if r.pred_fix == class {
                fp += 1;
            } else if r.gold_fix == class {
                fn_ += 1;
            }
        }
        let f = harmonic(tp, fp, fn_);
        let score = report.per_class_f1.iter().find(|c| c.fix_type == class).unwrap();
        if score.f1 != f {
            bad.push(format!("f1[{}]", class.name()));
        }
        f1s.push(f);
        present.push(tp + fn_ > 0);
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (f, p) in f1s.iter().zip(&present) {
        if options.macro_average == MacroAverage::AllClasses || *p {
            sum += f;
            count += 1;
        }
    }
    if report.macro_f1 != if count == 0 { 0.0 } else { sum / count as f64 } {
        bad.push("macro_f1".to_string());
    }

    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut tag_f1_sum = 0.0;
    for tag in ReasoningTag::ALL {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for r in records {
            let p = r.pred_trace.as_ref().unwrap().contains(&tag);
            let g = r.gold_trace.contains(&tag);
            tp += usize::from(p && g);
            fp += usize::from(p && !g);
            fn_ += usize::from(!p && g);
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        tag_f1_sum += if tp + fp + fn_ == 0 { 1.0 } else { harmonic(tp, fp, fn_) };
    }
    let micro = if tp_all + fp_all + fn_all == 0 {
        1.0
    } else {
        harmonic(tp_all, fp_all, fn_all)
    };
    if report.tag_micro_f1 != Some(micro) {
        bad.push("tag_micro_f1".to_string());
    }
    if report.tag_macro_f1 != Some(tag_f1_sum / NUM_TAGS as f64) {
        bad.push("tag_macro_f1".to_string());
    }

    let trace_ok = |r: &EvalRecord| {
        let p = r.pred_trace.as_ref().unwrap();
        match options.trace_match {
            TraceMatch::Ordered => p.len() == r.gold_trace.len() && p.iter().zip(&r.gold_trace).all(|(a, b)| a == b),
            TraceMatch::Set => mask(p) == mask(&r.gold_trace),
        }
    };
    let em = records.iter().filter(|r| trace_ok(r)).count();
    if report.exact_match != Some(em as f64 / n as f64) {
        bad.push("exact_match".to_string());
    }

    let mut part = [(0usize, 0usize); 2];
    for r in records {
        let k = if trace_ok(r) { 0 } else { 1 };
        part[k].0 += 1;
        part[k].1 += usize::from(r.pred_fix == r.gold_fix);
    }
    let rate = |(n, h): (usize, usize)| if n == 0 { None } else { Some(h as f64 / n as f64) };
    let c = report.conditional.as_ref().unwrap();
    if c.n_correct_trace != part[0].0
        || c.n_incorrect_trace != part[1].0
        || c.acc_given_trace_correct != rate(part[0])
        || c.acc_given_trace_incorrect != rate(part[1])
    {
        bad.push("conditional".to_string());
    }
    bad
}

/// Runs the recount on `instances` random instances of at most 30 records,
/// cycling through every averaging and matching option.
pub fn metric_oracle(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    let mut bad = Vec::new();
    for i in 0..instances {
        let records = random_records(&mut rng, 30);
        let options = EvalOptions {
            macro_average: if i % 2 == 0 { MacroAverage::AllClasses } else { MacroAverage::PresentOnly },
            trace_match: if i % 4 < 2 { TraceMatch::Ordered } else { TraceMatch::Set },
        };
        for m in recount_mismatches(&records, options) {
            bad.push(format!("instance {i}: {m}"));
        }
    }
    bad
}

// ---------------------------------------------------------------------------
// Supervision filtering

/// What the stub endpoint answers for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injected {
    Valid,
    Defect(RejectReason),
}

const PLAN: [Injected; 10] = [
    Injected::Valid,
    Injected::Defect(RejectReason::UnknownFixType),
    Injected::Valid,
    Injected::Defect(RejectReason::UnknownTag),
    Injected::Defect(RejectReason::EmptyTrace),
    Injected::Valid,
    Injected::Defect(RejectReason::DuplicateTag),
    Injected::Defect(RejectReason::TraceTooLong),
    Injected::Valid,
    Injected::Defect(RejectReason::ParseError),
];

fn response_for(injected: Injected, fix: FixType, trace: &[ReasoningTag]) -> String {
    let names = |tags: &[ReasoningTag]| tags.iter().map(|t| t.name().to_string()).collect::<Vec<_>>();
    let record = |fix: &str, trace: Vec<String>| serde_json::json!({ "fix_type": fix, "trace": trace }).to_string();
    match injected {
        Injected::Valid => record(fix.name(), names(trace)),
        Injected::Defect(RejectReason::UnknownFixType) => record("STYLE_FIX", names(trace)),
        Injected::Defect(RejectReason::UnknownTag) => {
            let mut t = names(trace);
            t.push("STYLE_ISSUE".into());
            record(fix.name(), t)
        }
        Injected::Defect(RejectReason::EmptyTrace) => record(fix.name(), Vec::new()),
        Injected::Defect(RejectReason::DuplicateTag) => {
            let mut t = names(trace);
            t.push(t[0].clone());
            record(fix.name(), t)
        }
        Injected::Defect(RejectReason::TraceTooLong) => record(fix.name(), names(&ReasoningTag::ALL[..MAX_TRACE_LEN + 1])),
        Injected::Defect(RejectReason::ParseError) => {
            let full = record(fix.name(), names(trace));
            full[..full.len() / 2].to_string()
        }
    }
}

pub struct FilterSuite {
    pub expected: FilterReport,
    pub observed: FilterReport,
    /// Retained examples whose supervision differs from the oracle's.
    pub label_mismatches: usize,
}

/// Serves oracle supervision through the stub endpoint with defects
/// injected by a fixed plan, and runs LLM-mode supervision against it.
pub fn stub_filter_suite(per_class: usize) -> FilterSuite {
    let raw = generate_corpus(shipped_templates(), per_class, CORPUS_SEED).expect("corpus");
    let (oracle, _) = supervise_dataset(&raw, &TeacherMode::Oracle(RuleTable::shipped().clone())).expect("oracle");
    let mut plan: HashMap<String, (Injected, FixType, Vec<ReasoningTag>)> = HashMap::new();
    let mut expected = FilterReport {
        total: raw.len(),
        ..FilterReport::default()
    };
    for (i, e) in oracle.examples.iter().enumerate() {
        let sup = e.supervision.as_ref().unwrap();
        let injected = PLAN[i % PLAN.len()];
        match injected {
            Injected::Valid => expected.retained += 1,
            Injected::Defect(r) => *expected.rejected.entry(r).or_default() += 1,
        }
        plan.insert(e.id.clone(), (injected, sup.fix_type, sup.trace.tags.clone()));
    }
    let plan = Arc::new(plan);
    let server = {
        let plan = Arc::clone(&plan);
        StubServer::start(move |req| {
            let id = req
                .prompt
                .strip_prefix("Program ")
                .and_then(|rest| rest.split_whitespace().next())
                .unwrap_or_default();
            match plan.get(id) {
                Some((injected, fix, trace)) => StubResponse::text(&response_for(*injected, *fix, trace)),
                None => StubResponse::status(404),
            }
        })
        .expect("stub server")
    };
    let config = TeacherEndpointConfig {
        url: server.url(),
        retries: 0,
        concurrency: 4,
        ..TeacherEndpointConfig::default()
    };
    let (kept, observed) = supervise_dataset(&raw, &TeacherMode::Llm(config)).expect("llm supervision");
    let label_mismatches = kept
        .examples
        .iter()
        .filter(|e| {
            let sup = e.supervision.as_ref().unwrap();
            let (_, fix, trace) = &plan[&e.id];
            !(sup.valid && sup.source == SupervisionSource::Llm && sup.fix_type == *fix && &sup.trace.tags == trace)
        })
        .count();
    FilterSuite {
        expected,
        observed,
        label_mismatches,
    }
}

/// Fix-type spellings for the validator matrix, with whether each is known.
pub fn fix_type_cases() -> Vec<(String, bool)> {
    let mut out: Vec<(String, bool)> = FixType::ALL.iter().map(|f| (f.name().to_string(), true)).collect();
    for bad in ["", "STYLE_FIX", "wrong_condition", "WRONG CONDITION", "LOOP_BOUND "] {
        out.push((bad.to_string(), false));
    }
    out
}

/// Trace shapes for the validator matrix.
pub fn trace_cases() -> Vec<Vec<String>> {
    let name = |i: usize| ReasoningTag::ALL[i].name().to_string();
    let mut out = vec![Vec::new()];
    for len in 1..=MAX_TRACE_LEN + 2 {
        out.push((0..len).map(name).collect());
        out.push((0..len).rev().map(name).collect());
    }
    out.push(vec![name(0), name(0)]);
    out.push(vec![name(2), name(5), name(2)]);
    out.push(vec!["STYLE_ISSUE".into()]);
    out.push(vec![name(1), "cmp_error".into()]);
    out.push(vec!["STYLE_ISSUE".into(), "STYLE_ISSUE".into()]);
    out.push(vec![name(3); MAX_TRACE_LEN + 1]);
    out.push(vec![name(0), name(1), name(2), name(3), "STYLE_ISSUE".into()]);
    out
}

/// Expected verdict for one matrix cell, derived from the trace invariants
/// independently of the validator.
pub fn expected_verdict(fix_known: bool, trace: &[String]) -> Result<(), RejectReason> {
    let known: Vec<&str> = ReasoningTag::ALL.iter().map(|t| t.name()).collect();
    if !fix_known {
        return Err(RejectReason::UnknownFixType);
    }
    if trace.iter().any(|t| !known.contains(&t.as_str())) {
        return Err(RejectReason::UnknownTag);
    }
    if trace.is_empty() {
        return Err(RejectReason::EmptyTrace);
    }
    let mut seen = std::collections::HashSet::new();
    if !trace.iter().all(|t| seen.insert(t)) {
        return Err(RejectReason::DuplicateTag);
    }
    if trace.len() > MAX_TRACE_LEN {
        return Err(RejectReason::TraceTooLong);
    }
    Ok(())
}

/// Runs the validator over the full matrix. Returns (cells, failures).
pub fn validator_matrix() -> (usize, Vec<String>) {
    let mut cells = 0;
    let mut failures = Vec::new();
    for (fix, known) in fix_type_cases() {
        for trace in trace_cases() {
            cells += 1;
            let raw = RawSupervision {
                fix_type: fix.clone(),
                trace: trace.clone(),
            };
            let got = validate_supervision(&raw, SupervisionSource::Llm).map(|s| {
                let mut sorted = s.trace.tags.clone();
                sorted.sort();
                assert_eq!(sorted, s.trace.tags, "accepted traces are canonical");
            });
            let want = expected_verdict(known, &trace);
            if got != want {
                failures.push(format!("{fix:?} {trace:?}: got {got:?}, want {want:?}"));
            }
        }
    }
    (cells, failures)
}

// ---------------------------------------------------------------------------
// Patch soundness

pub struct RoundTrip {
    pub total: usize,
    pub applied: usize,
    pub reserialized: usize,
}

pub fn json_target_round_trip(ds: &Dataset) -> RoundTrip {
    let mut applied = 0;
    let mut reserialized = 0;
    for e in &ds.examples {
        let t = make_json_target(e).expect("target");
        if apply_patch(&e.buggy_source, &t.patch).ok().as_deref() == Some(e.reference_source.as_str()) {
            applied += 1;
        }
        let json = t.to_json();
        if JsonTarget::from_json(&json).map(|u| u.to_json() == json && u == t).unwrap_or(false) {
            reserialized += 1;
        }
    }
    RoundTrip {
        total: ds.len(),
        applied,
        reserialized,
    }
}
