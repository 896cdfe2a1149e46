mod support;

use std::time::{Duration, Instant};

use symdistill::metrics::{EvalOptions, EvalRecord, MacroAverage, TraceMatch};
use symdistill::student::Variant;
use symdistill::tinylearn::Rng;
use symdistill::{FixType, ReasoningTag};

#[test]
fn label_only_gradients_match_central_differences() {
    let start = Instant::now();
    let r = support::gradcheck(Variant::LabelOnly, 10, 11);
    assert!(r.max_rel_err < 1e-4, "max relative error {}", r.max_rel_err);
    assert!(r.coordinates > 1000);
    assert!(start.elapsed() < Duration::from_secs(30));
}

#[test]
fn joint_gradients_match_central_differences() {
    let start = Instant::now();
    let r = support::gradcheck(Variant::ReasoningDistilled, 10, 12);
    assert!(r.max_rel_err < 1e-4, "max relative error {}", r.max_rel_err);
    assert!(start.elapsed() < Duration::from_secs(30));
}

#[test]
fn metrics_agree_with_brute_force_recount() {
    let bad = support::metric_oracle(20, 2024);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn recount_covers_degenerate_instances() {
    use FixType::*;
    let rec = |g: FixType, p: FixType, gt: &[ReasoningTag], pt: &[ReasoningTag]| EvalRecord {
        gold_fix: g,
        pred_fix: p,
        gold_trace: gt.to_vec(),
        pred_trace: Some(pt.to_vec()),
    };
    let cases = vec![
        // Single example, empty traces on both sides.
        vec![rec(LoopBound, LoopBound, &[], &[])],
        // Every prediction wrong.
        vec![
            rec(LoopBound, WrongReturn, &[ReasoningTag::LoopBoundError], &[]),
            rec(IoFormat, InitError, &[ReasoningTag::IoError], &[ReasoningTag::InitUnset]),
        ],
        // Same set, different order.
        vec![rec(
            WrongCondition,
            WrongCondition,
            &[ReasoningTag::CmpError, ReasoningTag::MissingBranch],
            &[ReasoningTag::MissingBranch, ReasoningTag::CmpError],
        )],
    ];
    for records in cases {
        for macro_average in [MacroAverage::AllClasses, MacroAverage::PresentOnly] {
            for trace_match in [TraceMatch::Ordered, TraceMatch::Set] {
                let options = EvalOptions {
                    macro_average,
                    trace_match,
                };
                let bad = support::recount_mismatches(&records, options);
                assert!(bad.is_empty(), "{bad:?} for {records:?}");
            }
        }
    }
}

#[test]
fn random_instances_stay_small() {
    let mut rng = Rng::new(5);
    for _ in 0..200 {
        let n = support::random_records(&mut rng, 30).len();
        assert!((1..=30).contains(&n));
    }
}
