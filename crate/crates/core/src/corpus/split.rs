use super::{CorpusError, Dataset, FixType, Split, NUM_FIX_TYPES};
use crate::tinylearn::rng::Rng;

/// Per-class held-out counts for `counts` and held-out fraction `holdout`.
///
/// Each class gets `floor(count * holdout)`; the remaining units up to
/// `round(total * holdout)` go to the classes with the largest fractional
/// remainders, ties broken by class index.
pub fn validation_quotas(counts: &[usize], holdout: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * holdout).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * holdout).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(assigned);
    for &class in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[class] < counts[class] {
            quotas[class] += 1;
            missing -= 1;
        }
    }
    quotas
}

/// Assigns train/validation splits, stratified by gold fix type.
///
/// `ratio` is the train fraction. Which examples of a class are held out is
/// drawn from a generator seeded with `seed`.
pub fn stratified_split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let counts = dataset.class_counts();
    for (i, &count) in counts.iter().enumerate() {
        if count > 0 && count < 2 {
            return Err(CorpusError::ClassTooSmall {
                fix_type: FixType::ALL[i],
                count,
            });
        }
    }
    let quotas = validation_quotas(&counts, 1.0 - ratio);
    let mut out = dataset.clone();
    let mut rng = Rng::new(seed);
    for (class, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<usize> = out
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.gold_fix_type.index() == class)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut members);
        for (rank, &i) in members.iter().enumerate() {
            out.examples[i].split = Some(if rank < quota {
                Split::Validation
            } else {
                Split::Train
            });
        }
    }
    out.split_ratio = Some(ratio);
    Ok(out)
}

/// Train/validation/test assignment with the given fractions, stratified the
/// same way as [`stratified_split`].
pub fn three_way_split(
    dataset: &Dataset,
    validation: f64,
    test: f64,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    let heldout = validation + test;
    let first = stratified_split(dataset, 1.0 - heldout, seed)?;
    let counts = {
        let mut c = [0usize; NUM_FIX_TYPES];
        for e in first.split_examples(Split::Validation) {
            c[e.gold_fix_type.index()] += 1;
        }
        c
    };
    let quotas = validation_quotas(&counts, test / heldout);
    let mut out = first;
    let mut rng = Rng::new(seed ^ 0x7e57);
    for (class, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<usize> = out
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.gold_fix_type.index() == class && e.split == Some(Split::Validation))
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut members);
        for &i in members.iter().take(quota) {
            out.examples[i].split = Some(Split::Test);
        }
    }
    Ok(out)
}
