//! The student classifier: embedding, one ReLU layer, mean pooling over the
//! non-PAD prefix, then a fix-type head (softmax) and a tag head (sigmoid).
//! Both training variants allocate both heads; only the loss differs.

use serde::{Deserialize, Serialize};

use crate::corpus::{FixType, NUM_FIX_TYPES};
use crate::encode::TokenSequence;
use crate::teacher::{ReasoningTag, ReasoningTrace, NUM_TAGS};
use crate::tinylearn::graph::bce_with_logit;
use crate::tinylearn::tensor::{self, Tensor2D};
use crate::tinylearn::{AdamState, Checkpoint, CheckpointError, Gradients, Graph, ParamId, ParamStore, Rng, TensorError, Var};

pub const INIT_SCALE: f64 = 0.05;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LabelOnly,
    ReasoningDistilled,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LabelOnly => "label_only",
            Variant::ReasoningDistilled => "reasoning_distilled",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label_only" => Ok(Variant::LabelOnly),
            "reasoning_distilled" => Ok(Variant::ReasoningDistilled),
            _ => Err(format!("unknown variant `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_fix_types: usize,
    pub num_tags: usize,
    pub max_len: usize,
    pub lambda_reason: f64,
    pub variant: Variant,
    pub threshold: f64,
}

impl StudentConfig {
    pub fn new(vocab_size: usize, variant: Variant) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            num_fix_types: NUM_FIX_TYPES,
            num_tags: NUM_TAGS,
            max_len: crate::encode::DEFAULT_MAX_LEN,
            lambda_reason: 1.0,
            variant,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Weight on the tag loss actually used in training.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::LabelOnly => 0.0,
            Variant::ReasoningDistilled => self.lambda_reason,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embedding: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    fix_w: ParamId,
    fix_b: ParamId,
    tag_w: ParamId,
    tag_b: ParamId,
}

/// Parameter handles of the shared encoder: embedding, dense layer, ReLU,
/// mean pool over the active prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderIds {
    pub embedding: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl EncoderIds {
    /// Pooled `1 × hidden` encoding of `seq`.
    pub fn forward(&self, params: &ParamStore, seq: &TokenSequence) -> Result<Tensor2D, TensorError> {
        let emb = tensor::embedding_lookup(params.get(self.embedding), seq.active())?;
        let h = tensor::relu(&tensor::add_bias(&tensor::matmul(&emb, params.get(self.w))?, params.get(self.b))?);
        let pooled = tensor::mean_pool(&h, seq.attention_len)?;
        pooled.check_finite("forward")?;
        Ok(pooled)
    }

    /// Same computation recorded on `g`.
    pub fn record(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Var {
        let table = g.param(self.embedding);
        let emb = g.embedding(table, seq.active());
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(emb, w);
        let h = g.add_bias(h, b);
        let h = g.relu(h);
        g.mean_pool(h, seq.attention_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fix_probs: Vec<f64>,
    pub tag_probs: Vec<f64>,
    pub predicted_fix: FixType,
    /// Tags with probability strictly above the threshold, in canonical order.
    pub predicted_trace: Vec<ReasoningTag>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl PartialEq for StudentModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// One training example in tensor-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub seq: TokenSequence,
    pub gold: usize,
    pub tags: [f64; NUM_TAGS],
}

impl TrainItem {
    pub fn new(seq: TokenSequence, gold: FixType, trace: &ReasoningTrace) -> Self {
        Self {
            seq,
            gold: gold.index(),
            tags: trace.indicator(),
        }
    }
}

impl StudentModel {
    fn allocate(config: StudentConfig, mut fill: impl FnMut(&str, usize, usize) -> Tensor2D) -> Self {
        let c = &config;
        let mut params = ParamStore::new();
        let mut add = |name: &str, r: usize, cols: usize| {
            let t = fill(name, r, cols);
            params.add(name, t)
        };
        let ids = Ids {
            embedding: add("embedding", c.vocab_size, c.embed_dim),
            enc_w: add("encoder.w", c.embed_dim, c.hidden_dim),
            enc_b: add("encoder.b", 1, c.hidden_dim),
            fix_w: add("fix_head.w", c.hidden_dim, c.num_fix_types),
            fix_b: add("fix_head.b", 1, c.num_fix_types),
            tag_w: add("tag_head.w", c.hidden_dim, c.num_tags),
            tag_b: add("tag_head.b", 1, c.num_tags),
        };
        Self { config, params, ids }
    }

    /// Weights uniform in (−0.05, 0.05), biases zero. The draw order is fixed,
    /// and both variants draw the tag head, so equal seeds give equal inits.
    pub fn init(config: StudentConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self::allocate(config, |name, r, c| {
            if name.ends_with(".b") {
                Tensor2D::zeros(r, c)
            } else {
                let data = (0..r * c)
                    .map(|_| rng.uniform_range(-INIT_SCALE, INIT_SCALE))
                    .collect();
                Tensor2D { rows: r, cols: c, data }
            }
        })
    }

    pub fn zeros(config: StudentConfig) -> Self {
        Self::allocate(config, |_, r, c| Tensor2D::zeros(r, c))
    }

    /// Rebuilds a model from a parameter store laid out as by [`StudentModel::init`].
    pub fn from_params(config: StudentConfig, params: ParamStore) -> Result<Self, TensorError> {
        let template = Self::zeros(config);
        if params.len() != template.params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_params",
                left: (template.params.len(), 1),
                right: (params.len(), 1),
            });
        }
        for id in template.params.ids() {
            let (want, got) = (template.params.get(id), params.get(id));
            if want.shape() != got.shape() || template.params.name(id) != params.name(id) {
                return Err(TensorError::ShapeMismatch {
                    op: "from_params",
                    left: want.shape(),
                    right: got.shape(),
                });
            }
        }
        Ok(Self {
            config: template.config,
            params,
            ids: template.ids,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names of the parameters that only the fix-type path touches.
    pub fn fix_path_params(&self) -> [ParamId; 5] {
        let i = self.ids;
        [i.embedding, i.enc_w, i.enc_b, i.fix_w, i.fix_b]
    }

    pub fn tag_head_params(&self) -> [ParamId; 2] {
        [self.ids.tag_w, self.ids.tag_b]
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<(), TensorError> {
        if seq.ids.len() != self.config.max_len || seq.attention_len > seq.ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: (seq.ids.len(), 1),
                right: (self.config.max_len, 1),
            });
        }
        Ok(())
    }

    pub fn encoder_ids(&self) -> EncoderIds {
        EncoderIds {
            embedding: self.ids.embedding,
            w: self.ids.enc_w,
            b: self.ids.enc_b,
        }
    }

    fn pooled(&self, seq: &TokenSequence) -> Result<Tensor2D, TensorError> {
        self.check_len(seq)?;
        self.encoder_ids().forward(&self.params, seq)
    }

    /// Logits of both heads.
    pub fn logits(&self, seq: &TokenSequence) -> Result<(Tensor2D, Tensor2D), TensorError> {
        let pooled = self.pooled(seq)?;
        let p = &self.params;
        let fix = tensor::add_bias(&tensor::matmul(&pooled, p.get(self.ids.fix_w))?, p.get(self.ids.fix_b))?;
        let tag = tensor::add_bias(&tensor::matmul(&pooled, p.get(self.ids.tag_w))?, p.get(self.ids.tag_b))?;
        fix.check_finite("fix_head")?;
        tag.check_finite("tag_head")?;
        Ok((fix, tag))
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<Prediction, TensorError> {
        let (fix, tag) = self.logits(seq)?;
        let fix_probs = tensor::softmax(&fix).data;
        let tag_probs = tensor::sigmoid(&tag).data;
        let predicted_fix = FixType::from_index(argmax(&fix_probs)).expect("nine classes");
        let predicted_trace = tag_probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > self.config.threshold)
            .filter_map(|(i, _)| ReasoningTag::from_index(i))
            .collect();
        Ok(Prediction {
            fix_probs,
            tag_probs,
            predicted_fix,
            predicted_trace,
        })
    }

    /// Records the per-example loss on `g`. The tag term is added only for
    /// the distilled variant, weighted by `lambda_reason`.
    pub fn record_loss(&self, g: &mut Graph<'_>, item: &TrainItem) -> Result<Var, TensorError> {
        self.check_len(&item.seq)?;
        let pooled = self.encoder_ids().record(g, &item.seq);
        let fw = g.param(self.ids.fix_w);
        let fb = g.param(self.ids.fix_b);
        let fix = g.matmul(pooled, fw);
        let fix = g.add_bias(fix, fb);
        let ce = g.softmax_cross_entropy(fix, &[item.gold]);
        if self.config.variant == Variant::LabelOnly {
            return Ok(ce);
        }
        let tw = g.param(self.ids.tag_w);
        let tb = g.param(self.ids.tag_b);
        let tag = g.matmul(pooled, tw);
        let tag = g.add_bias(tag, tb);
        let bce = g.sigmoid_bce(tag, &item.tags);
        let weighted = g.scale(bce, self.config.lambda_reason);
        Ok(g.add(ce, weighted))
    }

    /// Mean loss over `batch` and its gradients.
    pub fn batch_loss(&self, batch: &[TrainItem]) -> Result<(f64, Gradients), TensorError> {
        let mut g = Graph::new(&self.params);
        let losses = batch
            .iter()
            .map(|item| self.record_loss(&mut g, item))
            .collect::<Result<Vec<_>, _>>()?;
        let total = g.add_all(&losses);
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        g.forward()?;
        let value = g.value(loss)?.data[0];
        Ok((value, g.backward(loss)?))
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(config, &self.params, adam)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let config: StudentConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| CheckpointError::Format(format!("student config: {e}")))?;
        Self::from_params(config, ck.param_store()).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}

/// `−ln fix_probs[gold]`
pub fn loss_label_only(pred: &Prediction, gold: FixType) -> f64 {
    -pred.fix_probs[gold.index()].ln()
}

/// Mean binary cross-entropy of the tag probabilities against the trace's
/// membership indicator.
pub fn reasoning_loss(pred: &Prediction, trace: &ReasoningTrace) -> f64 {
    let y = trace.indicator();
    let total: f64 = pred
        .tag_probs
        .iter()
        .zip(y)
        .map(|(&p, y)| {
            let term = |q: f64| if q == 0.0 { 0.0 } else { -q.ln() };
            // 0·ln 0 is taken as 0 so perfect predictions give exactly 0.
            if y == 1.0 {
                term(p)
            } else if y == 0.0 {
                term(1.0 - p)
            } else {
                y * term(p) + (1.0 - y) * term(1.0 - p)
            }
        })
        .sum();
    total / pred.tag_probs.len() as f64
}

/// Cross-entropy plus `lambda` times the mean tag BCE. With `lambda == 0`
/// this is exactly [`loss_label_only`].
pub fn loss_joint(pred: &Prediction, gold: FixType, trace: &ReasoningTrace, lambda: f64) -> f64 {
    let ce = loss_label_only(pred, gold);
    if lambda == 0.0 {
        return ce;
    }
    ce + lambda * reasoning_loss(pred, trace)
}

/// Joint loss computed from logits; stable for large logits. Used as an
/// independent check against the graph-built loss.
pub fn loss_from_logits(fix_logits: &[f64], tag_logits: &[f64], item: &TrainItem, lambda: f64) -> f64 {
    let ce = tensor::log_sum_exp(fix_logits) - fix_logits[item.gold];
    if lambda == 0.0 {
        return ce;
    }
    let bce: f64 = tag_logits
        .iter()
        .zip(&item.tags)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / tag_logits.len() as f64;
    ce + lambda * bce
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::ReasoningTag::*;

    fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut v = ids.to_vec();
        v.resize(max_len, 0);
        TokenSequence {
            ids: v,
            attention_len: ids.len(),
        }
    }

    fn small(variant: Variant) -> StudentConfig {
        StudentConfig {
            embed_dim: 4,
            hidden_dim: 5,
            max_len: 8,
            ..StudentConfig::new(12, variant)
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = StudentModel::zeros(small(Variant::ReasoningDistilled));
        let p = m.forward(&seq(&[4, 5, 6], 8)).unwrap();
        for v in &p.fix_probs {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
        assert!(p.tag_probs.iter().all(|&v| v == 0.5));
        assert!(p.predicted_trace.is_empty());
        assert_eq!(p.predicted_fix, FixType::ALL[0]);
    }

    #[test]
    fn probabilities_sum_to_one_and_repeat() {
        let m = StudentModel::init(small(Variant::LabelOnly), 3);
        let s = seq(&[3, 9, 11, 2], 8);
        let a = m.forward(&s).unwrap();
        assert!((a.fix_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, m.forward(&s).unwrap());
    }

    #[test]
    fn wrong_length_is_shape_mismatch() {
        let m = StudentModel::init(small(Variant::LabelOnly), 3);
        assert!(matches!(m.forward(&seq(&[3], 7)), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn init_properties() {
        let a = StudentModel::init(small(Variant::LabelOnly), 1);
        let b = StudentModel::init(small(Variant::ReasoningDistilled), 1);
        assert_eq!(a.params, b.params);
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert_ne!(a.params, StudentModel::init(small(Variant::LabelOnly), 2).params);
        for t in a.params.tensors() {
            assert!(t.data.iter().all(|v| v.abs() < INIT_SCALE));
        }
    }

    fn pred(fix: Vec<f64>, tags: Vec<f64>) -> Prediction {
        Prediction {
            fix_probs: fix,
            tag_probs: tags,
            predicted_fix: FixType::ALL[0],
            predicted_trace: vec![],
        }
    }

    #[test]
    fn label_loss_values() {
        let uniform = pred(vec![1.0 / 9.0; 9], vec![0.5; 9]);
        assert!((loss_label_only(&uniform, FixType::ALL[4]) - 9f64.ln()).abs() < 1e-12);
        let mut half = vec![0.0; 9];
        half[2] = 0.5;
        half[3] = 0.5;
        assert!((loss_label_only(&pred(half, vec![0.5; 9]), FixType::ALL[2]) - 2f64.ln()).abs() < 1e-12);
        let mut one = vec![0.0; 9];
        one[1] = 1.0;
        assert_eq!(loss_label_only(&pred(one, vec![0.5; 9]), FixType::ALL[1]), 0.0);
    }

    #[test]
    fn joint_loss_values() {
        let trace = ReasoningTrace::new(vec![CmpError, MissingBranch]).unwrap();
        let uniform = pred(vec![1.0 / 9.0; 9], vec![0.5; 9]);
        let gold = FixType::ALL[0];
        assert_eq!(loss_joint(&uniform, gold, &trace, 0.0), loss_label_only(&uniform, gold));
        let expected = 9f64.ln() + 2.0 * 2f64.ln();
        assert!((loss_joint(&uniform, gold, &trace, 2.0) - expected).abs() < 1e-12);

        let mut fix = vec![0.0; 9];
        fix[0] = 1.0;
        let perfect = pred(fix, trace.indicator().to_vec());
        assert_eq!(loss_joint(&perfect, gold, &trace, 1.0), 0.0);
    }

    #[test]
    fn threshold_excludes_exact_half() {
        let mut m = StudentModel::zeros(small(Variant::ReasoningDistilled));
        let tb = m.ids.tag_b;
        m.params.get_mut(tb).data[3] = 1e-9;
        let p = m.forward(&seq(&[4], 8)).unwrap();
        assert_eq!(p.predicted_trace, [CmpError]);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn graph_loss_matches_pure_path() {
        let trace = ReasoningTrace::new(vec![LoopBoundError, CmpError]).unwrap();
        for variant in [Variant::LabelOnly, Variant::ReasoningDistilled] {
            let m = StudentModel::init(small(variant), 7);
            let item = TrainItem::new(seq(&[5, 6, 7, 3], 8), FixType::ALL[1], &trace);
            let (graph_loss, _) = m.batch_loss(std::slice::from_ref(&item)).unwrap();
            let (f, t) = m.logits(&item.seq).unwrap();
            let pure = loss_from_logits(&f.data, &t.data, &item, m.config.effective_lambda());
            assert!((graph_loss - pure).abs() < 1e-12, "{variant:?}");
            let p = m.forward(&item.seq).unwrap();
            let via_probs = loss_joint(&p, FixType::ALL[1], &trace, m.config.effective_lambda());
            assert!((graph_loss - via_probs).abs() < 1e-12);
        }
    }
}
