//! Autoregressive JSON decoder: the student's encoder feeds an Elman RNN
//! over a closed output vocabulary. Trained with teacher forcing, decoded
//! greedily with a per-example token mask.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::encode::TokenSequence;
use crate::student::{EncoderIds, StudentConfig, StudentModel, INIT_SCALE};
use crate::tinylearn::tensor::{self, Tensor2D};
use crate::tinylearn::{
    AdamConfig, AdamState, Checkpoint, CheckpointError, Gradients, Graph, ParamId, ParamStore, Rng, TensorError,
};

use super::JsonTarget;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
const SPECIALS: [&str; 2] = ["<bos>", "<eos>"];

/// Fixed pieces of the canonical JSON layout, matched before anything else.
pub const STRUCTURAL: [&str; 4] = [
    "{\"defect_class\":\"",
    "\",\"patch\":\"",
    "\",\"explanation\":\"",
    "\"}",
];

/// Splits JSON text into output tokens whose concatenation is the input:
/// structural pieces, escape sequences, word runs, space runs and single
/// characters.
pub fn output_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let len = if let Some(s) = STRUCTURAL.iter().find(|s| rest.starts_with(**s)) {
            s.len()
        } else if c == '\\' {
            match rest[1..].chars().next() {
                Some('u') => rest.len().min(6),
                Some(n) => 1 + n.len_utf8(),
                None => 1,
            }
        } else if c.is_ascii_alphanumeric() || c == '_' {
            rest.find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .unwrap_or(rest.len())
        } else if c == ' ' {
            rest.find(|ch: char| ch != ' ').unwrap_or(rest.len())
        } else {
            c.len_utf8()
        };
        out.push(rest[..len].to_string());
        rest = &rest[len..];
    }
    out
}

/// Tokens a source file contributes when it appears inside a JSON string.
pub fn source_tokens(source: &str) -> Vec<String> {
    let quoted = serde_json::to_string(source).expect("string serializes");
    output_tokens(&quoted[1..quoted.len() - 1])
}

fn has_letter(t: &str) -> bool {
    t.chars().any(|c| c.is_ascii_alphabetic())
}

/// The closed output vocabulary plus the tokens every example may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputVocab {
    tokens: Vec<String>,
    /// Ids allowed for every example: structure, class names, headers,
    /// explanation words and all letter-free tokens.
    shared: Vec<u32>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl OutputVocab {
    pub fn build(targets: &[JsonTarget]) -> Self {
        let mut all = BTreeSet::new();
        let mut shared = BTreeSet::new();
        for t in targets {
            for tok in output_tokens(&t.to_json()) {
                if !has_letter(&tok) {
                    shared.insert(tok.clone());
                }
                all.insert(tok);
            }
            // Everything outside the hunk body.
            let headers: String = t
                .patch
                .lines()
                .filter(|l| l.starts_with("---") || l.starts_with("+++") || l.starts_with("@@"))
                .map(|l| format!("{l}\n"))
                .collect();
            let skeleton = JsonTarget {
                patch: headers,
                ..t.clone()
            };
            shared.extend(output_tokens(&skeleton.to_json()));
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(all).collect();
        let mut v = Self {
            tokens,
            shared: Vec::new(),
            index: HashMap::new(),
        };
        v.reindex();
        v.shared = shared.iter().filter_map(|t| v.id(t)).collect();
        v.shared.push(EOS);
        v.shared.sort_unstable();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Target ids followed by EOS. None if a token is outside the vocabulary.
    pub fn encode_target(&self, target: &JsonTarget) -> Option<Vec<u32>> {
        let mut ids = output_tokens(&target.to_json())
            .iter()
            .map(|t| self.id(t))
            .collect::<Option<Vec<_>>>()?;
        ids.push(EOS);
        Some(ids)
    }

    /// Mask of ids the decoder may emit for a program: the shared set plus
    /// the program's own tokens.
    pub fn allowed(&self, buggy_source: &str) -> Vec<bool> {
        let mut mask = vec![false; self.size()];
        for &i in &self.shared {
            mask[i as usize] = true;
        }
        for t in source_tokens(buggy_source) {
            if let Some(i) = self.id(&t) {
                mask[i as usize] = true;
            }
        }
        mask[BOS as usize] = false;
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_output_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            max_output_len: 192,
            epochs: 100,
            batch_size: 8,
            lr: 1e-2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DecoderIds {
    encoder: EncoderIds,
    embedding: ParamId,
    w_x: ParamId,
    w_h: ParamId,
    w_c: ParamId,
    b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// One teacher-forced training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderItem {
    pub seq: TokenSequence,
    /// Output ids ending with EOS.
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub encoder_config: StudentConfig,
    pub vocab: OutputVocab,
    pub params: ParamStore,
    ids: DecoderIds,
}

#[derive(Serialize, Deserialize)]
struct DecoderHeader {
    decoder: DecoderConfig,
    encoder: StudentConfig,
    vocab: OutputVocab,
}

impl DecoderModel {
    /// Copies the encoder of `student` and draws the recurrent layers from
    /// `config.seed`.
    pub fn init(student: &StudentModel, vocab: OutputVocab, config: DecoderConfig) -> Self {
        let mut rng = Rng::new(config.seed);
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.uniform_range(-INIT_SCALE, INIT_SCALE)).collect();
            Tensor2D { rows: r, cols: c, data }
        };
        let enc = student.encoder_ids();
        let mut params = ParamStore::new();
        let mut copy = |id: ParamId| params.add(student.params.name(id), student.params.get(id).clone());
        let encoder = EncoderIds {
            embedding: copy(enc.embedding),
            w: copy(enc.w),
            b: copy(enc.b),
        };
        let (v, d, r, h) = (
            vocab.size(),
            config.embed_dim,
            config.hidden_dim,
            student.config.hidden_dim,
        );
        let ids = DecoderIds {
            encoder,
            embedding: params.add("decoder.embedding", draw(v, d)),
            w_x: params.add("decoder.w_x", draw(d, r)),
            w_h: params.add("decoder.w_h", draw(r, r)),
            w_c: params.add("decoder.w_c", draw(h, r)),
            b: params.add("decoder.b", Tensor2D::zeros(1, r)),
            out_w: params.add("decoder.out.w", draw(r, v)),
            out_b: params.add("decoder.out.b", Tensor2D::zeros(1, v)),
        };
        Self {
            config,
            encoder_config: student.config.clone(),
            vocab,
            params,
            ids,
        }
    }

    fn ids_for(params: &ParamStore) -> Result<DecoderIds, CheckpointError> {
        let find = |n: &str| params.find(n).ok_or_else(|| CheckpointError::Format(format!("missing parameter {n}")));
        Ok(DecoderIds {
            encoder: EncoderIds {
                embedding: find("embedding")?,
                w: find("encoder.w")?,
                b: find("encoder.b")?,
            },
            embedding: find("decoder.embedding")?,
            w_x: find("decoder.w_x")?,
            w_h: find("decoder.w_h")?,
            w_c: find("decoder.w_c")?,
            b: find("decoder.b")?,
            out_w: find("decoder.out.w")?,
            out_b: find("decoder.out.b")?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = DecoderHeader {
            decoder: self.config,
            encoder: self.encoder_config.clone(),
            vocab: self.vocab.clone(),
        };
        Checkpoint::new(serde_json::to_value(header).expect("header serializes"), &self.params, None)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut header: DecoderHeader = serde_json::from_value(ck.config.clone())
            .map_err(|e| CheckpointError::Format(format!("decoder header: {e}")))?;
        header.vocab.reindex();
        let params = ck.param_store();
        let ids = Self::ids_for(&params)?;
        if params.get(ids.out_b).cols != header.vocab.size() {
            return Err(CheckpointError::Format("output layer does not match vocabulary".into()));
        }
        Ok(Self {
            config: header.decoder,
            encoder_config: header.encoder,
            vocab: header.vocab,
            params,
            ids,
        })
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<(), TensorError> {
        if seq.ids.len() != self.encoder_config.max_len || seq.attention_len > seq.ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "decoder",
                left: (seq.ids.len(), 1),
                right: (self.encoder_config.max_len, 1),
            });
        }
        Ok(())
    }

    /// Mean per-token cross-entropy of one item under teacher forcing,
    /// recorded on `g`.
    fn record_loss(&self, g: &mut Graph<'_>, item: &DecoderItem) -> Result<crate::tinylearn::Var, TensorError> {
        self.check_len(&item.seq)?;
        let ids = self.ids;
        let pooled = ids.encoder.record(g, &item.seq);
        let w_c = g.param(ids.w_c);
        let context = g.matmul(pooled, w_c);
        let (table, w_x, w_h, b, out_w, out_b) = (
            g.param(ids.embedding),
            g.param(ids.w_x),
            g.param(ids.w_h),
            g.param(ids.b),
            g.param(ids.out_w),
            g.param(ids.out_b),
        );
        let mut h = None;
        let mut prev = BOS;
        let mut losses = Vec::with_capacity(item.target.len());
        for &next in &item.target {
            let x = g.embedding(table, &[prev]);
            let a = g.matmul(x, w_x);
            let mut a = g.add(a, context);
            if let Some(h) = h {
                let r = g.matmul(h, w_h);
                a = g.add(a, r);
            }
            let a = g.add_bias(a, b);
            let state = g.tanh(a);
            let logits = g.matmul(state, out_w);
            let logits = g.add_bias(logits, out_b);
            losses.push(g.softmax_cross_entropy(logits, &[next as usize]));
            h = Some(state);
            prev = next;
        }
        let total = g.add_all(&losses);
        Ok(g.scale(total, 1.0 / losses.len().max(1) as f64))
    }

    /// Mean loss over `batch` and its gradients.
    pub fn batch_loss(&self, batch: &[DecoderItem]) -> Result<(f64, Gradients), TensorError> {
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

    fn context(&self, seq: &TokenSequence) -> Result<Tensor2D, TensorError> {
        self.check_len(seq)?;
        let pooled = self.ids.encoder.forward(&self.params, seq)?;
        tensor::matmul(&pooled, self.params.get(self.ids.w_c))
    }

    fn step(&self, context: &Tensor2D, h: &Tensor2D, prev: u32) -> Result<(Tensor2D, Tensor2D), TensorError> {
        let p = &self.params;
        let x = tensor::embedding_lookup(p.get(self.ids.embedding), &[prev])?;
        let mut a = tensor::add(&tensor::matmul(&x, p.get(self.ids.w_x))?, context)?;
        a = tensor::add(&a, &tensor::matmul(h, p.get(self.ids.w_h))?)?;
        let state = tensor::add_bias(&a, p.get(self.ids.b))?.map(f64::tanh);
        let logits = tensor::add_bias(&tensor::matmul(&state, p.get(self.ids.out_w))?, p.get(self.ids.out_b))?;
        logits.check_finite("decoder")?;
        Ok((state, logits))
    }

    /// Output distribution of the first step, for inspection.
    pub fn first_step_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>, TensorError> {
        let context = self.context(seq)?;
        let h = Tensor2D::zeros(1, self.config.hidden_dim);
        let (_, logits) = self.step(&context, &h, BOS)?;
        Ok(tensor::softmax(&logits).data)
    }

    /// Teacher-forced mean cross-entropy without building a graph.
    pub fn item_loss(&self, item: &DecoderItem) -> Result<f64, TensorError> {
        let context = self.context(&item.seq)?;
        let mut h = Tensor2D::zeros(1, self.config.hidden_dim);
        let mut prev = BOS;
        let mut total = 0.0;
        for &next in &item.target {
            let (state, logits) = self.step(&context, &h, prev)?;
            total += tensor::log_sum_exp(&logits.data) - logits.data[next as usize];
            h = state;
            prev = next;
        }
        Ok(total / item.target.len().max(1) as f64)
    }

    /// Greedy decoding restricted to `allowed` ids; stops at EOS or after
    /// `max_output_len` tokens. Ties go to the smallest id.
    pub fn decode(&self, seq: &TokenSequence, allowed: &[bool]) -> Result<String, TensorError> {
        let context = self.context(seq)?;
        let mut h = Tensor2D::zeros(1, self.config.hidden_dim);
        let mut prev = BOS;
        let mut out = String::new();
        for _ in 0..self.config.max_output_len {
            let (state, logits) = self.step(&context, &h, prev)?;
            let mut best: Option<(usize, f64)> = None;
            for (i, &z) in logits.data.iter().enumerate() {
                if allowed.get(i).copied().unwrap_or(false) && best.is_none_or(|(_, bz)| z > bz) {
                    best = Some((i, z));
                }
            }
            let Some((next, _)) = best else { break };
            let next = next as u32;
            if next == EOS {
                break;
            }
            out.push_str(self.vocab.token(next));
            h = state;
            prev = next;
        }
        Ok(out)
    }
}

/// Teacher-forced training with Adam; returns the mean training loss of
/// each epoch.
pub fn train_decoder(model: &mut DecoderModel, items: &[DecoderItem]) -> Result<Vec<f64>, TensorError> {
    let config = model.config;
    if items.is_empty() || config.batch_size == 0 {
        return Ok(Vec::new());
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = Rng::new(config.seed ^ 0x5eed_dec0);
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let order = rng.permutation(items.len());
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DecoderItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grads) = model.batch_loss(&batch)?;
            adam.step(&mut model.params, &grads)?;
            sum += loss * batch.len() as f64;
        }
        losses.push(sum / items.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FixType;
    use crate::student::Variant;

    fn target(class: FixType, patch: &str) -> JsonTarget {
        JsonTarget {
            defect_class: class,
            patch: patch.to_string(),
            explanation: "a short note".into(),
        }
    }

    #[test]
    fn tokens_concatenate_back() {
        let t = target(FixType::LoopBound, "@@ -2 +2 @@\n-  i <= n;\n+  i < n;\n");
        let json = t.to_json();
        let toks = output_tokens(&json);
        assert_eq!(toks.concat(), json);
        assert_eq!(toks[0], STRUCTURAL[0]);
        assert_eq!(toks[1], "LOOP_BOUND");
        assert!(toks.contains(&"\\n".to_string()));
        assert_eq!(output_tokens("\\u00e9x"), ["\\u00e9", "x"]);
    }

    #[test]
    fn masks_limit_words_to_the_program() {
        let a = target(FixType::LoopBound, "@@ -1 +1 @@\n-alpha\n+beta\n");
        let v = OutputVocab::build(std::slice::from_ref(&a));
        assert_eq!(v.encode_target(&a).unwrap().last(), Some(&EOS));
        let mask = v.allowed("beta\n");
        let id = |t: &str| v.id(t).unwrap() as usize;
        assert!(mask[id("beta")]);
        assert!(!mask[id("alpha")]);
        assert!(mask[id("LOOP_BOUND")] && mask[id("note")] && mask[EOS as usize]);
        assert!(!mask[BOS as usize]);
    }

    fn toy() -> (DecoderModel, Vec<DecoderItem>) {
        let targets: Vec<JsonTarget> = (0..10)
            .map(|i| target(FixType::from_index(i % 9).unwrap(), &format!("@@ -{i} +{i} @@\n-x\n+y\n")))
            .collect();
        let vocab = OutputVocab::build(&targets);
        let mut sc = StudentConfig::new(12, Variant::ReasoningDistilled);
        sc.max_len = 6;
        let student = StudentModel::init(sc, 3);
        let items = targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut ids = vec![3 + (i as u32 % 9), 3, 4];
                let attention_len = ids.len();
                ids.resize(6, 0);
                DecoderItem {
                    seq: TokenSequence { ids, attention_len },
                    target: vocab.encode_target(t).unwrap(),
                }
            })
            .collect();
        let config = DecoderConfig {
            epochs: 30,
            batch_size: 4,
            lr: 0.05,
            embed_dim: 8,
            hidden_dim: 16,
            ..DecoderConfig::default()
        };
        (DecoderModel::init(&student, vocab, config), items)
    }

    #[test]
    fn untrained_is_near_uniform() {
        let (m, items) = toy();
        let probs = m.first_step_probs(&items[0].seq).unwrap();
        let v = probs.len() as f64;
        assert!(probs.iter().all(|&p| (p - 1.0 / v).abs() < 0.2 / v), "{probs:?}");
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let (m, items) = toy();
        let (graph, _) = m.batch_loss(&items[..3]).unwrap();
        let direct: f64 = items[..3].iter().map(|i| m.item_loss(i).unwrap()).sum::<f64>() / 3.0;
        assert!((graph - direct).abs() < 1e-12, "{graph} vs {direct}");
    }

    #[test]
    fn toy_loss_halves_and_is_deterministic() {
        let (mut a, items) = toy();
        let mut b = a.clone();
        let la = train_decoder(&mut a, &items).unwrap();
        let lb = train_decoder(&mut b, &items).unwrap();
        assert!(la[la.len() - 1] < 0.5 * la[0], "{la:?}");
        assert_eq!(la, lb);
        assert_eq!(a.to_checkpoint().to_json(), b.to_checkpoint().to_json());
        let back = DecoderModel::from_checkpoint(&Checkpoint::from_json(&a.to_checkpoint().to_json()).unwrap()).unwrap();
        assert_eq!(back, a);
        let mask = vec![true; a.vocab.size()];
        assert_eq!(a.decode(&items[0].seq, &mask).unwrap(), back.decode(&items[0].seq, &mask).unwrap());
    }
}
