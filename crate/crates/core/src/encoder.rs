//! BERT-style encoder whose self-attention is gated by a constituent prior.
//!
//! Post-LN transformer layers with learned absolute positions, a masked-LM
//! head tied to the word embeddings and a `[CLS]`-pooled affine classifier.
//! Parameters live in a [`ParamStore`] and are bound onto a fresh
//! [`Graph`] for every forward pass.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, Tensor, Var};
use crate::constituent::{
    gated_attention, graph_compose_layers, graph_constituent_prior, graph_link_probs, graph_link_scores,
    graph_merge_probs, ContentGate, MergePairing,
};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
/// First id assigned to an ordinary word.
pub const FIRST_WORD_ID: usize = 5;
/// Label value skipped by the MLM loss.
pub const IGNORE_INDEX: usize = usize::MAX;

pub const SPECIAL_TOKENS: [&str; FIRST_WORD_ID] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Divisor applied to dot products in attention and link scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// Divide both attention logits and link scores by `hidden_size`.
    #[default]
    Linear,
    /// Divide attention logits by `sqrt(head_dim)` and link scores by `sqrt(hidden_size)`.
    Sqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub attention_scale_mode: AttentionScale,
    pub tie_link_weights_across_layers: bool,
    pub gate_bypass: bool,
    #[serde(default)]
    pub merge_pairing: MergePairing,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// 4 layers, hidden 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            num_heads: 4,
            ffn_size: 512,
            max_seq_len: 128,
            vocab_size,
            dropout_rate: 0.1,
            attention_scale_mode: AttentionScale::Linear,
            tie_link_weights_across_layers: false,
            gate_bypass: false,
            merge_pairing: MergePairing::Adjacent,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    /// BERT-Base dimensions.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            max_seq_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    /// 2 layers, hidden 16; for tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            max_seq_len: 32,
            dropout_rate: 0.0,
            ..Self::desk(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_size)),
            "base" => Ok(Self::base(vocab_size)),
            "tiny" => Ok(Self::tiny(vocab_size)),
            other => Err(Error::Config(format!("unknown model preset `{other}` (desk, base, tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 || self.ffn_size == 0 {
            return bad("layer count and sizes must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if self.vocab_size <= FIRST_WORD_ID {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    fn attention_divisor(&self) -> f64 {
        match self.attention_scale_mode {
            AttentionScale::Linear => self.hidden_size as f64,
            AttentionScale::Sqrt => (self.head_dim() as f64).sqrt(),
        }
    }

    fn link_divisor(&self) -> f64 {
        match self.attention_scale_mode {
            AttentionScale::Linear => self.hidden_size as f64,
            AttentionScale::Sqrt => (self.hidden_size as f64).sqrt(),
        }
    }
}

/// Word-level vocabulary with five reserved ids:
/// `[PAD]`=0, `[UNK]`=1, `[CLS]`=2, `[SEP]`=3, `[MASK]`=4. Words follow densely.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in first-seen order; duplicates and
    /// reserved spellings are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS.iter().copied().map(str::to_string).chain(words.into_iter().map(|w| w.as_ref().to_string())) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ordinary words, in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[FIRST_WORD_ID..]
    }

    /// `[CLS] w… [SEP]`, then `[PAD]` up to `max_seq_len`. Longer inputs lose
    /// their tail words; `[SEP]` is always kept.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_seq_len: usize) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token list"));
        }
        if max_seq_len < 3 {
            return Err(Error::Config(format!("max_seq_len {max_seq_len} cannot hold a word")));
        }
        let keep = tokens.len().min(max_seq_len - 2);
        let mut ids = Vec::with_capacity(max_seq_len);
        ids.push(CLS_ID);
        ids.extend(tokens[..keep].iter().map(|t| self.id(t.as_ref())));
        ids.push(SEP_ID);
        ids.resize(max_seq_len, PAD_ID);
        Ok(ids)
    }

    /// Content tokens of an encoded sequence (everything between `[CLS]` and `[SEP]`).
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .skip_while(|&&id| id == CLS_ID)
            .take_while(|&&id| id != SEP_ID && id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

/// BERT-style masking. Each word position is selected with probability
/// `mask_rate`; selected positions become `[MASK]` (80%), a random word (10%)
/// or stay unchanged (10%). Labels hold the original id at selected
/// positions and [`IGNORE_INDEX`] elsewhere. Special tokens are never selected.
pub fn mask_for_mlm(ids: &[usize], vocab_size: usize, mask_rate: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_with_rng(ids, vocab_size, mask_rate, &mut rng)
}

pub fn mask_with_rng<R: Rng + ?Sized>(ids: &[usize], vocab_size: usize, mask_rate: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut corrupted = ids.to_vec();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if id < FIRST_WORD_ID || !rng.random_bool(mask_rate) {
            continue;
        }
        labels[i] = id;
        let r: f64 = rng.random();
        if r < 0.8 {
            corrupted[i] = MASK_ID;
        } else if r < 0.9 {
            corrupted[i] = rng.random_range(FIRST_WORD_ID..vocab_size);
        }
    }
    (corrupted, labels)
}

/// A rectangular batch of encoded sequences, padded to the longest member.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[size, seq_len]`.
    pub ids: Vec<usize>,
    pub size: usize,
    pub seq_len: usize,
    /// Number of words in each sequence (excluding `[CLS]`/`[SEP]`).
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Each input must start with `[CLS]` and contain a `[SEP]`; trailing
    /// `[PAD]`s are dropped before re-padding to the batch maximum.
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        Self::padded_to(seqs, 0)
    }

    /// As [`Batch::new`] but padded to at least `min_len` positions.
    pub fn padded_to<S: AsRef<[usize]>>(seqs: &[S], min_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let mut trimmed = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            let sep = s.iter().position(|&id| id == SEP_ID);
            match (s.first(), sep) {
                (Some(&CLS_ID), Some(sep)) => {
                    trimmed.push(&s[..=sep]);
                    lengths.push(sep - 1);
                }
                _ => return Err(Error::Contract("encoded sequence must be [CLS] … [SEP]".into())),
            }
        }
        let seq_len = trimmed.iter().map(|s| s.len()).max().unwrap_or(0).max(min_len);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in &trimmed {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + seq_len - s.len(), PAD_ID);
        }
        Ok(Self {
            ids,
            size: seqs.len(),
            seq_len,
            lengths,
        })
    }

    fn is_content(&self, b: usize, i: usize) -> bool {
        i >= 1 && i <= self.lengths[b]
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    /// Wraps handles the caller already placed on a graph, in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(Error::Contract(format!("{} handles for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Parameter handles on one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))]
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; `None` for parameters the loss does not reach.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect()
    }
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, N, H]` final hidden states.
    pub hidden: Var,
    /// One `[B, N-1]` merge-probability tensor per layer (empty when `N < 2`).
    pub ladder: Vec<Var>,
}

/// Plain values returned by [`Encoder::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[B, N, H]`.
    pub hidden: Tensor,
    /// Per sequence, per layer: merge probabilities between adjacent words
    /// (length = words − 1).
    pub ladders: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocabulary: Vec<String>,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Encoder {
    /// Weights ~ N(0, init_std²), biases 0, layer-norm gains 1. Link
    /// projections are drawn even when the gate is bypassed, so two
    /// configurations that differ only in `gate_bypass` share every weight.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f, v, p, std) = (
            config.hidden_size,
            config.ffn_size,
            config.vocab_size,
            config.max_seq_len,
            config.init_std,
        );
        let mut ps = ParamStore::default();
        let dense = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            ps.insert(format!("{name}.weight"), Tensor::randn(&[i, o], std, rng));
            ps.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        let norm = |ps: &mut ParamStore, name: &str| {
            ps.insert(format!("{name}.gamma"), Tensor::ones(&[h]));
            ps.insert(format!("{name}.beta"), Tensor::zeros(&[h]));
        };
        ps.insert("embeddings.word", Tensor::randn(&[v, h], std, &mut rng));
        ps.insert("embeddings.position", Tensor::randn(&[p, h], std, &mut rng));
        norm(&mut ps, "embeddings.norm");
        for l in 0..config.num_layers {
            let pre = format!("layers.{l}");
            for part in ["query", "key", "value", "output"] {
                if part == "key" {
                    // a key bias adds the same amount to every logit in a softmax row
                    ps.insert(format!("{pre}.attention.key.weight"), Tensor::randn(&[h, h], std, &mut rng));
                } else {
                    dense(&mut ps, &mut rng, &format!("{pre}.attention.{part}"), h, h);
                }
            }
            norm(&mut ps, &format!("{pre}.attention.norm"));
            dense(&mut ps, &mut rng, &format!("{pre}.ffn.inner"), h, f);
            dense(&mut ps, &mut rng, &format!("{pre}.ffn.outer"), f, h);
            norm(&mut ps, &format!("{pre}.ffn.norm"));
            if !config.tie_link_weights_across_layers || l == 0 {
                let link = link_prefix(&config, l);
                dense(&mut ps, &mut rng, &format!("{link}.query"), h, h);
                // no key bias: it shifts both of a token's link scores equally
                ps.insert(format!("{link}.key.weight"), Tensor::randn(&[h, h], std, &mut rng));
            }
        }
        dense(&mut ps, &mut rng, "mlm.dense", h, h);
        norm(&mut ps, "mlm.norm");
        ps.insert("mlm.bias", Tensor::zeros(&[v]));
        dense(&mut ps, &mut rng, "classifier", h, 2);
        Ok(Self {
            config,
            vocab,
            params: ps,
        })
    }

    /// Redraws the classification head from `seed`, leaving the body as is.
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.config.hidden_size;
        self.params.insert("classifier.weight", Tensor::randn(&[h, 2], self.config.init_std, &mut rng));
        self.params.insert("classifier.bias", Tensor::zeros(&[2]));
    }

    /// Runs the encoder on `batch`. Dropout is applied only when `dropout`
    /// carries a generator.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (b, n, h) = (batch.size, batch.seq_len, cfg.hidden_size);
        if n > cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "batch length {n} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let rate = if dropout.is_some() { cfg.dropout_rate } else { 0.0 };

        let words = g.embedding(p.var("embeddings.word"), &batch.ids, &[b, n])?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(p.var("embeddings.position"), &positions, &[n])?;
        let x = g.add(words, pos)?;
        let x = self.norm(g, p, x, "embeddings.norm")?;
        let mut x = apply_dropout(g, x, rate, dropout.as_deref_mut())?;

        let mut pad_bias = vec![0.0; b * n];
        let mut blocked = vec![0.0; b * n.saturating_sub(1)];
        let mut content = vec![vec![false; n]; b];
        for bi in 0..b {
            for i in 0..n {
                content[bi][i] = batch.is_content(bi, i);
                if batch.ids[bi * n + i] == PAD_ID {
                    pad_bias[bi * n + i] = f64::NEG_INFINITY;
                }
            }
            for k in 0..n.saturating_sub(1) {
                if !(content[bi][k] && content[bi][k + 1]) {
                    blocked[bi * (n - 1) + k] = f64::NEG_INFINITY;
                }
            }
        }
        let pad_bias = g.constant(Tensor::new(vec![b, 1, 1, n], pad_bias)?);
        let links_possible = n >= 2;
        let blocked = if links_possible {
            Some(g.constant(Tensor::new(vec![b, n - 1], blocked)?))
        } else {
            None
        };
        let gate_masks = if cfg.gate_bypass { None } else { Some(ContentGate::new(g, &content)?) };

        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        let mut ladder = Vec::with_capacity(cfg.num_layers);
        let mut prev: Option<Var> = None;
        for l in 0..cfg.num_layers {
            let pre = format!("layers.{l}");
            let mut gate = None;
            if let Some(blocked) = blocked {
                let link = link_prefix(cfg, l);
                let lq = self.dense(g, p, x, &format!("{link}.query"))?;
                let lk = self.dense(g, p, x, &format!("{link}.key"))?;
                let (right, left) = graph_link_scores(g, lq, lk, blocked, cfg.link_divisor())?;
                let probs = graph_link_probs(g, right, left)?;
                let fresh = graph_merge_probs(g, probs, cfg.merge_pairing)?;
                let a = graph_compose_layers(g, fresh, prev)?;
                prev = Some(a);
                ladder.push(a);
                if let Some(masks) = &gate_masks {
                    let prior = graph_constituent_prior(g, a)?;
                    gate = Some(masks.apply(g, prior)?);
                }
            }

            let split = |g: &mut Graph, name: &str| -> Result<Var> {
                let t = self.dense(g, p, x, &format!("{pre}.attention.{name}"))?;
                let t = g.reshape(t, &[b, n, heads, dh])?;
                g.permute(t, &[0, 2, 1, 3])
            };
            let q = split(g, "query")?;
            let k = split(g, "key")?;
            let v = split(g, "value")?;
            let (ctx, _) = gated_attention(g, q, k, v, gate, pad_bias, cfg.attention_divisor())?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, n, h])?;
            let attn = self.dense(g, p, ctx, &format!("{pre}.attention.output"))?;
            let attn = apply_dropout(g, attn, rate, dropout.as_deref_mut())?;
            let res = g.add(x, attn)?;
            let x1 = self.norm(g, p, res, &format!("{pre}.attention.norm"))?;

            let inner = self.dense(g, p, x1, &format!("{pre}.ffn.inner"))?;
            let inner = g.gelu(inner);
            let outer = self.dense(g, p, inner, &format!("{pre}.ffn.outer"))?;
            let outer = apply_dropout(g, outer, rate, dropout.as_deref_mut())?;
            let res = g.add(x1, outer)?;
            x = self.norm(g, p, res, &format!("{pre}.ffn.norm"))?;
        }
        Ok(ForwardOutput { hidden: x, ladder })
    }

    /// Mean cross-entropy of the MLM head over positions whose label is not
    /// [`IGNORE_INDEX`]. Returns a constant 0 (and logs a warning) when every
    /// label is ignored.
    pub fn mlm_loss(&self, g: &mut Graph, p: &Bound, hidden: Var, labels: &[usize]) -> Result<Var> {
        let shape = g.shape(hidden).to_vec();
        let (b, n, h) = (shape[0], shape[1], shape[2]);
        if labels.len() != b * n {
            return Err(Error::Shape {
                op: "mlm_loss",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
        if rows.is_empty() {
            log::warn!("MLM batch has no selected positions; loss defined as 0");
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let targets: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let flat = g.reshape(hidden, &[b * n, h])?;
        let picked = g.embedding(flat, &rows, &[rows.len()])?;
        let t = self.dense(g, p, picked, "mlm.dense")?;
        let t = g.gelu(t);
        let t = self.norm(g, p, t, "mlm.norm")?;
        let decoder = g.transpose_last(p.var("embeddings.word"))?;
        let logits = g.matmul(t, decoder)?;
        let logits = g.add(logits, p.var("mlm.bias"))?;
        g.cross_entropy(logits, &targets, IGNORE_INDEX)
    }

    /// `[B, 2]` logits from the `[CLS]` state; class 1 means "contains an
    /// agreement violation".
    pub fn classify(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<Var> {
        let shape = g.shape(hidden).to_vec();
        let (b, n, h) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(hidden, &[b * n, h])?;
        let rows: Vec<usize> = (0..b).map(|i| i * n).collect();
        let cls = g.embedding(flat, &rows, &[b])?;
        self.dense(g, p, cls, "classifier")
    }

    /// Forward pass without gradients or dropout.
    pub fn infer(&self, batch: &Batch) -> Result<Inference> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch, None)?;
        let ladders = content_ladders(&g, &out, batch);
        Ok(Inference {
            hidden: g.value(out.hidden).clone(),
            ladders,
        })
    }

    /// Predicted class per sequence and the class-1 probability.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<(usize, f64)>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch, None)?;
        let logits = self.classify(&mut g, &p, out.hidden)?;
        let l = g.value(logits).data();
        Ok(l
            .chunks_exact(2)
            .map(|z| {
                let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
                (usize::from(z[1] > z[0]), p1)
            })
            .collect())
    }

    fn dense(&self, g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, p.var(&format!("{name}.weight")))?;
        match p.get(&format!("{name}.bias")) {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
        g.layer_norm(
            x,
            p.var(&format!("{name}.gamma")),
            p.var(&format!("{name}.beta")),
            self.config.layer_norm_eps,
        )
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocabulary: self.vocab.words().to_vec(),
            extra,
        };
        Ok(Checkpoint {
            metadata: serde_json::to_string(&meta)?,
            tensors: self
                .params
                .names()
                .iter()
                .cloned()
                .zip(self.params.tensors().iter().cloned())
                .collect(),
        })
    }

    /// Rebuilds an encoder and returns the free-form `extra` metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)?;
        let vocab = Vocabulary::new(&meta.vocabulary);
        let mut enc = Self::new(meta.config, vocab, 0)?;
        for (name, t) in &ck.tensors {
            match enc.params.get(name) {
                Some(old) if old.shape() == t.shape() => enc.params.insert(name.clone(), t.clone()),
                Some(old) => {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        old.shape()
                    )))
                }
                None => return Err(Error::Format(format!("unexpected tensor `{name}`"))),
            }
        }
        if ck.tensors.len() != enc.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model needs {}",
                ck.tensors.len(),
                enc.params.len()
            )));
        }
        Ok((enc, meta.extra))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn link_prefix(cfg: &ModelConfig, layer: usize) -> String {
    if cfg.tie_link_weights_across_layers {
        "link".to_string()
    } else {
        format!("layers.{layer}.link")
    }
}

fn apply_dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask = (0..n).map(|_| if rng.random_bool(rate) { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

/// Word-to-word merge probabilities per sequence and layer, read off a
/// forward pass.
pub fn content_ladders(g: &Graph, out: &ForwardOutput, batch: &Batch) -> Vec<Vec<Vec<f64>>> {
    let m = batch.seq_len.saturating_sub(1);
    (0..batch.size)
        .map(|bi| {
            let len = batch.lengths[bi];
            out.ladder
                .iter()
                .map(|&a| {
                    let row = &g.value(a).data()[bi * m..(bi + 1) * m];
                    // pair k joins words k and k+1, i.e. positions k+1 and k+2
                    if len < 2 {
                        Vec::new()
                    } else {
                        row[1..len].to_vec()
                    }
                })
                .collect()
        })
        .collect()
}
