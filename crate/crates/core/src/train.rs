//! Optimisation: AdamW, masked-language-model pretraining and fine-tuning
//! for violation classification with delayed early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::encoder::{mask_with_rng, Batch, Encoder, ParamStore, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::grammar::{LabeledSentence, LABEL_VIOLATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Optimizer steps of linear learning-rate warmup; 0 keeps it constant.
    #[serde(default)]
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Epochs that must complete before early stopping may trigger.
    pub early_stop_delay_epochs: usize,
    /// Fraction of word positions selected for masked-language modelling.
    pub mask_rate: f64,
    /// Pack several corpus lines into each pretraining sequence.
    pub pack_sequences: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Published fine-tuning settings.
    pub fn finetune_paper() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            warmup_steps: 0,
            batch_size: 192,
            eval_batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 3,
            early_stop_delay_epochs: 50,
            mask_rate: 0.15,
            pack_sequences: true,
            seed: 0,
        }
    }

    /// Published pretraining settings.
    pub fn pretrain_paper() -> Self {
        Self {
            weight_decay: 0.01,
            max_epochs: 40,
            early_stop_delay_epochs: 0,
            ..Self::finetune_paper()
        }
    }

    /// Fine-tuning that fits a CPU budget. From random initialisation the
    /// loss sits near ln 2 for several epochs before the agreement rule is
    /// picked up, hence the larger step and the delay.
    pub fn finetune_desk() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 30,
            early_stop_delay_epochs: 12,
            ..Self::finetune_paper()
        }
    }

    pub fn pretrain_desk() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            max_epochs: 2,
            ..Self::pretrain_paper()
        }
    }

    pub fn preset(kind: &str, name: &str) -> Result<Self> {
        match (kind, name) {
            ("finetune", "paper") => Ok(Self::finetune_paper()),
            ("finetune", "desk") => Ok(Self::finetune_desk()),
            ("pretrain", "paper") => Ok(Self::pretrain_paper()),
            ("pretrain", "desk") => Ok(Self::pretrain_desk()),
            _ => Err(Error::Config(format!("unknown {kind} preset `{name}` (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return bad("epsilon must be positive; weight_decay and max_grad_norm non-negative");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate must lie in (0, 1)");
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay. Biases and layer-norm parameters are
/// not decayed.
pub struct AdamW {
    pub lr: f64,
    warmup: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            warmup: cfg.warmup_steps as u64,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            decay: params
                .names()
                .iter()
                .map(|n| !(n.ends_with(".bias") || n.ends_with(".gamma") || n.ends_with(".beta")))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> f64 {
        if self.step < self.warmup {
            self.lr * (self.step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let shrink = if self.decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = *w * shrink - lr * update;
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Positive class: contains an agreement violation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_predictions(pred: &[u8], gold: &[u8]) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::Contract(format!("{} predictions for {} labels", pred.len(), gold.len())));
        }
        if gold.is_empty() {
            return Err(Error::EmptyInput("evaluation split"));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == LABEL_VIOLATION, g == LABEL_VIOLATION) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            precision,
            recall,
            f1,
            accuracy: ratio(c.tp + c.tn, gold.len()),
            confusion: c,
        })
    }
}

fn encode_all(model: &Encoder, items: &[LabeledSentence]) -> Result<Vec<Vec<usize>>> {
    items
        .iter()
        .map(|it| model.vocab.encode(&it.words(), model.config.max_seq_len))
        .collect()
}

/// Predicted labels for `items`.
pub fn predict_labels(model: &Encoder, items: &[LabeledSentence], batch_size: usize) -> Result<Vec<u8>> {
    let seqs = encode_all(model, items)?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk)?;
        out.extend(model.predict(&batch)?.into_iter().map(|(c, _)| c as u8));
    }
    Ok(out)
}

pub fn evaluate(model: &Encoder, items: &[LabeledSentence], batch_size: usize) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let pred = predict_labels(model, items, batch_size)?;
    let gold: Vec<u8> = items.iter().map(|i| i.label).collect();
    Metrics::from_predictions(&pred, &gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub eval: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_eval_f1: f64,
    /// Epoch after which training stopped early, if it did.
    pub stopped_early_at: Option<usize>,
}

/// Trains `model` (body and classifier) on `train`, evaluating on `eval`
/// after every epoch. Once `early_stop_delay_epochs` epochs are done,
/// training stops when eval F1 has not improved for `early_stop_patience`
/// epochs. The best-eval weights are restored before returning.
pub fn finetune(
    model: &mut Encoder,
    train: &[LabeledSentence],
    eval: &[LabeledSentence],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let seqs = encode_all(model, train)?;
    let labels: Vec<usize> = train.iter().map(|i| usize::from(i.label)).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4452_4f50);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped = None;
    for epoch in 1..=cfg.max_epochs {
        let start = std::time::Instant::now();
        let batches_of = length_bucketed(&seqs, cfg.batch_size, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in &batches_of {
            let rows: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = Batch::new(&rows)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let l = classification_step(model, &mut opt, cfg, &batch, &targets, &mut dropout_rng)?;
            loss_sum += l;
            batches += 1;
        }
        let metrics = evaluate(model, eval, cfg.eval_batch_size)?;
        let rec = EpochRecord {
            epoch,
            steps: opt.steps(),
            train_loss: loss_sum / batches as f64,
            eval: Some(metrics),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, eval F1 {:.4}, {:.1}s",
            rec.train_loss,
            metrics.f1,
            rec.seconds
        );
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|(f, _, _)| metrics.f1 > *f) {
            best = Some((metrics.f1, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epoch >= cfg.early_stop_delay_epochs && since_best >= cfg.early_stop_patience && epoch < cfg.max_epochs {
            stopped = Some(epoch);
            break;
        }
    }
    let (best_eval_f1, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FinetuneReport {
        history,
        best_epoch,
        best_eval_f1,
        stopped_early_at: stopped,
    })
}

/// Batches of indices into `seqs` for one epoch: a random order is cut into
/// pools of 50 batches, each pool is sorted by length so batches carry
/// little padding, and the batch order is shuffled again.
pub fn length_bucketed<S: AsRef<[usize]>>(seqs: &[S], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(seqs.len().div_ceil(batch_size));
    for pool in order.chunks_mut(batch_size * 50) {
        pool.sort_by_key(|&i| seqs[i].as_ref().len());
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Forward, backward and one optimizer update; returns the batch loss.
fn train_step(
    model: &mut Encoder,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
    loss_of: impl FnOnce(&mut Graph, &Encoder, &crate::encoder::Bound, crate::autodiff::Var) -> Result<crate::autodiff::Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let out = model.forward(&mut g, &p, batch, Some(rng))?;
    let loss = loss_of(&mut g, model, &p, out.hidden)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: opt.steps() as usize + 1,
            loss: value,
        });
    }
    if !g.requires_grad(loss) {
        return Ok(value);
    }
    g.backward(loss)?;
    let mut grads = p.grads(&g);
    let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step: opt.steps() as usize + 1,
            loss: norm,
        });
    }
    opt.update(model.params.tensors_mut(), &grads)?;
    Ok(value)
}

fn classification_step(
    model: &mut Encoder,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    batch: &Batch,
    targets: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    train_step(model, opt, cfg, batch, rng, |g, m, p, hidden| {
        let logits = m.classify(g, p, hidden)?;
        g.cross_entropy(logits, targets, IGNORE_INDEX)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean MLM loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// ln |V|: the loss of uniform predictions.
    pub uniform_baseline: f64,
    pub tokens_per_epoch: usize,
}

/// Groups corpus lines into encoder inputs. With packing, consecutive lines
/// share a sequence while they fit in `max_words`; otherwise each line is
/// its own sequence. Lines longer than `max_words` are truncated.
pub fn pack_lines(lines: &[Vec<String>], max_words: usize, pack: bool) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for l in lines.iter().filter(|l| !l.is_empty()) {
        let l = &l[..l.len().min(max_words)];
        match out.last_mut() {
            Some(cur) if pack && cur.len() + l.len() <= max_words => cur.extend_from_slice(l),
            _ => out.push(l.to_vec()),
        }
    }
    out
}

/// Masked-language-model training on `corpus` (one tokenized line each).
pub fn pretrain(
    model: &mut Encoder,
    corpus: &[Vec<String>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainReport> {
    cfg.validate()?;
    let seqs: Vec<Vec<usize>> = pack_lines(corpus, model.config.max_seq_len - 2, cfg.pack_sequences)
        .iter()
        .map(|s| model.vocab.encode(s, model.config.max_seq_len))
        .collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    let tokens_per_epoch = seqs.iter().map(|s| s.len() - 2).sum();
    let vocab_size = model.vocab.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d41_534b);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4452_4f50);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        step_losses: Vec::new(),
        uniform_baseline: (vocab_size as f64).ln(),
        tokens_per_epoch,
    };
    for epoch in 1..=cfg.max_epochs {
        let start = std::time::Instant::now();
        let (mut sum, mut count) = (0.0, 0);
        for chunk in &length_bucketed(&seqs, cfg.batch_size, &mut shuffle_rng) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut label_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (ids, labels) = mask_with_rng(&seqs[i], vocab_size, cfg.mask_rate, &mut mask_rng);
                inputs.push(ids);
                label_rows.push(labels);
            }
            let batch = Batch::new(&inputs)?;
            let mut labels = Vec::with_capacity(batch.size * batch.seq_len);
            for row in &label_rows {
                labels.extend_from_slice(&row[..row.len().min(batch.seq_len)]);
                labels.resize(labels.len() + batch.seq_len.saturating_sub(row.len()), IGNORE_INDEX);
            }
            let l = train_step(model, &mut opt, cfg, &batch, &mut dropout_rng, |g, m, p, hidden| {
                m.mlm_loss(g, p, hidden, &labels)
            })?;
            report.step_losses.push(l);
            sum += l;
            count += 1;
        }
        let mean = sum / count as f64;
        report.epoch_losses.push(mean);
        let rec = EpochRecord {
            epoch,
            steps: opt.steps(),
            train_loss: mean,
            eval: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: MLM loss {mean:.4}, {:.1}s", rec.seconds);
        on_epoch(&rec);
    }
    Ok(report)
}
