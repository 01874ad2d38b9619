//! Fixtures shared by the benchmarks.

use treegate::encoder::{Batch, Encoder, ModelConfig, Vocabulary};
use treegate::grammar::{sample, Grammar, SampleOptions};

/// `n` grammar samples encoded for `model`, in one padded batch.
pub fn sentence_batch(model: &Encoder, grammar: &Grammar, n: usize) -> Batch {
    let seqs: Vec<Vec<usize>> = (0..n as u64)
        .map(|s| {
            let words = sample(grammar, s, &SampleOptions::default()).expect("sample").realize();
            model.vocab.encode(&words, model.config.max_seq_len).expect("encode")
        })
        .collect();
    Batch::new(&seqs).expect("batch")
}

pub fn desk_model(grammar: &Grammar, gated: bool) -> Encoder {
    let mut cfg = ModelConfig::desk(0);
    cfg.gate_bypass = !gated;
    Encoder::new(cfg, Vocabulary::new(grammar.surface_vocabulary()), 7).expect("model")
}
