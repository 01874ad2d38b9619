use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treegate::autodiff::{gradient_check_many, Graph, Tensor, Var};
use treegate::encoder::*;
use treegate::Error;

fn vocab() -> Vocabulary {
    Vocabulary::new([
        "we", "kiss", "a", "duck", "the", "cat", "dog", "sees", "see", "that", "he", "sleeps", "sleep", "big",
    ])
}

fn random_seqs(v: &Vocabulary, rng: &mut ChaCha8Rng, count: usize, lens: std::ops::RangeInclusive<usize>) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(lens.clone());
            let words: Vec<&str> = (0..n).map(|_| v.words()[rng.random_range(0..v.words().len())].as_str()).collect();
            v.encode(&words, 32).unwrap()
        })
        .collect()
}

#[test]
fn encode_wraps_and_pads() {
    let v = vocab();
    let ids = v.encode(&["we", "kiss", "a", "duck"], 10).unwrap();
    assert_eq!(
        ids,
        vec![CLS_ID, v.id("we"), v.id("kiss"), v.id("a"), v.id("duck"), SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    );
    assert_eq!(v.decode(&ids), vec!["we", "kiss", "a", "duck"]);
    let empty: [&str; 0] = [];
    assert!(matches!(v.encode(&empty, 10), Err(Error::EmptyInput(_))));
    assert_eq!(v.encode(&["zebra"], 4).unwrap()[1], UNK_ID);
    let long = v.encode(&["we", "kiss", "a", "duck"], 4).unwrap();
    assert_eq!(long, vec![CLS_ID, v.id("we"), v.id("kiss"), SEP_ID]);
}

#[test]
fn vocabulary_ids_are_dense_and_reserved() {
    let v = vocab();
    for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
        assert_eq!(v.id(s), i);
    }
    for (i, w) in v.words().iter().enumerate() {
        assert_eq!(v.id(w), FIRST_WORD_ID + i);
        assert_eq!(v.token(FIRST_WORD_ID + i), Some(w.as_str()));
    }
}

#[test]
fn masking_is_deterministic_and_skips_specials() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut stream = Vec::new();
    for s in random_seqs(&v, &mut rng, 1000, 3..=12) {
        stream.extend(s);
    }
    let words = stream.iter().filter(|&&id| id >= FIRST_WORD_ID).count();
    let (c1, l1) = mask_for_mlm(&stream, v.len(), 0.15, 9);
    let (c2, l2) = mask_for_mlm(&stream, v.len(), 0.15, 9);
    assert_eq!((&c1, &l1), (&c2, &l2));
    for (i, &id) in stream.iter().enumerate() {
        if id < FIRST_WORD_ID {
            assert_eq!(l1[i], IGNORE_INDEX);
            assert_eq!(c1[i], id);
        } else if l1[i] != IGNORE_INDEX {
            assert_eq!(l1[i], id);
        } else {
            assert_eq!(c1[i], id);
        }
    }
    let selected = l1.iter().filter(|&&l| l != IGNORE_INDEX).count();
    let masked = (0..stream.len()).filter(|&i| l1[i] != IGNORE_INDEX && c1[i] == MASK_ID).count();
    let frac = masked as f64 / selected as f64;
    assert!((frac - 0.8).abs() < 0.05, "{frac}");
    let expected = 0.15 * words as f64;
    let sd = (words as f64 * 0.15 * 0.85).sqrt();
    assert!((selected as f64 - expected).abs() < 4.0 * sd);

    let (_, none) = mask_for_mlm(&stream[..40], v.len(), 1e-12, 3);
    assert!(none.iter().all(|&l| l == IGNORE_INDEX));
}

#[test]
fn masking_rate_on_ten_thousand_words() {
    let ids: Vec<usize> = (0..10_000).map(|i| FIRST_WORD_ID + i % 9).collect();
    let (_, labels) = mask_for_mlm(&ids, FIRST_WORD_ID + 9, 0.15, 2024);
    let selected = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    assert!((1380..=1620).contains(&selected), "{selected}");
}

fn tiny(gate_bypass: bool) -> Encoder {
    let v = vocab();
    let mut cfg = ModelConfig::tiny(v.len());
    cfg.gate_bypass = gate_bypass;
    Encoder::new(cfg, v, 7).unwrap()
}

/// Standard post-LN encoder written directly against the graph, sharing
/// parameter names with [`Encoder`].
fn plain_forward(enc: &Encoder, g: &mut Graph, p: &Bound, batch: &Batch) -> Var {
    let cfg = &enc.config;
    let (b, n, h) = (batch.size, batch.seq_len, cfg.hidden_size);
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());
    let dense = |g: &mut Graph, x: Var, name: &str| {
        let y = g.matmul(x, p.var(&format!("{name}.weight"))).unwrap();
        match p.get(&format!("{name}.bias")) {
            Some(b) => g.add(y, b).unwrap(),
            None => y,
        }
    };
    let norm = |g: &mut Graph, x: Var, name: &str| {
        g.layer_norm(x, p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")), cfg.layer_norm_eps)
            .unwrap()
    };
    let w = g.embedding(p.var("embeddings.word"), &batch.ids, &[b, n]).unwrap();
    let pos: Vec<usize> = (0..n).collect();
    let pe = g.embedding(p.var("embeddings.position"), &pos, &[n]).unwrap();
    let x0 = g.add(w, pe).unwrap();
    let mut x = norm(g, x0, "embeddings.norm");
    let bias: Vec<f64> = batch.ids.iter().map(|&id| if id == PAD_ID { f64::NEG_INFINITY } else { 0.0 }).collect();
    let bias = g.constant(Tensor::new(vec![b, 1, 1, n], bias).unwrap());
    for l in 0..cfg.num_layers {
        let split = |g: &mut Graph, x: Var, part: &str| {
            let t = dense(g, x, &format!("layers.{l}.attention.{part}"));
            let t = g.reshape(t, &[b, n, heads, dh]).unwrap();
            g.permute(t, &[0, 2, 1, 3]).unwrap()
        };
        let (q, k, v) = (split(g, x, "query"), split(g, x, "key"), split(g, x, "value"));
        let kt = g.transpose_last(k).unwrap();
        let s = g.matmul(q, kt).unwrap();
        let s = g.scale(s, 1.0 / h as f64);
        let s = g.add(s, bias).unwrap();
        let probs = g.softmax(s, 3).unwrap();
        let ctx = g.matmul(probs, v).unwrap();
        let ctx = g.permute(ctx, &[0, 2, 1, 3]).unwrap();
        let ctx = g.reshape(ctx, &[b, n, h]).unwrap();
        let attn = dense(g, ctx, &format!("layers.{l}.attention.output"));
        let r = g.add(x, attn).unwrap();
        let x1 = norm(g, r, &format!("layers.{l}.attention.norm"));
        let inner = dense(g, x1, &format!("layers.{l}.ffn.inner"));
        let inner = g.gelu(inner);
        let outer = dense(g, inner, &format!("layers.{l}.ffn.outer"));
        let r = g.add(x1, outer).unwrap();
        x = norm(g, r, &format!("layers.{l}.ffn.norm"));
    }
    x
}

#[test]
fn bypassed_gate_matches_a_plain_encoder_exactly() {
    let enc = tiny(true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Batch::new(&random_seqs(&enc.vocab, &mut rng, 5, 1..=9)).unwrap();
    let got = enc.infer(&batch).unwrap().hidden;
    let mut g = Graph::new();
    let p = enc.params.bind(&mut g, false);
    let want = plain_forward(&enc, &mut g, &p, &batch);
    assert_eq!(got.data(), g.value(want).data());

    // the gated model shares every weight but differs in output
    let gated = tiny(false);
    assert_eq!(gated.params, enc.params);
    assert_ne!(gated.infer(&batch).unwrap().hidden, got);
}

#[test]
fn ladders_grow_with_depth() {
    let enc = tiny(false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs = random_seqs(&enc.vocab, &mut rng, 8, 1..=12);
    let batch = Batch::new(&seqs).unwrap();
    let inf = enc.infer(&batch).unwrap();
    for (ladder, &len) in inf.ladders.iter().zip(&batch.lengths) {
        assert_eq!(ladder.len(), enc.config.num_layers);
        for layer in ladder {
            assert_eq!(layer.len(), len.saturating_sub(1));
            assert!(layer.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        for pair in ladder.windows(2) {
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                assert!(hi >= lo);
            }
        }
    }
}

#[test]
fn single_word_sentence_has_empty_ladder() {
    let enc = tiny(false);
    let ids = enc.vocab.encode(&["duck"], 8).unwrap();
    let inf = enc.infer(&Batch::new(&[ids]).unwrap()).unwrap();
    assert!(inf.ladders[0].iter().all(Vec::is_empty));
    assert!(inf.hidden.is_finite());
}

#[test]
fn out_of_range_ids_are_rejected() {
    let enc = tiny(false);
    let batch = Batch::new(&[vec![CLS_ID, 999, SEP_ID]]).unwrap();
    assert!(matches!(enc.infer(&batch), Err(Error::Vocabulary { id: 999, .. })));
}

#[test]
fn per_example_outputs_ignore_batch_order_and_padding() {
    let enc = tiny(false);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs = random_seqs(&enc.vocab, &mut rng, 6, 2..=10);
    let batch = Batch::new(&seqs).unwrap();
    let base = enc.infer(&batch).unwrap();
    let h = enc.config.hidden_size;
    let n = batch.seq_len;

    let rev: Vec<Vec<usize>> = seqs.iter().rev().cloned().collect();
    let flipped = enc.infer(&Batch::new(&rev).unwrap()).unwrap();
    for i in 0..seqs.len() {
        let j = seqs.len() - 1 - i;
        assert_eq!(base.ladders[i], flipped.ladders[j]);
        let a = &base.hidden.data()[i * n * h..(i + 1) * n * h];
        let b = &flipped.hidden.data()[j * n * h..(j + 1) * n * h];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    for (i, s) in seqs.iter().enumerate() {
        let alone = enc.infer(&Batch::padded_to(std::slice::from_ref(s), 3).unwrap()).unwrap();
        let long = enc.infer(&Batch::padded_to(std::slice::from_ref(s), 30).unwrap()).unwrap();
        let len = batch.lengths[i] + 2;
        for (ladder_a, ladder_b) in alone.ladders[0].iter().zip(&long.ladders[0]) {
            for (x, y) in ladder_a.iter().zip(ladder_b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        let na = alone.hidden.shape()[1];
        for t in 0..len {
            for e in 0..h {
                let x = alone.hidden.data()[t * h + e];
                let y = long.hidden.data()[t * h + e];
                let z = base.hidden.data()[i * n * h + t * h + e];
                assert!((x - y).abs() < 1e-10 && (x - z).abs() < 1e-10, "token {t} of {na}");
            }
        }
    }
}

#[test]
fn untrained_mlm_loss_is_near_uniform() {
    let enc = tiny(false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs = random_seqs(&enc.vocab, &mut rng, 40, 4..=12);
    let batch = Batch::new(&seqs).unwrap();
    let (ids, labels) = mask_for_mlm(&batch.ids, enc.vocab.len(), 0.3, 1);
    let masked = Batch { ids, ..batch };
    let mut g = Graph::new();
    let p = enc.params.bind(&mut g, false);
    let out = enc.forward(&mut g, &p, &masked, None).unwrap();
    let loss = enc.mlm_loss(&mut g, &p, out.hidden, &labels).unwrap();
    let loss = g.value(loss).item().unwrap();
    let uniform = (enc.vocab.len() as f64).ln();
    assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");

    let none = vec![IGNORE_INDEX; labels.len()];
    let zero = enc.mlm_loss(&mut g, &p, out.hidden, &none).unwrap();
    assert_eq!(g.value(zero).item(), Some(0.0));
}

#[test]
fn confident_classifier_has_vanishing_loss() {
    let mut enc = tiny(false);
    enc.params.insert("classifier.weight", Tensor::zeros(&[16, 2]));
    enc.params.insert("classifier.bias", Tensor::from_vec(vec![-20.0, 20.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = Batch::new(&random_seqs(&enc.vocab, &mut rng, 4, 2..=6)).unwrap();
    let mut g = Graph::new();
    let p = enc.params.bind(&mut g, false);
    let out = enc.forward(&mut g, &p, &batch, None).unwrap();
    let logits = enc.classify(&mut g, &p, out.hidden).unwrap();
    assert_eq!(g.shape(logits), &[4, 2]);
    let loss = g.cross_entropy(logits, &[1; 4], IGNORE_INDEX).unwrap();
    assert!(g.value(loss).item().unwrap() <= 1e-6);
}

#[test]
fn untrained_classifier_is_at_chance_on_balanced_data() {
    let enc = tiny(false);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seqs = random_seqs(&enc.vocab, &mut rng, 800, 2..=12);
    let labels: Vec<usize> = (0..800).map(|i| i % 2).collect();
    let mut correct = 0;
    for (chunk, lab) in seqs.chunks(100).zip(labels.chunks(100)) {
        let preds = enc.predict(&Batch::new(chunk).unwrap()).unwrap();
        correct += preds.iter().zip(lab).filter(|((p, _), l)| p == *l).count();
    }
    let acc = correct as f64 / 800.0;
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn full_model_gradient_check() {
    let v = vocab();
    let mut cfg = ModelConfig::tiny(v.len());
    cfg.max_seq_len = 8;
    cfg.init_std = 0.3;
    let enc = Encoder::new(cfg, v, 21).unwrap();
    let seqs = vec![
        enc.vocab.encode(&["we", "kiss", "a", "duck"], 8).unwrap(),
        enc.vocab.encode(&["the", "cat", "sleeps"], 8).unwrap(),
    ];
    let batch = Batch::new(&seqs).unwrap();
    let mut labels = vec![IGNORE_INDEX; batch.ids.len()];
    labels[2] = enc.vocab.id("kiss");
    labels[batch.seq_len + 1] = enc.vocab.id("the");
    let mut ids = batch.ids.clone();
    ids[2] = MASK_ID;
    let masked = Batch { ids, ..batch };
    let report = gradient_check_many(
        |g, vars| {
            let p = enc.params.bind_vars(vars.to_vec())?;
            let out = enc.forward(g, &p, &masked, None)?;
            let mlm = enc.mlm_loss(g, &p, out.hidden, &labels)?;
            let logits = enc.classify(g, &p, out.hidden)?;
            let cls = g.cross_entropy(logits, &[1, 0], IGNORE_INDEX)?;
            g.add(mlm, cls)
        },
        enc.params.tensors(),
        1e-5,
    )
    .unwrap();
    let name = &enc.params.names()[report.worst.0];
    assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let enc = tiny(false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tgck");
    enc.save(&path, serde_json::json!({"step": 3})).unwrap();
    let (back, extra) = Encoder::load(&path).unwrap();
    assert_eq!(back, enc);
    assert_eq!(extra["step"], 3);
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::tiny(30);
    cfg.num_heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ModelConfig::tiny(30);
    cfg.max_seq_len = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(ModelConfig::base(30).validate().is_ok());
    assert!(ModelConfig::preset("huge", 30).is_err());
}
