//! Acceptance checks, one test per criterion. Each prints its sub-checks and
//! a single `criterion N ...: PASS|FAIL` line; run with `--nocapture` to see
//! them.
//!
//! The training-trend criterion reads `artifacts/desk-trials/results.json`
//! (written by `treegate trials --preset desk`); set
//! `TREEGATE_ACCEPTANCE_FULL=1` to rerun those trials here instead.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treegate::agreement::*;
use treegate::analysis::*;
use treegate::autodiff::{gradient_check_many, Graph, Tensor, Var};
use treegate::constituent::*;
use treegate::encoder::*;
use treegate::experiment::{prepare, run_trials, ExperimentConfig, ResultsTable, Variant};
use treegate::grammar::*;
use treegate::stats::binomial_test;
use treegate::tree::{extract, extract_with_splits, ParseTree};

struct Criterion {
    name: &'static str,
    checks: Vec<(String, bool)>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        let what = what.into();
        println!("  [{}] {what}", if ok { "ok" } else { "FAILED" });
        self.checks.push((what, ok));
    }

    /// Reported but not gated.
    fn note(&mut self, what: impl Into<String>) {
        let what = what.into();
        println!("  [soft] {what}");
        self.notes.push(what);
    }

    fn finish(self) {
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        println!("{}: {verdict} ({}/{} checks)", self.name, self.checks.len() - failed.len(), self.checks.len());
        assert!(failed.is_empty(), "{} failed: {failed:#?}", self.name);
    }
}

fn artifacts() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts")
}

// ---------------------------------------------------------------- mechanism

fn random_weights(d: usize, rng: &mut ChaCha8Rng) -> LinkWeights {
    LinkWeights {
        query: Tensor::randn(&[d, d], 1.0, rng),
        query_bias: Tensor::randn(&[d], 0.1, rng),
        key: Tensor::randn(&[d, d], 1.0, rng),
        key_bias: Tensor::randn(&[d], 0.1, rng),
    }
}

/// Largest violation of the layer invariants over three stacked layers of
/// one random configuration.
fn invariant_violation(rng: &mut ChaCha8Rng) -> f64 {
    const TOL: f64 = 1e-10;
    let n = rng.random_range(2..24);
    let d = rng.random_range(1..9);
    let cut = rng.random_range(1..=n);
    let blocked: Vec<bool> = (0..n).map(|i| i >= cut).collect();
    let mut worst: f64 = 0.0;
    let mut bad = |x: f64| worst = worst.max(x);
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..3 {
        let h = Tensor::randn(&[n, d], 1.0, rng);
        let scores = link_scores(&h, &random_weights(d, rng), &blocked, (d as f64).sqrt()).unwrap();
        let (pr, pl) = link_probs(&scores);
        for i in 1..n - 1 {
            if !blocked[i - 1] && !blocked[i] && !blocked[i + 1] {
                bad((pr[i] + pl[i - 1] - 1.0).abs());
            }
        }
        let fresh = merge_probs(&pr, &pl, MergePairing::Adjacent);
        let a = match &prev {
            Some(p) => compose_layers(&fresh, p),
            None => fresh.clone(),
        };
        for k in 0..n - 1 {
            for x in [fresh[k], a[k]] {
                if !(0.0..=1.0).contains(&x) {
                    bad(1.0);
                }
            }
            if let Some(p) = &prev {
                bad((p[k] - a[k]).max(0.0));
            }
        }
        let c = constituent_prior(&a);
        for i in 0..n {
            bad((c.at(&[i, i]) - 1.0).abs());
            for j in 0..n {
                bad((c.at(&[i, j]) - c.at(&[j, i])).abs());
            }
            if i + 1 < n {
                bad((c.at(&[i, i + 1]) - a[i]).abs());
            }
            for j in i..n {
                for k in j..n {
                    bad((c.at(&[i, k]) - c.at(&[i, j]) * c.at(&[j, k])).abs());
                }
            }
        }
        prev = Some(a);
    }
    if worst <= TOL {
        0.0
    } else {
        worst
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::new([
        "we", "kiss", "a", "duck", "the", "cat", "dog", "sees", "see", "that", "he", "sleeps", "sleep", "big",
    ])
}

/// Post-LN encoder written directly against the graph, sharing parameter
/// names with [`Encoder`].
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
fn criterion_1_mechanism() {
    let mut c = Criterion::new("criterion 1 mechanism correctness");

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_000);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let v = invariant_violation(&mut rng);
        if v > 0.0 {
            failures += 1;
            worst = worst.max(v);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("layer invariants on 10000 random configurations: {failures} failures (worst {worst:e})"), failures == 0);
    c.check(format!("invariant suite runtime {secs:.1}s < 60s"), secs < 60.0);

    let start = Instant::now();
    let v = vocab();
    let mut cfg = ModelConfig::tiny(v.len());
    cfg.max_seq_len = 8;
    cfg.init_std = 0.3;
    assert_eq!(cfg.num_layers, 2);
    assert!(!cfg.gate_bypass);
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
    let secs = start.elapsed().as_secs_f64();
    c.check(
        format!(
            "gradient check, 2-layer gated encoder, {} scalars: max relative error {:.2e} < 1e-4",
            enc.params.num_scalars(),
            report.max_relative_error
        ),
        report.max_relative_error < 1e-4,
    );
    c.check(format!("gradient check runtime {secs:.1}s < 300s"), secs < 300.0);

    let build = |bypass: bool| {
        let v = vocab();
        let mut cfg = ModelConfig::tiny(v.len());
        cfg.gate_bypass = bypass;
        Encoder::new(cfg, v, 7).unwrap()
    };
    let (plain, gated) = (build(true), build(false));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<Vec<usize>> = (0..6)
        .map(|_| {
            let n = rng.random_range(1..=9);
            let words: Vec<&str> = (0..n).map(|_| plain.vocab.words()[rng.random_range(0..14)].as_str()).collect();
            plain.vocab.encode(&words, 32).unwrap()
        })
        .collect();
    let batch = Batch::new(&seqs).unwrap();
    let got = plain.infer(&batch).unwrap().hidden;
    let mut g = Graph::new();
    let p = plain.params.bind(&mut g, false);
    let want = plain_forward(&plain, &mut g, &p, &batch);
    c.check("gate bypass equals a plain encoder bit for bit", got.data() == g.value(want).data());
    c.check("same seed gives identical parameters with and without the gate", plain.params == gated.params);
    c.finish();
}

// --------------------------------------------------------------------- data

#[test]
fn criterion_2_data() {
    let mut c = Criterion::new("criterion 2 data pipeline oracles");
    let g = Grammar::builtin();
    let sampler = Sampler::new(&g, SampleOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let (mut clean_ok, mut corrupt_ok, mut errors) = (0, 0, 0);
    for _ in 0..10_000 {
        let d = sampler.sample(&mut rng).unwrap();
        match hierarchical_valid(&LabeledSentence::valid(&d, &g).annotations) {
            Ok(true) => clean_ok += 1,
            Ok(false) => {}
            Err(_) => errors += 1,
        }
        match hierarchical_valid(&corrupt_with(&d, &g, &mut rng).annotations) {
            Ok(false) => corrupt_ok += 1,
            Ok(true) => {}
            Err(_) => errors += 1,
        }
    }
    c.check(format!("{clean_ok}/10000 clean samples are hierarchically valid"), clean_ok == 10_000);
    c.check(format!("{corrupt_ok}/10000 corrupted samples are hierarchically invalid"), corrupt_ok == 10_000);
    c.check(format!("{errors} oracle exceptions"), errors == 0);

    let seed = ExperimentConfig::desk().data.seed;
    let mut depth = std::collections::BTreeMap::new();
    for setting in Setting::ALL {
        let spec = SettingSpec::new(setting, &g).unwrap();
        let ds = build_dataset(&g, &spec, seed).unwrap();
        let sizes: Vec<usize> = ds.splits.iter().map(|s| s.items.len()).collect();
        let balanced = ds
            .splits
            .iter()
            .all(|s| s.items.iter().filter(|i| i.label == LABEL_VIOLATION).count() * 2 == s.items.len());
        c.check(format!("{setting} sizes {sizes:?} exactly balanced"), sizes == [2400, 800, 800] && balanced);
        for s in &ds.splits {
            let hier = Oracle::Hierarchical.accuracy(&s.items).unwrap();
            let lin = Oracle::Linear.accuracy(&s.items).unwrap();
            if s.name == "test" && setting != Setting::Id {
                c.check(format!("{setting} test audit: linear oracle {lin}, hierarchical oracle {hier}"), lin == 0.0 && hier == 1.0);
            } else {
                c.check(format!("{setting} {} labels follow the hierarchical rule ({hier})", s.name), hier == 1.0);
            }
            depth.insert((setting, s.name.clone()), s.stats.depth_mean);
        }
    }
    let at = |s: Setting, split: &str| depth[&(s, split.to_string())];
    let id = at(Setting::Id, "train");
    c.check(format!("ID train mean depth {id:.3} within 0.2 ± 0.1"), (id - 0.2).abs() <= 0.1);
    let gen = at(Setting::Gen, "test");
    c.check(format!("GEN test mean depth {gen:.3} within 0.9 ± 0.3"), (gen - 0.9).abs() <= 0.3);
    let rec = at(Setting::RecGen, "test");
    c.check(format!("REC_GEN test mean depth {rec:.3} within 8.5 ± 1.5"), (rec - 8.5).abs() <= 1.5);
    c.finish();
}

// ------------------------------------------------------------------ training

fn desk_results() -> Result<ResultsTable, String> {
    if std::env::var("TREEGATE_ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
        let cfg = ExperimentConfig::desk();
        let prep = prepare(&cfg, &cfg.trials.settings, false).map_err(|e| e.to_string())?;
        return run_trials(&cfg, &prep, &|_| {}).map_err(|e| e.to_string());
    }
    let path = artifacts().join("desk-trials/results.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

#[test]
fn criterion_3_training_trends() {
    let mut c = Criterion::new("criterion 3 desk-scale training trends");
    let table = match desk_results() {
        Ok(t) => t,
        Err(e) => {
            c.check(format!("desk trial results available ({e})"), false);
            return c.finish();
        }
    };
    let cfg = ExperimentConfig::desk();
    c.check("results come from the current desk configuration", table.config_hash == cfg.hash());
    c.check(
        format!(
            "model is {} layers, hidden {}, {} heads",
            cfg.model.num_layers, cfg.model.hidden_size, cfg.model.num_heads
        ),
        (cfg.model.num_layers, cfg.model.hidden_size, cfg.model.num_heads) == (4, 128, 4),
    );
    let consistent = table.reports.iter().flat_map(|r| &r.trials).all(|t| {
        let m = &t.metrics;
        let f1 = if m.precision + m.recall > 0.0 { 2.0 * m.precision * m.recall / (m.precision + m.recall) } else { 0.0 };
        (m.f1 - f1).abs() <= 1e-9
    });
    c.check("every reported F1 equals 2PR/(P+R)", consistent);
    for variant in [Variant::Plain, Variant::Tree] {
        let f1 = |s: Setting| table.report(s, variant).map(|r| (r.f1.mean, r.trials.len()));
        let (Some((id, n_id)), Some((gen, n_gen)), Some((rec, n_rec))) = (f1(Setting::Id), f1(Setting::Gen), f1(Setting::RecGen)) else {
            c.check(format!("{variant}: reports for all three settings"), false);
            continue;
        };
        c.check(format!("{variant}: 5 seeds per setting ({n_id}, {n_gen}, {n_rec})"), [n_id, n_gen, n_rec] == [5, 5, 5]);
        c.check(format!("{variant}: ID test F1 {id:.4} >= 0.90"), id >= 0.90);
        c.check(format!("{variant}: F1 ordering ID {id:.4} > GEN {gen:.4} > REC_GEN {rec:.4}"), id > gen && gen > rec);
        c.check(format!("{variant}: GEN {gen:.4} and REC_GEN {rec:.4} below 0.85"), gen < 0.85 && rec < 0.85);
    }
    for setting in Setting::ALL {
        match table.p_value(setting, Variant::Tree, Variant::Plain) {
            Some(p) => c.check(format!("{setting}: tree vs plain permutation p = {p:.4}"), (0.0..=1.0).contains(&p)),
            None => c.check(format!("{setting}: tree vs plain p-value reported"), false),
        }
    }
    c.finish();
}

// ------------------------------------------------------------------ analysis

fn tree(text: &str) -> ParseTree {
    ParseTree::parse_bracketed(text).unwrap().0
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn enumerated(k: u64, n: u64, p: f64) -> f64 {
    let pmf = |i: u64| choose(n, i) * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    let obs = pmf(k);
    (0..=n).map(pmf).filter(|&x| x <= obs * (1.0 + 1e-7)).sum::<f64>().min(1.0)
}

#[test]
fn criterion_4_structure_analysis() {
    let mut c = Criterion::new("criterion 4 structure analysis");

    let path = artifacts().join("desk-pretrain/breakpoint_profile.json");
    match std::fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str::<Vec<LayerProfile>>(&t).ok()) {
        Some(profile) => {
            for p in profile.iter().filter(|p| p.layer <= 3) {
                let within = (p.mean - p.geometric).abs() <= 0.10;
                c.note(format!(
                    "pretrained desk model layer {}: mean merge probability {:.3} vs {:.3} ({})",
                    p.layer,
                    p.mean,
                    p.geometric,
                    if within { "within 0.10" } else { "outside 0.10" }
                ));
            }
        }
        None => c.note(format!("no breakpoint profile at {}", path.display())),
    }

    let det = [
        ("[[the dogs] run]", Verdict::DetN),
        ("[the [dogs run]]", Verdict::NVp),
        ("[the dogs run]", Verdict::Other),
        ("[[the dogs] [kiss [the cat]]]", Verdict::DetN),
        ("[the [dogs [kiss [the cat]]]]", Verdict::NVp),
        ("[[the [dogs kiss]] [the cat]]", Verdict::NVp),
    ];
    let hits = det.iter().filter(|(t, v)| classify_det_merge(&tree(t), 0, 1, 2).unwrap() == *v).count();
    c.check(format!("determiner merge fixtures {hits}/{}", det.len()), hits == det.len());
    let adj = [
        ("[[[the big] dog] runs]", Verdict::DetAdj),
        ("[[the [big dog]] runs]", Verdict::AdjN),
        ("[[the big dog] runs]", Verdict::Other),
        ("[the [[big dog] runs]]", Verdict::AdjN),
        ("[the [big [dog runs]]]", Verdict::Other),
    ];
    let hits = adj.iter().filter(|(t, v)| classify_adj_merge(&tree(t), 0, 1, 2).unwrap() == *v).count();
    c.check(format!("adjective merge fixtures {hits}/{}", adj.len()), hits == adj.len());

    let mut worst: f64 = 0.0;
    for n in 0..=20u64 {
        for k in 0..=n {
            for p in [0.5, 0.3, 0.9] {
                worst = worst.max((binomial_test(k, n, p).unwrap() - enumerated(k, n, p)).abs());
            }
        }
    }
    c.check(format!("binomial p-values match enumeration for n <= 20 (max error {worst:.1e})"), worst < 1e-10);

    let g = Grammar::builtin();
    let lex = Lexicon::from_grammar(&g).unwrap();
    let mut cfg = ModelConfig::desk(0);
    cfg.num_layers = 3;
    let model = Encoder::new(cfg, Vocabulary::new(g.surface_vocabulary()), 3).unwrap();
    for pattern in [Pattern::Det, Pattern::Adj, Pattern::Rel] {
        let t = run_survey(&model, &lex, pattern, 60, 1, 0.8).unwrap();
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        let csv = t.to_csv();
        let header = format!("row,{},{},other,total,p_value", t.columns[0], t.columns[1]);
        let rows_ok = t.rows.iter().all(|r| {
            let small = r.counts[0] + r.counts[1];
            r.counts[0] + r.counts[1] + r.other == r.total
                && (small > 20 || (r.p_value - enumerated(r.counts[0] as u64, small as u64, 0.5)).abs() < 1e-10)
        });
        c.check(
            format!("{pattern:?} survey: 4 rows {labels:?}, columns {:?}", t.columns),
            labels == ROW_LABELS && t.columns == pattern.columns().map(String::from) && csv.starts_with(&header) && rows_ok,
        );
    }
    c.finish();
}

// --------------------------------------------------------------------- trees

fn random_tree(rng: &mut ChaCha8Rng, start: usize, len: usize) -> ParseTree {
    if len == 1 {
        return ParseTree::Leaf(start);
    }
    let parts = rng.random_range(2..=len.min(4));
    let mut cuts: Vec<usize> = (1..len).collect();
    for i in 0..parts - 1 {
        let j = rng.random_range(i..cuts.len());
        cuts.swap(i, j);
    }
    cuts.truncate(parts - 1);
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(len);
    ParseTree::Node(bounds.windows(2).map(|w| random_tree(rng, start + w[0], w[1] - w[0])).collect())
}

fn random_ladder(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(2..24);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        let fresh: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>()).collect();
        let next = match out.last() {
            Some(prev) => compose_layers(&fresh, prev),
            None => fresh,
        };
        out.push(next);
    }
    out
}

#[test]
fn criterion_5_tree_extraction() {
    let mut c = Criterion::new("criterion 5 tree extraction");
    let mut rng = ChaCha8Rng::seed_from_u64(1_000);
    let mut round_trips = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=30);
        let t = random_tree(&mut rng, 0, n);
        let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let text = t.to_bracketed(&tokens).unwrap();
        if ParseTree::parse_bracketed(&text).ok() == Some((t, tokens)) {
            round_trips += 1;
        }
    }
    c.check(format!("bracketing round trip on {round_trips}/1000 random trees"), round_trips == 1000);

    let (mut same, mut monotone) = (0, 0);
    for _ in 0..1000 {
        let ladder = random_ladder(&mut rng);
        let (lo, hi) = {
            let (a, b) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            if a <= b { (a, b) } else { (b, a) }
        };
        if extract(&ladder, lo).unwrap() == extract(&ladder, lo).unwrap() {
            same += 1;
        }
        if extract_with_splits(&ladder, lo).unwrap().1.len() <= extract_with_splits(&ladder, hi).unwrap().1.len() {
            monotone += 1;
        }
    }
    c.check(format!("extraction deterministic on {same}/1000 ladders"), same == 1000);
    c.check(format!("split count non-decreasing in the threshold on {monotone}/1000 ladders"), monotone == 1000);

    let v = vocab();
    let model = Encoder::new(ModelConfig::tiny(v.len()), v, 9).unwrap();
    let ids = model.vocab.encode(&["the", "cat", "that", "we", "see", "sleeps"], 32).unwrap();
    let batch = Batch::new(&[ids]).unwrap();
    let (a, b) = (model.infer(&batch).unwrap(), model.infer(&batch).unwrap());
    c.check("model ladders and trees are reproducible", a.ladders == b.ladders && extract(&a.ladders[0], 0.8).unwrap() == extract(&b.ladders[0], 0.8).unwrap());

    let t = extract(&[vec![0.9, 0.1, 0.9]], 0.8).unwrap();
    let text = t.to_bracketed(&["we", "kiss", "a", "duck"]).unwrap();
    c.check(format!("four-token worked example gives {text}"), text == "[[we kiss] [a duck]]");
    c.finish();
}
