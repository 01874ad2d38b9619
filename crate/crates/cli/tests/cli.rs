use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a test run
model.num_layers = 2
model.hidden_size = 16
model.num_heads = 2
model.ffn_size = 32
model.max_seq_len = 32
model.dropout_rate = 0
data.train_size = 40
data.eval_size = 20
data.test_size = 20
data.pretrain_sentences = 120
pretrain.max_epochs = 1
pretrain.batch_size = 16
finetune.max_epochs = 2
finetune.early_stop_delay_epochs = 0
finetune.batch_size = 16
";

fn treegate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treegate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = treegate(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.kv");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_data_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    let stdout = ok(&["gen-data", "--config", &cfg, "--set", "data.seed=3", "--out", s(&out)]);
    assert_eq!(stdout.lines().count(), 9, "{stdout}");
    for setting in ["ID", "GEN", "REC_GEN"] {
        assert_eq!(lines(&out.join(setting).join("train.jsonl")), 40);
        assert_eq!(lines(&out.join(setting).join("eval.jsonl")), 20);
        assert_eq!(lines(&out.join(setting).join("test.jsonl")), 20);
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["data_seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(!manifest["version"].as_str().unwrap().is_empty());
    let kv = std::fs::read_to_string(out.join("config.kv")).unwrap();
    assert!(kv.contains("data.seed = 3"), "{kv}");
    assert!(kv.contains("model.hidden_size = 16"));
    assert_eq!(lines(&out.join("metrics.jsonl")), 9);
}

#[test]
fn same_config_same_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", &cfg, "--setting", "gen", "--out", s(&a)]);
    ok(&["gen-data", "--config", &cfg, "--setting", "gen", "--out", s(&b)]);
    for split in ["train.jsonl", "eval.jsonl", "test.jsonl"] {
        let read = |d: &Path| std::fs::read(d.join("GEN").join(split)).unwrap();
        assert_eq!(read(&a), read(&b));
    }
    assert!(!a.join("ID").exists());
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["gen-data", "--set", "data.no_such_key=1", "--out", s(&out)],
        vec!["gen-data", "--set", "data.train_size=7", "--out", s(&out)],
        vec!["gen-data", "--preset", "huge", "--out", s(&out)],
        vec!["gen-data", "--setting", "nope", "--out", s(&out)],
    ] {
        let o = treegate(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
}

#[test]
fn pretrain_finetune_eval_parse_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--setting", "id", "--out", s(&data)]);

    let pre = dir.path().join("pre");
    let stdout = ok(&["pretrain", "--config", &cfg, "--variant", "tree", "--seed", "2", "--out", s(&pre)]);
    assert!(stdout.contains("layer 1:"), "{stdout}");
    assert!(pre.join("model.ckpt").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pre.join("pretrain_report.json")).unwrap()).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 1);
    let profile: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pre.join("breakpoint_profile.json")).unwrap()).unwrap();
    assert_eq!(profile.as_array().unwrap().len(), 2);

    let ft = dir.path().join("ft");
    let ckpt = pre.join("model.ckpt");
    ok(&[
        "finetune", "--config", &cfg, "--setting", "ID", "--checkpoint", s(&ckpt), "--data", s(&data), "--seed", "2", "--out",
        s(&ft),
    ]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ft.join("test_metrics.json")).unwrap()).unwrap();
    let f1 = m["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let records = std::fs::read_to_string(ft.join("metrics.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);

    let model = ft.join("model.ckpt");
    let test = data.join("ID").join("test.jsonl");
    let eval = ok(&["eval", "--checkpoint", s(&model), "--data", s(&test)]);
    let row: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
    let c = &row["metrics"]["confusion"];
    let total: u64 = ["tp", "fp", "tn", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 20);
    assert_eq!(row["metrics"]["f1"].as_f64().unwrap(), f1);

    let input = dir.path().join("sentences.txt");
    std::fs::write(&input, "the cat walks\n\nthe dogs that he kisses run\n").unwrap();
    let parsed = ok(&["parse", "--checkpoint", s(&model), "--input", s(&input)]);
    let trees: Vec<&str> = parsed.lines().collect();
    assert_eq!(trees.len(), 2);
    for (tree, sentence) in trees.iter().zip(["the cat walks", "the dogs that he kisses run"]) {
        assert_eq!(tree.matches('[').count(), tree.matches(']').count());
        assert_eq!(tree.replace(['[', ']'], " ").split_whitespace().collect::<Vec<_>>().join(" "), sentence);
    }
    let again = ok(&["parse", "--checkpoint", s(&model), "--input", s(&input)]);
    assert_eq!(parsed, again);
    let with_ladder = ok(&["parse", "--checkpoint", s(&model), "--input", s(&input), "--dump-ladder"]);
    assert!(with_ladder.lines().count() > 2);

    let csv = dir.path().join("det.csv");
    let table = ok(&["analyze", "--checkpoint", s(&model), "--pattern", "det", "--n", "30", "--out", s(&csv)]);
    assert!(table.starts_with("row,"), "{table}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), table);
    assert!(csv.with_extension("json").exists());
}

#[test]
fn trials_write_a_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("trials");
    let stdout = ok(&[
        "trials", "--config", &cfg, "--set", "trials.seeds=2", "--set", "trials.settings=ID", "--set", "trials.permutation_resamples=100",
        "--out", s(&out),
    ]);
    assert!(stdout.contains("| model |"), "{stdout}");
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["reports"].as_array().unwrap().len(), 2);
    assert_eq!(results["significance"].as_array().unwrap().len(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2]));
    let events = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(events.lines().filter(|l| l.contains("\"result\"")).count(), 4);
    assert!(out.join("results.csv").exists());
}
