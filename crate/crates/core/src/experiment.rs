//! Multi-seed experiments: key-value configuration, run directories,
//! pretrain/fine-tune trials over model variants and settings, and the
//! results table with permutation-test significance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agreement::{build_dataset, Dataset, Setting, SettingSpec};
use crate::encoder::{Encoder, ModelConfig, Vocabulary, FIRST_WORD_ID};
use crate::error::{Error, Result};
use crate::grammar::{sample, Grammar, LabeledSentence, SampleOptions};
use crate::stats::{mean, permutation_test, std_dev};
use crate::train::{evaluate, finetune, pretrain, EpochRecord, Metrics, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "tree")]
    Tree,
    #[serde(rename = "plain+pretrain")]
    PlainPretrain,
    #[serde(rename = "tree+pretrain")]
    TreePretrain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Tree, Variant::PlainPretrain, Variant::TreePretrain];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Tree => "tree",
            Variant::PlainPretrain => "plain+pretrain",
            Variant::TreePretrain => "tree+pretrain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (plain, tree, plain+pretrain, tree+pretrain)")))
    }

    /// Constituent attention active.
    pub fn gated(self) -> bool {
        matches!(self, Variant::Tree | Variant::TreePretrain)
    }

    pub fn pretrained(self) -> bool {
        matches!(self, Variant::PlainPretrain | Variant::TreePretrain)
    }

    /// The same variant with the attention gate toggled.
    pub fn counterpart(self) -> Self {
        match self {
            Variant::Plain => Variant::Tree,
            Variant::Tree => Variant::Plain,
            Variant::PlainPretrain => Variant::TreePretrain,
            Variant::TreePretrain => Variant::PlainPretrain,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Seed of every generated dataset and corpus; fixed across trials.
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub test_size: usize,
    /// PCFG sentences in the pretraining corpus.
    pub pretrain_sentences: usize,
    /// Optional extra pretraining text, one sentence per line.
    pub pretrain_text: Option<String>,
    /// Grammar file; the built-in grammar when unset.
    pub grammar: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialsConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub variants: Vec<Variant>,
    pub settings: Vec<Setting>,
    /// Worker threads; each trains one model at a time.
    pub jobs: usize,
    /// Relabellings for the permutation test beyond the exact range.
    pub permutation_resamples: usize,
}

impl TrialsConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub data: DataConfig,
    pub trials: TrialsConfig,
}

impl ExperimentConfig {
    /// Small model and budgets that run on a CPU.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(0),
            pretrain: TrainConfig::pretrain_desk(),
            finetune: TrainConfig::finetune_desk(),
            data: DataConfig {
                seed: 0,
                train_size: 2400,
                eval_size: 800,
                test_size: 800,
                pretrain_sentences: 20_000,
                pretrain_text: None,
                grammar: None,
            },
            trials: TrialsConfig {
                seeds: 5,
                first_seed: 1,
                variants: vec![Variant::Plain, Variant::Tree],
                settings: Setting::ALL.to_vec(),
                jobs: 1,
                permutation_resamples: 10_000,
            },
        }
    }

    /// Published model size and optimisation settings.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::base(0);
        c.pretrain = TrainConfig::pretrain_paper();
        c.finetune = TrainConfig::finetune_paper();
        c.trials.seeds = 10;
        c.trials.variants = Variant::ALL.to_vec();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown experiment preset `{name}` (desk, paper)"))),
        }
    }

    /// Sets one dotted key, e.g. `finetune.learning_rate` or
    /// `trials.variants`. Lists take comma-separated items.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_all(&[(key, value)])
    }

    /// Applies every assignment, then validates the result once.
    pub fn set_all(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        for &(key, value) in pairs {
            assign(&mut root, key, value)?;
        }
        let updated: Self = serde_json::from_value(root).map_err(|e| Error::Config(format!("bad value: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        self.set_all(&pairs)
    }

    /// Every leaf as a sorted `key = value` line; [`apply_kv`] reads it back.
    ///
    /// [`apply_kv`]: ExperimentConfig::apply_kv
    pub fn to_kv(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            // filled in from the grammar's vocabulary later
            model.vocab_size = FIRST_WORD_ID + 1;
        }
        model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let t = &self.trials;
        if t.seeds == 0 || t.jobs == 0 {
            return Err(Error::Config("trials.seeds and trials.jobs must be positive".into()));
        }
        if t.variants.is_empty() || t.settings.is_empty() {
            return Err(Error::Config("trials need at least one variant and one setting".into()));
        }
        for size in [self.data.train_size, self.data.eval_size, self.data.test_size] {
            if size == 0 || size % 2 != 0 {
                return Err(Error::Config(format!("split size {size} must be even and positive")));
            }
        }
        Ok(())
    }

    pub fn grammar(&self) -> Result<Grammar> {
        match &self.data.grammar {
            Some(path) => Grammar::parse(&fs::read_to_string(path)?),
            None => Ok(Grammar::builtin()),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.data.train_size, self.data.eval_size, self.data.test_size)
    }
}

fn assign(root: &mut Value, key: &str, value: &str) -> Result<()> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    *slot = match slot {
        Value::Object(_) => return Err(Error::Config(format!("`{key}` is a section, not a value"))),
        Value::Array(_) => Value::Array(
            value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(scalar)
                .collect(),
        ),
        Value::String(_) => Value::String(value.trim().to_string()),
        _ => scalar(value.trim()),
    };
    Ok(())
}

fn scalar(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(o) => {
            for (k, x) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(plain).collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        _ => {
            out.insert(prefix.to_string(), plain(v));
        }
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Version string in the style of `git describe`, falling back to the
/// crate version outside a repository.
pub fn describe_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub command: Vec<String>,
}

/// Directory holding every artifact of one run: `manifest.json`,
/// `config.kv`, `metrics.jsonl` and whatever the command writes.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    metrics: PathBuf,
}

impl RunDir {
    pub fn create(path: impl AsRef<Path>, cfg: &ExperimentConfig, seeds: &[u64], command: &[String]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        fs::create_dir_all(&path)?;
        let manifest = Manifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            version: describe_version(),
            config_hash: cfg.hash(),
            seeds: seeds.to_vec(),
            data_seed: cfg.data.seed,
            command: command.to_vec(),
        };
        fs::write(path.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(path.join("config.kv"), cfg.to_kv())?;
        let metrics = path.join("metrics.jsonl");
        File::create(&metrics)?;
        Ok(Self { path, metrics })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one JSON record to `metrics.jsonl`.
    pub fn log(&self, record: &Value) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.metrics)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        fs::write(self.file(name), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
}

/// Datasets and pretraining corpus shared by every trial.
pub struct Prepared {
    pub grammar: Grammar,
    pub datasets: BTreeMap<Setting, Dataset>,
    pub corpus: Vec<Vec<String>>,
}

impl Prepared {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.grammar.surface_vocabulary())
    }
}

/// Builds the datasets for `settings` and, when `with_corpus`, the
/// pretraining corpus.
pub fn prepare(cfg: &ExperimentConfig, settings: &[Setting], with_corpus: bool) -> Result<Prepared> {
    let grammar = cfg.grammar()?;
    let mut datasets = BTreeMap::new();
    for &s in settings {
        let spec = SettingSpec::with_sizes(s, &grammar, cfg.sizes())?;
        let ds = build_dataset(&grammar, &spec, cfg.data.seed)?;
        log::info!("built {} dataset: {:?}", s, ds.splits.iter().map(|x| x.items.len()).collect::<Vec<_>>());
        datasets.insert(s, ds);
    }
    let corpus = if with_corpus { pretraining_corpus(cfg, &grammar)? } else { Vec::new() };
    Ok(Prepared {
        grammar,
        datasets,
        corpus,
    })
}

/// PCFG sentences followed by the lines of the optional text file.
pub fn pretraining_corpus(cfg: &ExperimentConfig, grammar: &Grammar) -> Result<Vec<Vec<String>>> {
    let opts = SampleOptions::default();
    let base = cfg.data.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x434f_5250;
    let mut out = Vec::with_capacity(cfg.data.pretrain_sentences);
    for i in 0..cfg.data.pretrain_sentences as u64 {
        out.push(sample(grammar, base.wrapping_add(i), &opts)?.realize());
    }
    if let Some(path) = &cfg.data.pretrain_text {
        for line in fs::read_to_string(path)?.lines() {
            let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            if !words.is_empty() {
                out.push(words);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            std: std_dev(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub setting: Setting,
    pub variant: Variant,
    pub trials: Vec<SeedResult>,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
}

impl TrialReport {
    pub fn new(setting: Setting, variant: Variant, mut trials: Vec<SeedResult>) -> Self {
        trials.sort_by_key(|t| t.seed);
        let col = |f: fn(&Metrics) -> f64| trials.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>();
        Self {
            setting,
            variant,
            precision: Summary::of(&col(|m| m.precision)),
            recall: Summary::of(&col(|m| m.recall)),
            f1: Summary::of(&col(|m| m.f1)),
            trials,
        }
    }

    pub fn f1s(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.metrics.f1).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub setting: Setting,
    pub a: Variant,
    pub b: Variant,
    /// Two-sided permutation test on per-seed F1.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_hash: String,
    pub reports: Vec<TrialReport>,
    pub significance: Vec<Significance>,
}

impl ResultsTable {
    pub fn report(&self, setting: Setting, variant: Variant) -> Option<&TrialReport> {
        self.reports.iter().find(|r| r.setting == setting && r.variant == variant)
    }

    pub fn p_value(&self, setting: Setting, a: Variant, b: Variant) -> Option<f64> {
        self.significance
            .iter()
            .find(|s| s.setting == setting && ((s.a, s.b) == (a, b) || (s.a, s.b) == (b, a)))
            .map(|s| s.p_value)
    }

    /// Settings as column groups, variants as rows, P/R/F1 as mean ± std.
    pub fn to_markdown(&self) -> String {
        let settings: Vec<Setting> = Setting::ALL
            .into_iter()
            .filter(|s| self.reports.iter().any(|r| r.setting == *s))
            .collect();
        let variants: Vec<Variant> = Variant::ALL
            .into_iter()
            .filter(|v| self.reports.iter().any(|r| r.variant == *v))
            .collect();
        let mut s = String::from("| model |");
        for st in &settings {
            let _ = write!(s, " {st} P | {st} R | {st} F1 |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|---|---|".repeat(settings.len()));
        s.push('\n');
        for v in &variants {
            let _ = write!(s, "| {v} |");
            for st in &settings {
                match self.report(*st, *v) {
                    Some(r) => {
                        for m in [r.precision, r.recall, r.f1] {
                            let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * m.mean, 100.0 * m.std);
                        }
                    }
                    None => s.push_str(" - | - | - |"),
                }
            }
            s.push('\n');
        }
        if !self.significance.is_empty() {
            s.push('\n');
            for sig in &self.significance {
                let _ = writeln!(s, "{}: {} vs {} F1, permutation p = {:.4}", sig.setting, sig.a, sig.b, sig.p_value);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,variant,seeds,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std\n");
        for r in &self.reports {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.setting,
                r.variant,
                r.trials.len(),
                r.precision.mean,
                r.precision.std,
                r.recall.mean,
                r.recall.std,
                r.f1.mean,
                r.f1.std
            );
        }
        s
    }
}

/// Permutation tests between each gated variant and its plain counterpart.
pub fn significance(reports: &[TrialReport], resamples: usize, seed: u64) -> Result<Vec<Significance>> {
    let mut out = Vec::new();
    for r in reports.iter().filter(|r| r.variant.gated()) {
        let other = r.variant.counterpart();
        if let Some(o) = reports.iter().find(|o| o.setting == r.setting && o.variant == other) {
            out.push(Significance {
                setting: r.setting,
                a: r.variant,
                b: other,
                p_value: permutation_test(&r.f1s(), &o.f1s(), resamples, seed)?,
            });
        }
    }
    Ok(out)
}

/// Progress reported while trials run.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    PretrainEpoch {
        seed: u64,
        variant: Variant,
        record: EpochRecord,
    },
    FinetuneEpoch {
        seed: u64,
        variant: Variant,
        train_setting: Setting,
        record: EpochRecord,
    },
    Result {
        seed: u64,
        variant: Variant,
        setting: Setting,
        result: SeedResult,
        /// Wall-clock seconds of pretraining plus fine-tuning.
        seconds: f64,
    },
}

/// One training run and the test sets it is scored on. GEN and REC_GEN
/// share training and evaluation data, so one model serves both.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingGroup {
    pub train_from: Setting,
    pub tests: Vec<Setting>,
}

pub fn training_groups(settings: &[Setting]) -> Vec<TrainingGroup> {
    let mut out = Vec::new();
    if settings.contains(&Setting::Id) {
        out.push(TrainingGroup {
            train_from: Setting::Id,
            tests: vec![Setting::Id],
        });
    }
    let generalising: Vec<Setting> = [Setting::Gen, Setting::RecGen]
        .into_iter()
        .filter(|s| settings.contains(s))
        .collect();
    if let Some(&first) = generalising.first() {
        out.push(TrainingGroup {
            train_from: first,
            tests: generalising,
        });
    }
    out
}

/// Model for `variant` and `seed` before fine-tuning: freshly initialised,
/// or MLM-pretrained with a re-drawn classifier. Initialisation depends
/// only on the seed, so every variant starts from the same weights.
pub fn initial_model(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    corpus: &[Vec<String>],
    variant: Variant,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Encoder> {
    let mut mc = cfg.model.clone();
    mc.gate_bypass = !variant.gated();
    let mut model = Encoder::new(mc, vocab.clone(), seed)?;
    if variant.pretrained() {
        let mut pc = cfg.pretrain.clone();
        pc.seed = seed;
        pretrain(&mut model, corpus, &pc, on_epoch)?;
        model.reset_classifier(seed ^ 0x434c_4153);
    }
    Ok(model)
}

/// Fine-tunes `model` and scores it on each test split.
pub fn finetune_and_score(
    model: &mut Encoder,
    train: &[LabeledSentence],
    eval: &[LabeledSentence],
    tests: &[&[LabeledSentence]],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Vec<Metrics>, usize, usize)> {
    let mut fc = cfg.clone();
    fc.seed = seed;
    let rep = finetune(model, train, eval, &fc, on_epoch)?;
    let metrics = tests
        .iter()
        .map(|t| evaluate(model, t, fc.eval_batch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics, rep.best_epoch, rep.history.len()))
}

/// One seed of one variant: pretrained at most once, then fine-tuned per
/// training group.
struct Job {
    seed: u64,
    variant: Variant,
    groups: Vec<TrainingGroup>,
}

fn run_job(cfg: &ExperimentConfig, prep: &Prepared, job: &Job, observe: &(dyn Fn(&Event) + Sync)) -> Result<Vec<(Setting, SeedResult)>> {
    let start = std::time::Instant::now();
    let (seed, variant) = (job.seed, job.variant);
    let vocab = prep.vocabulary();
    let initial = initial_model(cfg, &vocab, &prep.corpus, variant, seed, &mut |r| {
        observe(&Event::PretrainEpoch {
            seed,
            variant,
            record: r.clone(),
        })
    })?;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let missing = |s: Setting| Error::Config(format!("dataset for {s} was not prepared"));
    let split = |s: Setting, name: &str| -> Result<&[LabeledSentence]> {
        prep.datasets
            .get(&s)
            .ok_or_else(|| missing(s))?
            .split(name)
            .map(|x| x.items.as_slice())
            .ok_or_else(|| Error::Config(format!("{s} dataset lacks a `{name}` split")))
    };
    let mut out = Vec::new();
    for group in &job.groups {
        let t0 = std::time::Instant::now();
        let mut model = initial.clone();
        let train_setting = group.train_from;
        let tests = group.tests.iter().map(|&s| split(s, "test")).collect::<Result<Vec<_>>>()?;
        let (metrics, best_epoch, epochs_run) = finetune_and_score(
            &mut model,
            split(train_setting, "train")?,
            split(train_setting, "eval")?,
            &tests,
            &cfg.finetune,
            seed,
            &mut |r| {
                observe(&Event::FinetuneEpoch {
                    seed,
                    variant,
                    train_setting,
                    record: r.clone(),
                })
            },
        )?;
        let seconds = pretrain_seconds + t0.elapsed().as_secs_f64();
        for (&s, m) in group.tests.iter().zip(metrics) {
            let result = SeedResult {
                seed,
                metrics: m,
                best_epoch,
                epochs_run,
            };
            observe(&Event::Result {
                seed,
                variant,
                setting: s,
                result: result.clone(),
                seconds,
            });
            out.push((s, result));
        }
    }
    Ok(out)
}

/// Runs every (seed, variant, training group) combination on
/// `trials.jobs` worker threads and aggregates the reports.
pub fn run_trials(cfg: &ExperimentConfig, prep: &Prepared, observe: &(dyn Fn(&Event) + Sync)) -> Result<ResultsTable> {
    cfg.validate()?;
    if cfg.trials.seeds < 2 {
        return Err(Error::Config("trials need at least two seeds".into()));
    }
    let groups = training_groups(&cfg.trials.settings);
    let mut jobs = Vec::new();
    for seed in cfg.trials.seed_list() {
        for &variant in &cfg.trials.variants {
            jobs.push(Job {
                seed,
                variant,
                groups: groups.clone(),
            });
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(Variant, Setting, SeedResult)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..cfg.trials.jobs.min(jobs.len()) {
            scope.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { return };
                match run_job(cfg, prep, job, observe) {
                    Ok(rs) => {
                        let mut all = results.lock().expect("lock");
                        all.extend(rs.into_iter().map(|(s, r)| (job.variant, s, r)));
                    }
                    Err(e) => {
                        failure.lock().expect("lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let results = results.into_inner().expect("lock");
    let mut reports = Vec::new();
    for &setting in &Setting::ALL {
        if !cfg.trials.settings.contains(&setting) {
            continue;
        }
        for &variant in &cfg.trials.variants {
            let trials: Vec<SeedResult> = results
                .iter()
                .filter(|(v, s, _)| *v == variant && *s == setting)
                .map(|(_, _, r)| r.clone())
                .collect();
            reports.push(TrialReport::new(setting, variant, trials));
        }
    }
    let significance = significance(&reports, cfg.trials.permutation_resamples, cfg.data.seed)?;
    Ok(ResultsTable {
        config_hash: cfg.hash(),
        reports,
        significance,
    })
}
