use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use treegate::agreement::{build_dataset, read_jsonl, write_dataset, Setting, SettingSpec};
use treegate::analysis::{breakpoint_profile, run_survey, Lexicon, Pattern};
use treegate::encoder::{Batch, Encoder};
use treegate::experiment::{
    finetune_and_score, initial_model, prepare, pretraining_corpus, run_trials, training_groups, Event, ExperimentConfig,
    RunDir, Variant,
};
use treegate::train::{evaluate, pretrain};
use treegate::tree::{extract, format_ladder, DEFAULT_THRESHOLD};

#[derive(Parser)]
#[command(name = "treegate", version, about = "Constituent-attention encoders and agreement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// Base configuration: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Key-value file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied last, e.g. `--set finetune.learning_rate=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_kv(&text)?;
        }
        let mut pairs = Vec::new();
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            pairs.push((k.trim(), v.trim()));
        }
        cfg.set_all(&pairs)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/eval/test splits of one or more settings.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// ID, GEN, REC_GEN or all.
        #[arg(long, default_value = "all")]
        setting: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-language-model pretraining on PCFG text.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// tree (gated) or plain.
        #[arg(long, default_value = "tree")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a violation classifier on one setting's training data.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "ID")]
        setting: String,
        /// tree or plain; ignored when starting from a checkpoint.
        #[arg(long, default_value = "tree")]
        variant: String,
        /// Pretrained model to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by gen-data; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall, F1 and accuracy of a checkpoint on JSONL splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Multi-seed trials over variants and settings with significance tests.
    Trials {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the induced tree of each input sentence.
    Parse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// One sentence per line; `-` reads standard input.
        #[arg(long, default_value = "-")]
        input: String,
        /// Also print the merge-probability ladder of each sentence.
        #[arg(long)]
        dump_ladder: bool,
    },
    /// Merge-precedence survey tables and the breakpoint profile.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// det, adj or rel.
        #[arg(long)]
        pattern: String,
        /// Sentences to survey; the published count for the pattern by default.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// CSV table path; printed to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// PCFG sentences for a breakpoint profile (0 skips it).
        #[arg(long, default_value_t = 0)]
        profile_sentences: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn settings_arg(s: &str) -> Result<Vec<Setting>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Setting::ALL.to_vec());
    }
    s.split(',').map(|x| Ok(Setting::parse(x.trim())?)).collect()
}

fn gated_variant(name: &str) -> Result<Variant> {
    match Variant::parse(name)? {
        v @ (Variant::Plain | Variant::Tree) => Ok(v),
        other => bail!("`{other}` is not a base variant here; use tree or plain"),
    }
}

fn event_json(e: &Event) -> serde_json::Value {
    serde_json::to_value(e).unwrap_or_else(|err| json!({ "error": err.to_string() }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, setting, out } => gen_data(&cfg.load()?, &settings_arg(&setting)?, &out),
        Command::Pretrain { cfg, variant, seed, out } => pretrain_cmd(&cfg.load()?, &variant, seed, &out),
        Command::Finetune {
            cfg,
            setting,
            variant,
            checkpoint,
            data,
            seed,
            out,
        } => finetune_cmd(&cfg.load()?, &setting, &variant, checkpoint.as_deref(), data.as_deref(), seed, &out),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => {
            let (model, _) = Encoder::load(&checkpoint)?;
            for path in &data {
                let items = read_jsonl(path)?;
                let m = evaluate(&model, &items, batch_size)?;
                println!("{}", json!({ "data": path, "metrics": m }));
            }
            Ok(())
        }
        Command::Trials { cfg, out } => trials_cmd(&cfg.load()?, &out),
        Command::Parse {
            checkpoint,
            threshold,
            input,
            dump_ladder,
        } => parse_cmd(&checkpoint, threshold, &input, dump_ladder),
        Command::Analyze {
            checkpoint,
            pattern,
            n,
            seed,
            threshold,
            out,
            profile_sentences,
        } => analyze_cmd(&checkpoint, &pattern, n, seed, threshold, out.as_deref(), profile_sentences),
    }
}

fn gen_data(cfg: &ExperimentConfig, settings: &[Setting], out: &Path) -> Result<()> {
    let run = RunDir::create(out, cfg, &[], &command_line())?;
    let grammar = cfg.grammar()?;
    for w in grammar.warnings() {
        log::warn!("{w}");
    }
    for &s in settings {
        let spec = SettingSpec::with_sizes(s, &grammar, cfg.sizes())?;
        let ds = build_dataset(&grammar, &spec, cfg.data.seed)?;
        let dir = run.file(s.name());
        write_dataset(&dir, &ds)?;
        for split in &ds.splits {
            run.log(&json!({ "setting": s, "split": split.name, "stats": split.stats }))?;
            println!(
                "{} {}: {} items, mean depth {:.3}, linear oracle {:.3}, hierarchical oracle {:.3}",
                s,
                split.name,
                split.items.len(),
                split.stats.depth_mean,
                split.stats.linear_oracle_accuracy,
                split.stats.hierarchical_oracle_accuracy
            );
        }
    }
    Ok(())
}

fn pretrain_cmd(cfg: &ExperimentConfig, variant: &str, seed: Option<u64>, out: &Path) -> Result<()> {
    let variant = gated_variant(variant)?;
    let seed = seed.unwrap_or(cfg.trials.first_seed);
    let run = RunDir::create(out, cfg, &[seed], &command_line())?;
    let grammar = cfg.grammar()?;
    let corpus = pretraining_corpus(cfg, &grammar)?;
    let vocab = treegate::encoder::Vocabulary::new(grammar.surface_vocabulary());
    let mut model = initial_model(cfg, &vocab, &[], variant, seed, &mut |_| {})?;
    let mut pc = cfg.pretrain.clone();
    pc.seed = seed;
    let report = pretrain(&mut model, &corpus, &pc, &mut |r| {
        let _ = run.log(&json!({ "stage": "pretrain", "record": r }));
    })?;
    model.save(run.file("model.ckpt"), json!({ "stage": "pretrained", "variant": variant, "seed": seed }))?;
    run.write_json("pretrain_report.json", &report)?;
    println!(
        "pretrained {} tokens/epoch; MLM loss per epoch {:?} (uniform {:.3})",
        report.tokens_per_epoch, report.epoch_losses, report.uniform_baseline
    );
    if model.config.num_layers > 0 && !model.config.gate_bypass {
        let sample: Vec<Vec<String>> = corpus.iter().take(2000).cloned().collect();
        let profile = breakpoint_profile(&model, &sample)?;
        run.write_json("breakpoint_profile.json", &profile)?;
        for p in &profile {
            println!("layer {}: mean a = {:.3} ± {:.3} (1 - 2^-l = {:.3})", p.layer, p.mean, p.std, p.geometric);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    cfg: &ExperimentConfig,
    setting: &str,
    variant: &str,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let setting = Setting::parse(setting)?;
    let seed = seed.unwrap_or(cfg.trials.first_seed);
    let run = RunDir::create(out, cfg, &[seed], &command_line())?;
    let (train, eval, test) = match data {
        Some(dir) => {
            let dir = if dir.join(setting.name()).is_dir() { dir.join(setting.name()) } else { dir.to_path_buf() };
            (
                read_jsonl(&dir.join("train.jsonl"))?,
                read_jsonl(&dir.join("eval.jsonl"))?,
                read_jsonl(&dir.join("test.jsonl"))?,
            )
        }
        None => {
            let prep = prepare(cfg, &[setting], false)?;
            let ds = &prep.datasets[&setting];
            let get = |n: &str| ds.split(n).map(|s| s.items.clone()).context("missing split");
            (get("train")?, get("eval")?, get("test")?)
        }
    };
    let mut model = match checkpoint {
        Some(path) => {
            let (mut m, _) = Encoder::load(path)?;
            m.reset_classifier(seed ^ 0x434c_4153);
            m
        }
        None => {
            let vocab = treegate::encoder::Vocabulary::new(cfg.grammar()?.surface_vocabulary());
            initial_model(cfg, &vocab, &[], gated_variant(variant)?, seed, &mut |_| {})?
        }
    };
    let (metrics, best_epoch, epochs) = finetune_and_score(&mut model, &train, &eval, &[&test], &cfg.finetune, seed, &mut |r| {
        let _ = run.log(&json!({ "stage": "finetune", "setting": setting, "record": r }));
    })?;
    model.save(
        run.file("model.ckpt"),
        json!({ "stage": "finetuned", "setting": setting, "seed": seed, "best_epoch": best_epoch }),
    )?;
    run.write_json("test_metrics.json", &metrics[0])?;
    println!(
        "{setting} test: P {:.4} R {:.4} F1 {:.4} acc {:.4} (best epoch {best_epoch} of {epochs})",
        metrics[0].precision, metrics[0].recall, metrics[0].f1, metrics[0].accuracy
    );
    Ok(())
}

fn trials_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let run = RunDir::create(out, cfg, &cfg.trials.seed_list(), &command_line())?;
    let needs_corpus = cfg.trials.variants.iter().any(|v| v.pretrained());
    let prep = prepare(cfg, &cfg.trials.settings, needs_corpus)?;
    log::info!(
        "{} seeds x {} variants x {} trainings",
        cfg.trials.seeds,
        cfg.trials.variants.len(),
        training_groups(&cfg.trials.settings).len()
    );
    let log_lock = std::sync::Mutex::new(());
    let table = run_trials(cfg, &prep, &|e| {
        if let Event::Result { seed, variant, setting, result, seconds } = e {
            log::info!("seed {seed} {variant} {setting}: F1 {:.4} ({seconds:.0}s)", result.metrics.f1);
        }
        let _guard = log_lock.lock();
        let _ = run.log(&event_json(e));
    })?;
    run.write_json("results.json", &table)?;
    std::fs::write(run.file("results.md"), table.to_markdown())?;
    std::fs::write(run.file("results.csv"), table.to_csv())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn read_lines(input: &str) -> Result<Vec<String>> {
    let text = if input == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(input).with_context(|| format!("reading {input}"))?
    };
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn parse_cmd(checkpoint: &Path, threshold: f64, input: &str, dump_ladder: bool) -> Result<()> {
    let (model, _) = Encoder::load(checkpoint)?;
    if model.config.gate_bypass {
        log::warn!("checkpoint was trained with the gate bypassed; its link scores were never used");
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for line in read_lines(input)? {
        let words: Vec<&str> = line.split_whitespace().collect();
        let ids = model.vocab.encode(&words, model.config.max_seq_len)?;
        let inf = model.infer(&Batch::new(&[ids])?)?;
        let ladder = &inf.ladders[0];
        let shown = &words[..words.len().min(model.config.max_seq_len - 2)];
        let text = if ladder.first().is_some_and(|l| !l.is_empty()) {
            extract(ladder, threshold)?.to_bracketed(shown)?
        } else {
            shown.join(" ")
        };
        writeln!(lock, "{text}")?;
        if dump_ladder {
            write!(lock, "{}", format_ladder(ladder))?;
        }
    }
    Ok(())
}

fn analyze_cmd(
    checkpoint: &Path,
    pattern: &str,
    n: Option<usize>,
    seed: u64,
    threshold: f64,
    out: Option<&Path>,
    profile_sentences: usize,
) -> Result<()> {
    let (model, _) = Encoder::load(checkpoint)?;
    let pattern = Pattern::parse(pattern)?;
    let grammar = treegate::grammar::Grammar::builtin();
    let lex = Lexicon::from_grammar(&grammar)?;
    let count = n.unwrap_or(pattern.default_count());
    let table = run_survey(&model, &lex, pattern, count, seed, threshold)?;
    match out {
        Some(path) => {
            std::fs::write(path, table.to_csv())?;
            std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&table)?)?;
            print!("{}", table.to_csv());
        }
        None => print!("{}", table.to_csv()),
    }
    if profile_sentences > 0 {
        let mut cfg = ExperimentConfig::desk();
        cfg.data.seed = seed;
        cfg.data.pretrain_sentences = profile_sentences;
        let corpus = pretraining_corpus(&cfg, &grammar)?;
        for p in breakpoint_profile(&model, &corpus)? {
            println!("layer {}: mean a = {:.3} ± {:.3} (1 - 2^-l = {:.3})", p.layer, p.mean, p.std, p.geometric);
        }
    }
    Ok(())
}
