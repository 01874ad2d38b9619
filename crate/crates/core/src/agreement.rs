//! Agreement oracles and the three experimental datasets.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{
    corrupt_with, Annotations, Derivation, Grammar, LabeledSentence, Number, Pos, SampleOptions, Sampler,
    WeightOverrides, LABEL_VALID, LABEL_VIOLATION,
};

/// Each verb agrees with the nearest noun or pronoun to its left.
pub fn linear_valid(ann: &Annotations) -> Result<bool> {
    let mut nearest: Option<Number> = None;
    for i in 0..ann.len() {
        match ann.pos[i] {
            Pos::Noun | Pos::Pronoun => nearest = Some(ann.number[i]),
            Pos::Verb => {
                let n = nearest.ok_or_else(|| Error::Contract(format!("verb at {i} has no nominal to its left")))?;
                if n != ann.number[i] {
                    return Ok(false);
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Each verb agrees with the head of its subject.
pub fn hierarchical_valid(ann: &Annotations) -> Result<bool> {
    for i in 0..ann.len() {
        if ann.pos[i] != Pos::Verb {
            continue;
        }
        let s = ann.subject[i].ok_or_else(|| Error::Annotation(format!("verb at {i} has no subject link")))?;
        let subj = *ann
            .number
            .get(s)
            .ok_or_else(|| Error::Annotation(format!("subject link {s} out of range")))?;
        if subj != ann.number[i] {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "REC_GEN")]
    RecGen,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Id, Setting::Gen, Setting::RecGen];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Id => "ID",
            Setting::Gen => "GEN",
            Setting::RecGen => "REC_GEN",
        }
    }

    /// Accepts `id`, `gen`, `rec-gen`, `rec_gen` in any case.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "id" => Ok(Setting::Id),
            "gen" => Ok(Setting::Gen),
            "rec-gen" | "recgen" => Ok(Setting::RecGen),
            _ => Err(Error::Config(format!("unknown setting `{s}` (expected id, gen or rec-gen)"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which sentences a split admits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Filter {
    /// Any grammatical sentence, any corruption.
    Unfiltered,
    /// Both heuristics agree with the label.
    Consistent,
    /// Only the hierarchical heuristic gets the label right.
    Discriminating,
}

impl Filter {
    pub fn admits(self, item: &LabeledSentence) -> Result<bool> {
        let hier = hierarchical_valid(&item.annotations)?;
        let lin = linear_valid(&item.annotations)?;
        let valid = item.label == LABEL_VALID;
        if hier != valid {
            return Err(Error::Contract(format!("label disagrees with hierarchical oracle: `{}`", item.text)));
        }
        Ok(match self {
            Filter::Unfiltered => true,
            Filter::Consistent => lin == valid,
            Filter::Discriminating => lin != valid,
        })
    }
}

/// How a test split chooses derivation depths.
#[derive(Clone, Debug, PartialEq)]
pub enum DepthPlan {
    /// Whatever the weights produce.
    Natural,
    /// Each item targets a depth drawn uniformly from `min..=max`.
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub name: &'static str,
    pub size: usize,
    pub filter: Filter,
    pub overrides: WeightOverrides,
    pub depth: DepthPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingSpec {
    pub setting: Setting,
    pub splits: Vec<SplitSpec>,
    /// Longest sentence admitted, in words.
    pub max_tokens: usize,
    /// Depth cap handed to the sampler.
    pub max_depth: usize,
    /// Sampling attempts allowed per requested item.
    pub attempts_per_item: usize,
}

pub const DEFAULT_SIZES: (usize, usize, usize) = (2400, 800, 800);
pub const REC_GEN_DEPTHS: (usize, usize) = (2, 15);

impl SettingSpec {
    pub fn new(setting: Setting, grammar: &Grammar) -> Result<Self> {
        Self::with_sizes(setting, grammar, DEFAULT_SIZES)
    }

    pub fn with_sizes(setting: Setting, grammar: &Grammar, (train, eval, test): (usize, usize, usize)) -> Result<Self> {
        for s in [train, eval, test] {
            if s == 0 || s % 2 != 0 {
                return Err(Error::Config(format!("split size {s} must be positive and even")));
            }
        }
        let split = |name, size, filter| SplitSpec {
            name,
            size,
            filter,
            overrides: WeightOverrides::default(),
            depth: DepthPlan::Natural,
        };
        let splits = match setting {
            Setting::Id => vec![
                split("train", train, Filter::Unfiltered),
                split("eval", eval, Filter::Unfiltered),
                split("test", test, Filter::Unfiltered),
            ],
            Setting::Gen => vec![
                split("train", train, Filter::Consistent),
                split("eval", eval, Filter::Consistent),
                split("test", test, Filter::Discriminating),
            ],
            Setting::RecGen => vec![
                split("train", train, Filter::Consistent),
                split("eval", eval, Filter::Consistent),
                SplitSpec {
                    name: "test",
                    size: test,
                    filter: Filter::Discriminating,
                    overrides: WeightOverrides::deep_embedding(grammar)?,
                    depth: DepthPlan::Uniform {
                        min: REC_GEN_DEPTHS.0,
                        max: REC_GEN_DEPTHS.1,
                    },
                },
            ],
        };
        Ok(Self {
            setting,
            splits,
            max_tokens: 126,
            max_depth: 15,
            attempts_per_item: 2000,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub name: String,
    pub size: usize,
    pub valid: usize,
    pub violations: usize,
    pub depth_mean: f64,
    pub depth_max: usize,
    pub length_mean: f64,
    pub length_max: usize,
    pub attempts: usize,
    pub acceptance_rate: f64,
    /// Accuracy of predicting the label with each oracle.
    pub linear_oracle_accuracy: f64,
    pub hierarchical_oracle_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub items: Vec<LabeledSentence>,
    pub stats: SplitStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub setting: Setting,
    pub seed: u64,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    Linear,
    Hierarchical,
}

impl Oracle {
    /// Predicted label: violation when the heuristic rejects the sentence.
    pub fn predict(self, item: &LabeledSentence) -> Result<u8> {
        let ok = match self {
            Oracle::Linear => linear_valid(&item.annotations)?,
            Oracle::Hierarchical => hierarchical_valid(&item.annotations)?,
        };
        Ok(if ok { LABEL_VALID } else { LABEL_VIOLATION })
    }

    pub fn accuracy(self, items: &[LabeledSentence]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::EmptyInput("oracle accuracy"));
        }
        let mut right = 0;
        for it in items {
            right += usize::from(self.predict(it)? == it.label);
        }
        Ok(right as f64 / items.len() as f64)
    }
}

fn split_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Generates every split of `spec`. Splits are drawn in order (train, eval,
/// test) from independent streams of `seed`. A string used by an earlier
/// split never appears in a later one; repeats inside a split are kept so
/// that each split follows the sampling distribution.
pub fn build_dataset(grammar: &Grammar, spec: &SettingSpec, seed: u64) -> Result<Dataset> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut splits = Vec::with_capacity(spec.splits.len());
    for (i, s) in spec.splits.iter().enumerate() {
        // train/eval streams depend only on the split position, so GEN and
        // REC_GEN share them for the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i));
        let split = build_split(grammar, spec, s, &mut rng, &seen)?;
        log::info!(
            "{} {}: {} items, depth mean {:.2}, acceptance {:.3}",
            spec.setting,
            s.name,
            split.items.len(),
            split.stats.depth_mean,
            split.stats.acceptance_rate
        );
        seen.extend(split.items.iter().map(|it| it.text.clone()));
        splits.push(split);
    }
    Ok(Dataset {
        setting: spec.setting,
        seed,
        splits,
    })
}

fn build_split(
    grammar: &Grammar,
    spec: &SettingSpec,
    s: &SplitSpec,
    rng: &mut ChaCha8Rng,
    seen: &HashSet<String>,
) -> Result<Split> {
    let sampler = Sampler::new(
        grammar,
        SampleOptions {
            overrides: s.overrides.clone(),
            max_depth: spec.max_depth,
            max_tokens: spec.max_tokens,
            max_rejections: 1000,
        },
    )?;
    let half = s.size / 2;
    let (mut n_valid, mut n_bad) = (0, 0);
    let mut items = Vec::with_capacity(s.size);
    let budget = s.size * spec.attempts_per_item;
    let mut attempts = 0;
    let draw_target = |rng: &mut ChaCha8Rng| match s.depth {
        DepthPlan::Natural => None,
        DepthPlan::Uniform { min, max } => Some(rng.random_range(min..=max)),
    };
    let mut target = draw_target(rng);
    while items.len() < s.size {
        if attempts >= budget {
            return Err(Error::Budget {
                what: format!("{} {}", spec.setting, s.name),
                accepted: items.len(),
                attempts,
                rate: items.len() as f64 / attempts.max(1) as f64,
            });
        }
        attempts += 1;
        let d: Derivation = sampler.sample(rng)?;
        if let Some(t) = target {
            if d.depth(grammar) != t {
                continue;
            }
        }
        let want_valid = if n_valid < half && n_bad < half {
            rng.random_bool(0.5)
        } else {
            n_valid < half
        };
        let item = if want_valid {
            LabeledSentence::valid(&d, grammar)
        } else {
            corrupt_with(&d, grammar, rng)
        };
        if !s.filter.admits(&item)? || seen.contains(&item.text) {
            continue;
        }
        if want_valid {
            n_valid += 1;
        } else {
            n_bad += 1;
        }
        items.push(item);
        target = draw_target(rng);
    }
    let stats = split_stats(s.name, &items, attempts)?;
    Ok(Split {
        name: s.name.to_string(),
        items,
        stats,
    })
}

pub fn split_stats(name: &str, items: &[LabeledSentence], attempts: usize) -> Result<SplitStats> {
    if items.is_empty() {
        return Err(Error::EmptyInput("split statistics"));
    }
    let n = items.len() as f64;
    let lengths: Vec<usize> = items.iter().map(|i| i.annotations.len()).collect();
    Ok(SplitStats {
        name: name.to_string(),
        size: items.len(),
        valid: items.iter().filter(|i| i.label == LABEL_VALID).count(),
        violations: items.iter().filter(|i| i.label == LABEL_VIOLATION).count(),
        depth_mean: items.iter().map(|i| i.depth as f64).sum::<f64>() / n,
        depth_max: items.iter().map(|i| i.depth).max().unwrap_or(0),
        length_mean: lengths.iter().sum::<usize>() as f64 / n,
        length_max: lengths.iter().copied().max().unwrap_or(0),
        attempts,
        acceptance_rate: items.len() as f64 / attempts.max(1) as f64,
        linear_oracle_accuracy: Oracle::Linear.accuracy(items)?,
        hierarchical_oracle_accuracy: Oracle::Hierarchical.accuracy(items)?,
    })
}

pub fn write_jsonl(path: &Path, items: &[LabeledSentence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledSentence>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: LabeledSentence = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if item.label > 1 || item.annotations.len() != item.text.split(' ').count() {
            return Err(Error::Format(format!("{}:{}: inconsistent row", path.display(), i + 1)));
        }
        out.push(item);
    }
    Ok(out)
}

#[derive(Serialize)]
struct StatsFile<'a> {
    setting: Setting,
    seed: u64,
    splits: Vec<&'a SplitStats>,
}

/// Writes `train.jsonl`, `eval.jsonl`, `test.jsonl` and `stats.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &ds.splits {
        write_jsonl(&dir.join(format!("{}.jsonl", s.name)), &s.items)?;
    }
    let stats = StatsFile {
        setting: ds.setting,
        seed: ds.seed,
        splits: ds.splits.iter().map(|s| &s.stats).collect(),
    };
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(())
}
