//! Structure analysis of induced trees: merge-precedence verdicts for
//! determiners and adjectives, relative-clause constituency, survey tables
//! and per-layer breakpoint profiles.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Batch, Encoder};
use crate::error::{Error, Result};
use crate::grammar::{inflect, Grammar, Symbol};
use crate::stats::{binomial_test, mean, std_dev};
use crate::tree::{extract, ParseTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    DetN,
    NVp,
    DetAdj,
    AdjN,
    Other,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::DetN => "[Det N]",
            Verdict::NVp => "[N VP]",
            Verdict::DetAdj => "[Det Adj]",
            Verdict::AdjN => "[Adj N]",
            Verdict::Other => "other",
        }
    }
}

/// Smallest internal node strictly containing token `i`.
fn smallest_span_over(tree: &ParseTree, i: usize) -> Option<(usize, usize)> {
    tree.spans()
        .into_iter()
        .filter(|&(s, e)| s <= i && i < e)
        .min_by_key(|&(s, e)| e - s)
}

/// Which merge happens first for the subject noun at `noun` (preceded by
/// its determiner at `noun - 1`, followed by the verb at `verb`): with the
/// determiner, with verb material, or neither.
pub fn classify_det_merge(tree: &ParseTree, det: usize, noun: usize, verb: usize) -> Result<Verdict> {
    if !(det < noun && noun < verb && verb < tree.num_leaves()) {
        return Err(Error::Contract(format!("roles det={det} noun={noun} verb={verb} out of order")));
    }
    Ok(match smallest_span_over(tree, noun) {
        Some((s, e)) if s == det && e == noun + 1 => Verdict::DetN,
        Some((s, e)) if s == noun && e > verb => Verdict::NVp,
        _ => Verdict::Other,
    })
}

/// Whether the adjective at `adj` joins the determiner before it or the
/// noun after it first.
pub fn classify_adj_merge(tree: &ParseTree, det: usize, adj: usize, noun: usize) -> Result<Verdict> {
    if !(det < adj && adj < noun && noun < tree.num_leaves()) {
        return Err(Error::Contract(format!("roles det={det} adj={adj} noun={noun} out of order")));
    }
    Ok(match smallest_span_over(tree, adj) {
        Some((s, e)) if s == det && e == adj + 1 => Verdict::DetAdj,
        Some((s, e)) if s == adj && e == noun + 1 => Verdict::AdjN,
        _ => Verdict::Other,
    })
}

/// True iff the half-open `clause` span is a constituent of `tree`.
pub fn relclause_constituent(tree: &ParseTree, clause: (usize, usize)) -> bool {
    tree.spans().contains(&clause)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Det,
    Adj,
    Rel,
}

impl Pattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "det" => Ok(Pattern::Det),
            "adj" => Ok(Pattern::Adj),
            "rel" => Ok(Pattern::Rel),
            _ => Err(Error::Config(format!("unknown pattern `{s}` (det, adj, rel)"))),
        }
    }

    pub fn default_count(self) -> usize {
        match self {
            Pattern::Det => 5550,
            Pattern::Adj => 5400,
            Pattern::Rel => 1882,
        }
    }

    /// Column headers for the two tallied outcomes.
    pub fn columns(self) -> [&'static str; 2] {
        match self {
            Pattern::Det => ["[Det N]", "[N VP]"],
            Pattern::Adj => ["[Det Adj]", "[Adj N]"],
            Pattern::Rel => ["[Rel.]", "No [Rel.]"],
        }
    }

    /// Relative share of each survey row in the published tables.
    fn row_weights(self) -> [usize; 4] {
        match self {
            Pattern::Det => [75, 75, 2700, 2700],
            Pattern::Adj => [600, 600, 5400, 5400],
            Pattern::Rel => [600, 600, 1440, 1440],
        }
    }
}

/// Survey rows: subject number × main-verb transitivity.
pub const ROW_LABELS: [&str; 4] = [
    "Sing. subject, intrans.",
    "Plur. subject, intrans.",
    "Sing. subject, trans.",
    "Plur. subject, trans.",
];

/// Splits `total` across `weights` by largest remainder; ties go to the
/// earlier row.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (total * w % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Open-class words of the grammar, used to build survey sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub nouns: Vec<String>,
    pub intransitive: Vec<String>,
    pub transitive: Vec<String>,
    pub adjectives: Vec<String>,
}

impl Lexicon {
    pub fn from_grammar(g: &Grammar) -> Result<Self> {
        let words = |nt: &str| -> Result<Vec<String>> {
            let id = g
                .nonterminal(nt)
                .ok_or_else(|| Error::Grammar(format!("grammar lacks `{nt}`")))?;
            let mut out: Vec<String> = Vec::new();
            for &r in g.rules_for(id) {
                for s in &g.rules[r].rhs {
                    if let Symbol::Terminal(t) = s {
                        if !out.contains(t) {
                            out.push(t.clone());
                        }
                    }
                }
            }
            Ok(out)
        };
        Ok(Self {
            nouns: words("N_common")?,
            intransitive: words("VI")?,
            transitive: words("VT")?,
            adjectives: words("Adj")?,
        })
    }
}

/// One survey sentence and the token positions the verdict looks at.
#[derive(Clone, Debug, PartialEq)]
pub struct SurveyItem {
    pub row: usize,
    pub words: Vec<String>,
    /// DET: (det, noun, verb). ADJ: (det, adj, noun). REL: (that, clause end, 0).
    pub roles: (usize, usize, usize),
}

fn noun_form(n: &str, plural: bool) -> String {
    if plural {
        inflect(n)
    } else {
        n.to_string()
    }
}

fn verb_form(v: &str, plural_subject: bool) -> String {
    if plural_subject {
        v.to_string()
    } else {
        inflect(v)
    }
}

/// Every sentence of one survey row, in a fixed order. Objects are
/// `the N` or `the Ns`.
fn row_sentences(lex: &Lexicon, pattern: Pattern, row: usize) -> Vec<SurveyItem> {
    let plural = row % 2 == 1;
    let transitive = row >= 2;
    let objects: Vec<Vec<String>> = if transitive {
        lex.nouns
            .iter()
            .flat_map(|n| [false, true].map(|pl| vec!["the".to_string(), noun_form(n, pl)]))
            .collect()
    } else {
        vec![Vec::new()]
    };
    let verbs = if transitive { &lex.transitive } else { &lex.intransitive };
    let mut out = Vec::new();
    match pattern {
        Pattern::Det => {
            for n in &lex.nouns {
                for v in verbs {
                    for o in &objects {
                        let mut w = vec!["the".to_string(), noun_form(n, plural), verb_form(v, plural)];
                        w.extend(o.iter().cloned());
                        out.push(SurveyItem {
                            row,
                            words: w,
                            roles: (0, 1, 2),
                        });
                    }
                }
            }
        }
        Pattern::Adj => {
            for a in &lex.adjectives {
                for n in &lex.nouns {
                    for v in verbs {
                        for o in &objects {
                            let mut w = vec!["the".to_string(), a.clone(), noun_form(n, plural), verb_form(v, plural)];
                            w.extend(o.iter().cloned());
                            out.push(SurveyItem {
                                row,
                                words: w,
                                roles: (0, 1, 2),
                            });
                        }
                    }
                }
            }
        }
        Pattern::Rel => {
            // the N that V_rel [the N'] V_main [the N'']
            let rel_objects: Vec<Vec<String>> = std::iter::once(Vec::new()).chain(objects.iter().filter(|o| !o.is_empty()).cloned()).collect();
            for n in &lex.nouns {
                for rv in lex.intransitive.iter().chain(&lex.transitive) {
                    let rel_trans = lex.transitive.contains(rv);
                    for ro in rel_objects.iter().filter(|o| o.is_empty() != rel_trans) {
                        for v in verbs {
                            for o in &objects {
                                let mut w = vec![
                                    "the".to_string(),
                                    noun_form(n, plural),
                                    "that".to_string(),
                                    verb_form(rv, plural),
                                ];
                                w.extend(ro.iter().cloned());
                                let end = w.len();
                                w.push(verb_form(v, plural));
                                w.extend(o.iter().cloned());
                                out.push(SurveyItem {
                                    row,
                                    words: w,
                                    roles: (2, end, 0),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Survey sentences: each row gets its apportioned share of `count`, taking
/// every sentence when the share covers the row and a seeded sample
/// without replacement otherwise.
pub fn survey_items(lex: &Lexicon, pattern: Pattern, count: usize, seed: u64) -> Vec<SurveyItem> {
    let shares = apportion(count, &pattern.row_weights());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for (row, &share) in shares.iter().enumerate() {
        let all = row_sentences(lex, pattern, row);
        if share >= all.len() {
            // cycle through the row when more items are requested than exist
            out.extend(all.iter().cycle().take(share).cloned());
        } else {
            let mut picked = sample_indices(&mut rng, all.len(), share).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| all[i].clone()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub label: String,
    /// Tallies for the two named outcomes.
    pub counts: [usize; 2],
    pub other: usize,
    pub total: usize,
    /// Exact two-sided binomial test of `counts` against a 50/50 split.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyTable {
    pub pattern: Pattern,
    pub columns: [String; 2],
    pub threshold: f64,
    pub rows: Vec<SurveyRow>,
}

impl SurveyTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("row,{},{},other,total,p_value\n", self.columns[0], self.columns[1]);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e}",
                r.label, r.counts[0], r.counts[1], r.other, r.total, r.p_value
            );
        }
        s
    }
}

/// Tallies survey verdicts from already-extracted trees.
pub fn tally(pattern: Pattern, items: &[SurveyItem], trees: &[ParseTree], threshold: f64) -> Result<SurveyTable> {
    if items.len() != trees.len() {
        return Err(Error::Contract(format!("{} trees for {} items", trees.len(), items.len())));
    }
    let mut counts = [[0usize; 3]; 4];
    for (it, t) in items.iter().zip(trees) {
        let (x, y, z) = it.roles;
        let slot = match pattern {
            Pattern::Det => match classify_det_merge(t, x, y, z)? {
                Verdict::DetN => 0,
                Verdict::NVp => 1,
                _ => 2,
            },
            Pattern::Adj => match classify_adj_merge(t, x, y, z)? {
                Verdict::DetAdj => 0,
                Verdict::AdjN => 1,
                _ => 2,
            },
            Pattern::Rel => {
                if relclause_constituent(t, (x, y)) {
                    0
                } else {
                    1
                }
            }
        };
        counts[it.row][slot] += 1;
    }
    let mut rows = Vec::with_capacity(4);
    for (r, c) in counts.iter().enumerate() {
        let n = (c[0] + c[1]) as u64;
        rows.push(SurveyRow {
            label: ROW_LABELS[r].to_string(),
            counts: [c[0], c[1]],
            other: c[2],
            total: c.iter().sum(),
            p_value: binomial_test(c[0] as u64, n, 0.5)?,
        });
    }
    let cols = pattern.columns();
    Ok(SurveyTable {
        pattern,
        columns: [cols[0].to_string(), cols[1].to_string()],
        threshold,
        rows,
    })
}

/// Per-sequence ladders for tokenized sentences, computed in batches.
pub fn ladders_for<S: AsRef<str>>(model: &Encoder, sentences: &[Vec<S>], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|s| model.vocab.encode(s, model.config.max_seq_len))
            .collect::<Result<_>>()?;
        out.extend(model.infer(&Batch::new(&seqs)?)?.ladders);
    }
    Ok(out)
}

/// Generates the survey sentences, parses them with `model` and tallies.
pub fn run_survey(
    model: &Encoder,
    lex: &Lexicon,
    pattern: Pattern,
    count: usize,
    seed: u64,
    threshold: f64,
) -> Result<SurveyTable> {
    let items = survey_items(lex, pattern, count, seed);
    let words: Vec<Vec<String>> = items.iter().map(|i| i.words.clone()).collect();
    let ladders = ladders_for(model, &words, 64)?;
    let trees = ladders
        .iter()
        .map(|l| extract(l, threshold))
        .collect::<Result<Vec<_>>>()?;
    tally(pattern, &items, &trees, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// 1-based layer number.
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    /// 1 − 2^(−layer).
    pub geometric: f64,
}

/// Mean and spread of merge probabilities per layer over a corpus.
pub fn breakpoint_profile<S: AsRef<str>>(model: &Encoder, corpus: &[Vec<S>]) -> Result<Vec<LayerProfile>> {
    let ladders = ladders_for(model, corpus, 64)?;
    let layers = model.config.num_layers;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); layers];
    for l in &ladders {
        for (i, row) in l.iter().enumerate() {
            values[i].extend_from_slice(row);
        }
    }
    if values.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("corpus with at least one two-word sentence"));
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, v)| LayerProfile {
            layer: i + 1,
            mean: mean(v),
            std: std_dev(v),
            geometric: 1.0 - 0.5f64.powi(i as i32 + 1),
        })
        .collect())
}
