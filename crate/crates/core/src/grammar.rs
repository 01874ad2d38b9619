//! Weighted context-free grammar for agreement data.
//!
//! Grammars use a plain-text rule format:
//!
//! ```text
//! S   -> NP_3Sg_nom VP_3Sg [0.5] | NP_nom VP [0.5]
//! Det -> 'the' [0.5] | 'a' [0.5]
//! ```
//!
//! Quoted items are terminals, bare items nonterminals, and the bracketed
//! number is the rule weight. Weights are normalised per left-hand side.
//! The terminal `'+s'` inflects the word before it (plural noun or
//! third-person-singular verb).

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUFFIX: &str = "+s";
pub const RELATIVIZER: &str = "that";
pub const CONJUNCTION: &str = "and";

/// The sentence grammar used for every experiment.
pub const BUILTIN_GRAMMAR: &str = "\
S             -> NP_3Sg_nom VP_3Sg [0.5] | NP_nom VP [0.5]

VP_3Sg        -> VT '+s' NP_acc [0.475] | VI '+s' [0.475] | VP_3Sg 'and' VP_3Sg [0.05]
VP            -> VT      NP_acc [0.475] | VI      [0.475] | VP     'and' VP     [0.05]

NP_3Sg_nom    -> 'he' [0.25] | 'she' [0.25] | NP_common_Sg [0.5]
NP_common_Sg  -> Det_Sg N_bar_common_Sg [1]
Det_Sg        -> 'the' [0.5] | 'a' [0.5]

NP_nom        -> 'I' [0.125] | 'you' [0.125] | 'we' [0.125] | 'they' [0.125] | NP_common_Pl [0.5]
NP_common_Pl  -> Det_Pl N_bar_common_Pl [0.8] | NP_common_Pl 'and' NP_common_Pl [0.2]
Det_Pl        -> 'the' [0.333] | 'those' [0.333] | 'these' [0.333]

NP_acc        -> 'me' [0.075] | 'you' [0.075] | 'us' [0.075] | 'them' [0.075] | NP_common_Pl [0.35] | NP_common_Sg [0.35]

N_bar_common_Sg  -> Adj N_bar_common_Sg [0.2] | N_common 'that' VP_3Sg [0.2] | N_common [0.6]
N_bar_common_Pl  -> Adj N_bar_common_Pl [0.2] | N_common '+s' 'that' VP [0.15] | N_common '+s' [0.65]

N_common      -> 'girl' [0.0625] | 'boy' [0.0625] | 'cat' [0.0625] | 'turtle' [0.0625] | 'rutabaga' [0.0625] | 'duck' [0.0625] | 'cheese' [0.0625] | 'dude' [0.0625] | 'rabbit' [0.0625] | 'wug' [0.0625] | 'linguist' [0.0625] | 'physicist' [0.0625] | 'lady' [0.0625] | 'dog' [0.0625] | 'cat' [0.0625] | 'bird' [0.0625]

Rel_Sg         -> 'that' VP_3Sg [1]
Rel_Pl         -> 'that' VP [1]

VI            -> 'run' [0.2] | 'walk' [0.2] | 'think' [0.2] | 'laugh' [0.2] | 'ponder' [0.2]
VT            -> 'kick' [0.166] | 'kiss' [0.166] | 'hug' [0.166] | 'punch' [0.166] | 'fight' [0.166] | 'love' [0.166]

Adj           -> 'big' [0.125] | 'small' [0.125] | 'happy' [0.125] | 'mad' [0.125] | 'red' [0.125] | 'blue' [0.125] | 'sparkling' [0.125] | 'shiny' [0.125]
";

const SINGULAR_PRONOUNS: [&str; 2] = ["he", "she"];
const PLURAL_PRONOUNS: [&str; 7] = ["I", "you", "we", "they", "me", "us", "them"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Nonterminal(usize),
    Terminal(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
    /// Weight as written.
    pub raw_weight: f64,
    /// Weight normalised over rules sharing `lhs`.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub nonterminals: Vec<String>,
    pub rules: Vec<Rule>,
    pub start: usize,
    by_lhs: Vec<Vec<usize>>,
    warnings: Vec<String>,
}

impl Grammar {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_GRAMMAR).expect("builtin grammar parses")
    }

    /// Parses the rule format; the first left-hand side is the start symbol.
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
            *ids.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        let mut pending: Vec<(usize, Vec<RawItem>, f64)> = Vec::new();
        let mut start = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Grammar(format!("line {}: {m}: `{line}`", lineno + 1));
            let (lhs, rest) = line.split_once("->").ok_or_else(|| err("missing `->`"))?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.contains(char::is_whitespace) || lhs.contains('\'') {
                return Err(err("bad left-hand side"));
            }
            let lhs_id = intern(lhs, &mut names);
            start.get_or_insert(lhs_id);
            for alt in rest.split('|') {
                let alt = alt.trim();
                let open = alt.rfind('[').ok_or_else(|| err("alternative without `[weight]`"))?;
                let close = alt.rfind(']').filter(|&c| c > open).ok_or_else(|| err("unclosed weight"))?;
                let weight: f64 = alt[open + 1..close]
                    .trim()
                    .parse()
                    .map_err(|_| err("weight is not a number"))?;
                if !(weight.is_finite() && weight >= 0.0) {
                    return Err(err("weight must be finite and non-negative"));
                }
                let items = lex_items(&alt[..open]).map_err(|m| err(&m))?;
                if items.is_empty() {
                    return Err(err("empty right-hand side"));
                }
                pending.push((lhs_id, items, weight));
            }
        }
        let start = start.ok_or_else(|| Error::Grammar("grammar has no rules".into()))?;
        let mut rules = Vec::with_capacity(pending.len());
        for (lhs, items, w) in pending {
            let rhs = items
                .into_iter()
                .map(|it| match it {
                    RawItem::Terminal(t) => Symbol::Terminal(t),
                    RawItem::Nonterminal(n) => Symbol::Nonterminal(intern(&n, &mut names)),
                })
                .collect();
            rules.push(Rule {
                lhs,
                rhs,
                raw_weight: w,
                weight: w,
            });
        }
        let mut g = Self {
            by_lhs: vec![Vec::new(); names.len()],
            nonterminals: names,
            rules,
            start,
            warnings: Vec::new(),
        };
        for (i, r) in g.rules.iter().enumerate() {
            g.by_lhs[r.lhs].push(i);
        }
        g.normalize()?;
        g.check()?;
        Ok(g)
    }

    fn normalize(&mut self) -> Result<()> {
        for (nt, ids) in self.by_lhs.iter().enumerate() {
            let total: f64 = ids.iter().map(|&i| self.rules[i].raw_weight).sum();
            if ids.is_empty() {
                return Err(Error::Grammar(format!("nonterminal `{}` has no rules", self.nonterminals[nt])));
            }
            if total <= 0.0 {
                return Err(Error::Grammar(format!("rules for `{}` have zero total weight", self.nonterminals[nt])));
            }
            for &i in ids {
                self.rules[i].weight = self.rules[i].raw_weight / total;
            }
        }
        Ok(())
    }

    /// Errors on non-terminating symbols; records warnings for duplicate
    /// alternatives and symbols unreachable from the start.
    fn check(&mut self) -> Result<()> {
        let n = self.nonterminals.len();
        let mut productive = vec![false; n];
        loop {
            let mut changed = false;
            for r in &self.rules {
                if !productive[r.lhs]
                    && r.rhs.iter().all(|s| match s {
                        Symbol::Terminal(_) => true,
                        Symbol::Nonterminal(x) => productive[*x],
                    })
                {
                    productive[r.lhs] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(bad) = (0..n).find(|&i| !productive[i]) {
            return Err(Error::Grammar(format!(
                "nonterminal `{}` has no terminating derivation",
                self.nonterminals[bad]
            )));
        }
        for name in self.unreachable() {
            self.warnings.push(format!("`{name}` is unreachable from `{}`", self.nonterminals[self.start]));
        }
        let mut seen = HashSet::new();
        for r in &self.rules {
            if !seen.insert((r.lhs, r.rhs.clone())) {
                self.warnings.push(format!(
                    "duplicate alternative `{} -> {}`",
                    self.nonterminals[r.lhs],
                    self.render_rhs(&r.rhs)
                ));
            }
        }
        Ok(())
    }

    pub fn unreachable(&self) -> Vec<String> {
        let mut reach = vec![false; self.nonterminals.len()];
        let mut stack = vec![self.start];
        reach[self.start] = true;
        while let Some(x) = stack.pop() {
            for &i in &self.by_lhs[x] {
                for s in &self.rules[i].rhs {
                    if let Symbol::Nonterminal(y) = s {
                        if !reach[*y] {
                            reach[*y] = true;
                            stack.push(*y);
                        }
                    }
                }
            }
        }
        (0..reach.len())
            .filter(|&i| !reach[i])
            .map(|i| self.nonterminals[i].clone())
            .collect()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.nonterminals.iter().position(|n| n == name)
    }

    pub fn rules_for(&self, nt: usize) -> &[usize] {
        &self.by_lhs[nt]
    }

    pub fn render_rhs(&self, rhs: &[Symbol]) -> String {
        rhs.iter()
            .map(|s| match s {
                Symbol::Terminal(t) => format!("'{t}'"),
                Symbol::Nonterminal(n) => self.nonterminals[*n].clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Index of the rule `lhs -> rhs`, with `rhs` written in the rule format
    /// (e.g. `N_common 'that' VP_3Sg`).
    pub fn find_rule(&self, lhs: &str, rhs: &str) -> Option<usize> {
        let nt = self.nonterminal(lhs)?;
        let want: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
        self.by_lhs[nt].iter().copied().find(|&i| {
            let have: Vec<String> = self.render_rhs(&self.rules[i].rhs).split_whitespace().map(str::to_string).collect();
            have == want
        })
    }

    /// Every surface word the grammar can produce, including inflected
    /// forms of each stem that can carry `'+s'`, in first-seen order.
    pub fn surface_vocabulary(&self) -> Vec<String> {
        let mut inflectable = HashSet::new();
        for r in &self.rules {
            for w in r.rhs.windows(2) {
                if let (Symbol::Nonterminal(x), Symbol::Terminal(t)) = (&w[0], &w[1]) {
                    if t == SUFFIX {
                        inflectable.insert(*x);
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for r in &self.rules {
            for s in &r.rhs {
                if let Symbol::Terminal(t) = s {
                    if t != SUFFIX && seen.insert(t.clone()) {
                        out.push(t.clone());
                        if inflectable.contains(&r.lhs) {
                            let f = inflect(t);
                            if seen.insert(f.clone()) {
                                out.push(f);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (nt, ids) in self.by_lhs.iter().enumerate() {
            let alts: Vec<String> = ids
                .iter()
                .map(|&i| format!("{} [{}]", self.render_rhs(&self.rules[i].rhs), self.rules[i].weight))
                .collect();
            writeln!(f, "{} -> {}", self.nonterminals[nt], alts.join(" | "))?;
        }
        Ok(())
    }
}

enum RawItem {
    Terminal(String),
    Nonterminal(String),
}

fn lex_items(s: &str) -> std::result::Result<Vec<RawItem>, String> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '\'' {
            chars.next();
            let mut t = String::new();
            loop {
                match chars.next() {
                    Some('\'') => break,
                    Some(x) => t.push(x),
                    None => return Err("unterminated quote".into()),
                }
            }
            if t.is_empty() {
                return Err("empty terminal".into());
            }
            out.push(RawItem::Terminal(t));
        } else {
            let mut n = String::new();
            while let Some(&x) = chars.peek() {
                if x.is_whitespace() || x == '\'' {
                    break;
                }
                n.push(x);
                chars.next();
            }
            out.push(RawItem::Nonterminal(n));
        }
    }
    Ok(out)
}

/// English `-s` inflection: `kiss → kisses`, `lady → ladies`, `walk → walks`.
pub fn inflect(stem: &str) -> String {
    let vowels = ['a', 'e', 'i', 'o', 'u'];
    if ["s", "x", "z", "ch", "sh"].iter().any(|e| stem.ends_with(e)) {
        format!("{stem}es")
    } else if stem.len() >= 2
        && stem.ends_with('y')
        && !vowels.contains(&stem.chars().nth_back(1).expect("len >= 2"))
    {
        format!("{}ies", &stem[..stem.len() - 1])
    } else {
        format!("{stem}s")
    }
}

// ---------------------------------------------------------------------------
// Derivations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Det,
    Adj,
    Noun,
    Pronoun,
    Verb,
    Relativizer,
    Conjunction,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Sg,
    Pl,
    None,
}

impl Number {
    pub fn flipped(self) -> Self {
        match self {
            Number::Sg => Number::Pl,
            Number::Pl => Number::Sg,
            Number::None => Number::None,
        }
    }
}

/// One surface token after `'+s'` fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub stem: String,
    pub suffixed: bool,
    pub pos: Pos,
    pub number: Number,
    /// For verbs: index of the head noun or pronoun of the clause's subject.
    pub subject: Option<usize>,
}

impl Token {
    pub fn surface(&self) -> String {
        if self.suffixed {
            inflect(&self.stem)
        } else {
            self.stem.clone()
        }
    }

    pub fn is_nominal(&self) -> bool {
        matches!(self.pos, Pos::Noun | Pos::Pronoun)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Child {
    Node(usize),
    /// Index into [`Derivation::tokens`].
    Token(usize),
    /// The `'+s'` marker, fused into the preceding token.
    Suffix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivNode {
    pub symbol: usize,
    pub rule: usize,
    pub children: Vec<Child>,
    /// Token span `[start, end)` of this node's yield.
    pub span: (usize, usize),
}

/// A relative clause: `that` at `that_index`, the clause running to `end`
/// (exclusive) and modifying the noun phrase that starts at `head_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeClause {
    pub head_start: usize,
    pub that_index: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    pub nodes: Vec<DerivNode>,
    pub root: usize,
    pub tokens: Vec<Token>,
}

impl Derivation {
    pub fn realize(&self) -> Vec<String> {
        self.tokens.iter().map(Token::surface).collect()
    }

    pub fn text(&self) -> String {
        self.realize().join(" ")
    }

    /// Deepest nesting of rules that introduce `'that'`.
    pub fn depth(&self, grammar: &Grammar) -> usize {
        fn walk(d: &Derivation, g: &Grammar, node: usize) -> usize {
            let n = &d.nodes[node];
            let own = usize::from(rule_has_terminal(g, n.rule, RELATIVIZER));
            let below = n
                .children
                .iter()
                .filter_map(|c| match c {
                    Child::Node(x) => Some(walk(d, g, *x)),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            own + below
        }
        walk(self, grammar, self.root)
    }

    pub fn verb_indices(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].pos == Pos::Verb).collect()
    }

    pub fn relative_clauses(&self, grammar: &Grammar) -> Vec<RelativeClause> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if !rule_has_terminal(grammar, n.rule, RELATIVIZER) {
                continue;
            }
            let that = n.children.iter().find_map(|c| match c {
                Child::Token(t) if self.tokens[*t].stem == RELATIVIZER => Some(*t),
                _ => None,
            });
            if let Some(that_index) = that {
                out.push(RelativeClause {
                    head_start: n.span.0,
                    that_index,
                    end: n.span.1,
                });
            }
        }
        out.sort_by_key(|r| (r.that_index, r.end));
        out
    }

    /// Flips the inflection of `verb` (3sg ↔ plain) and its number.
    pub fn toggle_verb(&mut self, verb: usize) -> Result<()> {
        let t = self
            .tokens
            .get_mut(verb)
            .filter(|t| t.pos == Pos::Verb)
            .ok_or_else(|| Error::Derivation(format!("token {verb} is not a verb")))?;
        t.suffixed = !t.suffixed;
        t.number = t.number.flipped();
        Ok(())
    }
}

fn rule_has_terminal(g: &Grammar, rule: usize, word: &str) -> bool {
    g.rules[rule].rhs.iter().any(|s| matches!(s, Symbol::Terminal(t) if t == word))
}

/// Rule-weight multipliers applied before per-symbol renormalisation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightOverrides {
    pub multipliers: Vec<(usize, f64)>,
}

impl WeightOverrides {
    /// Multiplier for the rule written `lhs -> rhs`.
    pub fn scale(mut self, g: &Grammar, lhs: &str, rhs: &str, factor: f64) -> Result<Self> {
        let r = g
            .find_rule(lhs, rhs)
            .ok_or_else(|| Error::Config(format!("no rule `{lhs} -> {rhs}`")))?;
        self.multipliers.push((r, factor));
        Ok(self)
    }

    /// Weights of the builtin grammar tilted towards deep centre embedding:
    /// relative-clause rules are strongly favoured, verbs prefer objects and
    /// objects prefer full noun phrases, so each clause can host another.
    pub fn deep_embedding(g: &Grammar) -> Result<Self> {
        let mut o = Self::default();
        for (lhs, rhs, f) in [
            ("N_bar_common_Sg", "N_common 'that' VP_3Sg", 60.0),
            ("N_bar_common_Pl", "N_common '+s' 'that' VP", 80.0),
            ("VP_3Sg", "VT '+s' NP_acc", 30.0),
            ("VP", "VT NP_acc", 30.0),
            ("NP_acc", "NP_common_Pl", 30.0),
            ("NP_acc", "NP_common_Sg", 30.0),
            ("VP_3Sg", "VP_3Sg 'and' VP_3Sg", 0.0),
            ("VP", "VP 'and' VP", 0.0),
            ("NP_common_Pl", "NP_common_Pl 'and' NP_common_Pl", 0.0),
        ] {
            o = o.scale(g, lhs, rhs, f)?;
        }
        Ok(o)
    }

    fn weights(&self, g: &Grammar) -> Result<Vec<f64>> {
        let mut w: Vec<f64> = g.rules.iter().map(|r| r.weight).collect();
        for &(r, f) in &self.multipliers {
            if r >= w.len() || !(f.is_finite() && f >= 0.0) {
                return Err(Error::Config(format!("bad override ({r}, {f})")));
            }
            w[r] *= f;
        }
        for nt in 0..g.nonterminals.len() {
            let total: f64 = g.rules_for(nt).iter().map(|&i| w[i]).sum();
            if total <= 0.0 {
                return Err(Error::Config(format!("overrides zero out `{}`", g.nonterminals[nt])));
            }
            for &i in g.rules_for(nt) {
                w[i] /= total;
            }
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub overrides: WeightOverrides,
    /// Derivations deeper than this are rejected.
    pub max_depth: usize,
    /// Derivations with more surface tokens than this are rejected.
    pub max_tokens: usize,
    /// Consecutive rejections tolerated before giving up.
    pub max_rejections: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            overrides: WeightOverrides::default(),
            max_depth: 15,
            max_tokens: 126,
            max_rejections: 1000,
        }
    }
}

/// Reusable sampler with overrides already applied.
pub struct Sampler<'g> {
    grammar: &'g Grammar,
    weights: Vec<f64>,
    opts: SampleOptions,
}

struct Aborted;

impl<'g> Sampler<'g> {
    pub fn new(grammar: &'g Grammar, opts: SampleOptions) -> Result<Self> {
        if opts.max_depth < 1 {
            return Err(Error::Config("depth cap must be at least 1".into()));
        }
        let weights = opts.overrides.weights(grammar)?;
        Ok(Self { grammar, weights, opts })
    }

    pub fn grammar(&self) -> &'g Grammar {
        self.grammar
    }

    /// One annotated derivation drawn from `rng`, resampling past the caps.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Derivation> {
        self.sample_where(rng, |_| true)
    }

    /// As [`Sampler::sample`] but also rejecting derivations that fail `keep`.
    pub fn sample_where<R: Rng + ?Sized>(&self, rng: &mut R, keep: impl Fn(&Derivation) -> bool) -> Result<Derivation> {
        for _ in 0..self.opts.max_rejections {
            let mut b = Builder {
                nodes: Vec::new(),
                tokens: Vec::new(),
            };
            let root = match self.expand(&mut b, self.grammar.start, 0, rng) {
                Ok(r) => r,
                Err(Aborted) => continue,
            };
            let d = annotate(self.grammar, b, root)?;
            if keep(&d) {
                return Ok(d);
            }
        }
        Err(Error::Config(format!(
            "{} consecutive derivations rejected; the weights cannot meet the caps",
            self.opts.max_rejections
        )))
    }

    fn expand<R: Rng + ?Sized>(&self, b: &mut Builder, nt: usize, depth: usize, rng: &mut R) -> std::result::Result<usize, Aborted> {
        let mut pick = |nt: usize| -> std::result::Result<usize, Aborted> {
            let ids = self.grammar.rules_for(nt);
            let mut u: f64 = rng.random();
            for &i in ids {
                let w = self.weights[i];
                if w > 0.0 && u < w {
                    return Ok(i);
                }
                u -= w;
            }
            // rounding can run past the last positive rule
            Ok(*ids.iter().rev().find(|&&i| self.weights[i] > 0.0).expect("positive weight"))
        };
        expand_with(self.grammar, &self.opts, b, nt, depth, &mut pick)
    }
}

fn expand_with(
    g: &Grammar,
    opts: &SampleOptions,
    b: &mut Builder,
    nt: usize,
    depth: usize,
    pick: &mut dyn FnMut(usize) -> std::result::Result<usize, Aborted>,
) -> std::result::Result<usize, Aborted> {
    let rule = pick(nt)?;
    let depth = depth + usize::from(rule_has_terminal(g, rule, RELATIVIZER));
    if depth > opts.max_depth {
        return Err(Aborted);
    }
    let idx = b.nodes.len();
    let start = b.tokens.len();
    b.nodes.push(DerivNode {
        symbol: nt,
        rule,
        children: Vec::new(),
        span: (start, start),
    });
    let mut children = Vec::with_capacity(g.rules[rule].rhs.len());
    for s in &g.rules[rule].rhs {
        match s {
            Symbol::Nonterminal(x) => children.push(Child::Node(expand_with(g, opts, b, *x, depth, pick)?)),
            Symbol::Terminal(t) if t == SUFFIX => children.push(Child::Suffix),
            Symbol::Terminal(t) => {
                b.tokens.push((t.clone(), nt));
                if b.tokens.len() > opts.max_tokens {
                    return Err(Aborted);
                }
                children.push(Child::Token(b.tokens.len() - 1));
            }
        }
    }
    b.nodes[idx].children = children;
    b.nodes[idx].span.1 = b.tokens.len();
    Ok(idx)
}

/// Builds the derivation that expands nonterminals leftmost-first with the
/// given rules, in order. Useful for constructing specific sentences.
pub fn derive(grammar: &Grammar, script: &[usize]) -> Result<Derivation> {
    let opts = SampleOptions {
        max_depth: usize::MAX,
        max_tokens: usize::MAX,
        ..SampleOptions::default()
    };
    let mut next = 0;
    let mut failure = None;
    let mut pick = |nt: usize| -> std::result::Result<usize, Aborted> {
        let Some(&r) = script.get(next) else {
            failure = Some(format!("script ran out while expanding `{}`", grammar.nonterminals[nt]));
            return Err(Aborted);
        };
        if grammar.rules.get(r).map(|x| x.lhs) != Some(nt) {
            failure = Some(format!("rule {r} cannot expand `{}`", grammar.nonterminals[nt]));
            return Err(Aborted);
        }
        next += 1;
        Ok(r)
    };
    let mut b = Builder {
        nodes: Vec::new(),
        tokens: Vec::new(),
    };
    let root = expand_with(grammar, &opts, &mut b, grammar.start, 0, &mut pick);
    if let Some(f) = failure {
        return Err(Error::Derivation(f));
    }
    let root = root.map_err(|_| Error::Derivation("derivation aborted".into()))?;
    if next != script.len() {
        return Err(Error::Derivation(format!("{} unused rules in script", script.len() - next)));
    }
    annotate(grammar, b, root)
}

/// Convenience wrapper: one derivation from a fresh generator seeded with `seed`.
pub fn sample(grammar: &Grammar, seed: u64, opts: &SampleOptions) -> Result<Derivation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sampler::new(grammar, opts.clone())?.sample(&mut rng)
}

struct Builder {
    nodes: Vec<DerivNode>,
    /// Terminal and the nonterminal that emitted it.
    tokens: Vec<(String, usize)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Category {
    Nominal,
    Verbal,
    Verb,
    Noun,
    Det,
    Adj,
    Other,
}

fn category(name: &str) -> Category {
    if name.starts_with("VP") {
        Category::Verbal
    } else if name == "VT" || name == "VI" {
        Category::Verb
    } else if name == "N_common" {
        Category::Noun
    } else if name.starts_with("NP") || name.starts_with("N_bar") {
        Category::Nominal
    } else if name.starts_with("Det") {
        Category::Det
    } else if name.starts_with("Adj") {
        Category::Adj
    } else {
        Category::Other
    }
}

fn pronoun_number(word: &str) -> Option<Number> {
    if SINGULAR_PRONOUNS.contains(&word) {
        Some(Number::Sg)
    } else if PLURAL_PRONOUNS.contains(&word) {
        Some(Number::Pl)
    } else {
        None
    }
}

/// Turns raw terminals into annotated tokens: fuses `'+s'`, assigns parts of
/// speech and number, and links every verb to the head of its clause's
/// subject.
fn annotate(g: &Grammar, b: Builder, root: usize) -> Result<Derivation> {
    let mut nodes = b.nodes;
    // Fuse suffixes: the '+s' child marks the token emitted just before it.
    let mut tokens: Vec<Token> = b
        .tokens
        .iter()
        .map(|(t, nt)| {
            let cat = category(&g.nonterminals[*nt]);
            let (pos, number) = match cat {
                Category::Verb => (Pos::Verb, Number::Pl),
                Category::Noun => (Pos::Noun, Number::Sg),
                Category::Det => (
                    Pos::Det,
                    if g.nonterminals[*nt].ends_with("Pl") {
                        Number::Pl
                    } else if g.nonterminals[*nt].ends_with("Sg") {
                        Number::Sg
                    } else {
                        Number::None
                    },
                ),
                Category::Adj => (Pos::Adj, Number::None),
                _ if t == RELATIVIZER => (Pos::Relativizer, Number::None),
                _ if t == CONJUNCTION => (Pos::Conjunction, Number::None),
                _ => match pronoun_number(t) {
                    Some(n) => (Pos::Pronoun, n),
                    None => (Pos::Other, Number::None),
                },
            };
            Token {
                stem: t.clone(),
                suffixed: false,
                pos,
                number,
                subject: None,
            }
        })
        .collect();
    // Walk in creation order (parents before children, left to right) so
    // the suffix applies to the token most recently emitted before it.
    let mut last_token: Option<usize> = None;
    fn fuse(nodes: &[DerivNode], node: usize, tokens: &mut [Token], last: &mut Option<usize>) -> Result<()> {
        for c in &nodes[node].children {
            match c {
                Child::Node(x) => fuse(nodes, *x, tokens, last)?,
                Child::Token(t) => *last = Some(*t),
                Child::Suffix => {
                    let t = last.ok_or_else(|| Error::Derivation("'+s' with no preceding word".into()))?;
                    if tokens[t].suffixed {
                        return Err(Error::Derivation("'+s' applied twice".into()));
                    }
                    tokens[t].suffixed = true;
                    tokens[t].number = tokens[t].number.flipped();
                }
            }
        }
        Ok(())
    }
    fuse(&nodes, root, &mut tokens, &mut last_token)?;

    let heads = nominal_heads(g, &nodes, &tokens);
    link_subjects(g, &nodes, root, None, &heads, &mut tokens)?;
    for n in &mut nodes {
        if n.span.0 > n.span.1 {
            return Err(Error::Derivation("inverted span".into()));
        }
    }
    Ok(Derivation { nodes, root, tokens })
}

/// Head noun or pronoun of each nominal node (leftmost nominal path, which
/// picks the first conjunct of a coordination).
fn nominal_heads(g: &Grammar, nodes: &[DerivNode], tokens: &[Token]) -> Vec<Option<usize>> {
    let mut heads = vec![None; nodes.len()];
    // children have larger indices than parents
    for i in (0..nodes.len()).rev() {
        let cat = category(&g.nonterminals[nodes[i].symbol]);
        if !matches!(cat, Category::Nominal | Category::Noun) {
            continue;
        }
        heads[i] = nodes[i].children.iter().find_map(|c| match c {
            Child::Token(t) if tokens[*t].is_nominal() => Some(*t),
            Child::Node(x) if matches!(category(&g.nonterminals[nodes[*x].symbol]), Category::Nominal | Category::Noun) => {
                heads[*x]
            }
            _ => None,
        });
    }
    heads
}

fn link_subjects(
    g: &Grammar,
    nodes: &[DerivNode],
    node: usize,
    inherited: Option<usize>,
    heads: &[Option<usize>],
    tokens: &mut [Token],
) -> Result<()> {
    let n = &nodes[node];
    let has_verbal = n
        .children
        .iter()
        .any(|c| matches!(c, Child::Node(x) if category(&g.nonterminals[nodes[*x].symbol]) == Category::Verbal));
    // A clause: the nominal sibling of a verb phrase is its subject.
    let local = if has_verbal {
        n.children
            .iter()
            .find_map(|c| match c {
                Child::Node(x) if matches!(category(&g.nonterminals[nodes[*x].symbol]), Category::Nominal | Category::Noun) => {
                    heads[*x]
                }
                Child::Token(t) if tokens[*t].is_nominal() => Some(*t),
                _ => None,
            })
            .or(inherited)
    } else {
        inherited
    };
    for c in &n.children {
        match c {
            Child::Node(x) => {
                let cat = category(&g.nonterminals[nodes[*x].symbol]);
                let pass = match cat {
                    Category::Verbal | Category::Verb => local,
                    _ => None,
                };
                link_subjects(g, nodes, *x, pass, heads, tokens)?;
            }
            Child::Token(t) if tokens[*t].pos == Pos::Verb => {
                let s = inherited.ok_or_else(|| {
                    Error::Annotation(format!("verb `{}` has no governing subject", tokens[*t].stem))
                })?;
                tokens[*t].subject = Some(s);
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Labelled sentences
// ---------------------------------------------------------------------------

/// Per-token annotation block carried by every dataset row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub pos: Vec<Pos>,
    pub number: Vec<Number>,
    pub subject: Vec<Option<usize>>,
}

impl Annotations {
    pub fn from_tokens(tokens: &[Token]) -> Self {
        Self {
            pos: tokens.iter().map(|t| t.pos).collect(),
            number: tokens.iter().map(|t| t.number).collect(),
            subject: tokens.iter().map(|t| t.subject).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Label 1 marks an agreement violation.
pub const LABEL_VALID: u8 = 0;
pub const LABEL_VIOLATION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub label: u8,
    pub depth: usize,
    pub swapped_verb_index: Option<usize>,
    pub annotations: Annotations,
}

impl LabeledSentence {
    pub fn valid(d: &Derivation, g: &Grammar) -> Self {
        Self {
            text: d.text(),
            label: LABEL_VALID,
            depth: d.depth(g),
            swapped_verb_index: None,
            annotations: Annotations::from_tokens(&d.tokens),
        }
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split(' ').collect()
    }
}

/// Picks one verb uniformly with `rng` and flips its agreement.
pub fn corrupt_with<R: Rng + ?Sized>(d: &Derivation, g: &Grammar, rng: &mut R) -> LabeledSentence {
    let verbs = d.verb_indices();
    assert!(!verbs.is_empty(), "every sentence of the grammar has a verb");
    let v = verbs[rng.random_range(0..verbs.len())];
    corrupt_at(d, g, v).expect("index is a verb")
}

/// [`corrupt_with`] driven by a fresh generator seeded with `seed`.
pub fn corrupt(d: &Derivation, g: &Grammar, seed: u64) -> LabeledSentence {
    corrupt_with(d, g, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Flips the agreement of the verb at token `verb`.
pub fn corrupt_at(d: &Derivation, g: &Grammar, verb: usize) -> Result<LabeledSentence> {
    let mut bad = d.clone();
    bad.toggle_verb(verb)?;
    Ok(LabeledSentence {
        text: bad.text(),
        label: LABEL_VIOLATION,
        depth: d.depth(g),
        swapped_verb_index: Some(verb),
        annotations: Annotations::from_tokens(&bad.tokens),
    })
}

/// Every derivation (up to `limit`) whose surface form is `words`, found by
/// leftmost top-down search.
pub fn derivations_of<S: AsRef<str>>(grammar: &Grammar, words: &[S], limit: usize) -> Result<Vec<Derivation>> {
    let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    let min_len = min_yields(grammar);
    let mut scripts = Vec::new();
    let mut stack = vec![Symbol::Nonterminal(grammar.start)];
    let mut script = Vec::new();
    search(grammar, &min_len, &words, &mut stack, &mut script, limit, &mut scripts);
    scripts.iter().map(|s| derive(grammar, s)).collect()
}

fn min_yields(g: &Grammar) -> Vec<usize> {
    let mut best = vec![usize::MAX; g.nonterminals.len()];
    loop {
        let mut changed = false;
        for r in &g.rules {
            let mut total = 0usize;
            for s in &r.rhs {
                total = total.saturating_add(match s {
                    Symbol::Terminal(t) if t == SUFFIX => 0,
                    Symbol::Terminal(_) => 1,
                    Symbol::Nonterminal(x) => best[*x],
                });
            }
            if total < best[r.lhs] {
                best[r.lhs] = total;
                changed = true;
            }
        }
        if !changed {
            return best;
        }
    }
}

// `stack` holds pending symbols with the next one last.
fn search(
    g: &Grammar,
    min_len: &[usize],
    words: &[&str],
    stack: &mut Vec<Symbol>,
    script: &mut Vec<usize>,
    limit: usize,
    out: &mut Vec<Vec<usize>>,
) {
    if out.len() >= limit {
        return;
    }
    let need: usize = stack
        .iter()
        .map(|s| match s {
            Symbol::Terminal(t) if t == SUFFIX => 0,
            Symbol::Terminal(_) => 1,
            Symbol::Nonterminal(x) => min_len[*x],
        })
        .sum();
    if need > words.len() {
        return;
    }
    let Some(top) = stack.pop() else {
        if words.is_empty() {
            out.push(script.clone());
        }
        return;
    };
    match &top {
        Symbol::Terminal(t) => {
            let suffixed = matches!(stack.last(), Some(Symbol::Terminal(s)) if s == SUFFIX);
            let form = if suffixed { inflect(t) } else { t.clone() };
            if t != SUFFIX && words.first() == Some(&form.as_str()) {
                let marker = if suffixed { stack.pop() } else { None };
                search(g, min_len, &words[1..], stack, script, limit, out);
                if let Some(m) = marker {
                    stack.push(m);
                }
            }
        }
        Symbol::Nonterminal(nt) => {
            for &r in g.rules_for(*nt) {
                let base = stack.len();
                stack.extend(g.rules[r].rhs.iter().rev().cloned());
                script.push(r);
                search(g, min_len, words, stack, script, limit, out);
                script.pop();
                stack.truncate(base);
            }
        }
    }
    stack.push(top);
}
