//! Unlabelled parse trees read off merge-probability ladders.
//!
//! Extraction works top-down: inside a segment, at the current layer, split
//! at the weakest breakpoint while its merge probability is below the
//! threshold; once a segment has no such breakpoint, move one layer down.
//! A segment that survives every layer becomes one flat constituent.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseTree {
    /// Token index.
    Leaf(usize),
    /// Ordered children, at least two.
    Node(Vec<ParseTree>),
}

impl ParseTree {
    /// First token and one-past-last token covered by this node.
    pub fn span(&self) -> (usize, usize) {
        match self {
            ParseTree::Leaf(i) => (*i, i + 1),
            ParseTree::Node(ch) => (ch[0].span().0, ch[ch.len() - 1].span().1),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            ParseTree::Leaf(i) => out.push(*i),
            ParseTree::Node(ch) => ch.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn num_leaves(&self) -> usize {
        let (s, e) = self.span();
        e - s
    }

    /// Half-open spans of every internal node.
    pub fn spans(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        self.collect_spans(&mut out);
        out
    }

    fn collect_spans(&self, out: &mut BTreeSet<(usize, usize)>) {
        if let ParseTree::Node(ch) = self {
            out.insert(self.span());
            ch.iter().for_each(|c| c.collect_spans(out));
        }
    }

    /// Leaves must read `0..N` left to right and every internal node needs
    /// at least two children.
    pub fn validate(&self) -> Result<()> {
        fn walk(t: &ParseTree, next: &mut usize) -> Result<()> {
            match t {
                ParseTree::Leaf(i) => {
                    if *i != *next {
                        return Err(Error::Format(format!("leaf {i} found where {next} was expected")));
                    }
                    *next += 1;
                }
                ParseTree::Node(ch) => {
                    if ch.len() < 2 {
                        return Err(Error::Format("internal node with fewer than two children".into()));
                    }
                    for c in ch {
                        walk(c, next)?;
                    }
                }
            }
            Ok(())
        }
        let mut next = 0;
        walk(self, &mut next)
    }

    /// Bracketed rendering with bare leaves: `[[the cat] runs]`.
    pub fn to_bracketed<S: AsRef<str>>(&self, tokens: &[S]) -> Result<String> {
        if tokens.len() != self.num_leaves() || self.span().0 != 0 {
            return Err(Error::Contract(format!(
                "tree has {} leaves but {} tokens were given",
                self.num_leaves(),
                tokens.len()
            )));
        }
        let mut out = String::new();
        self.render(tokens, &mut out);
        Ok(out)
    }

    fn render<S: AsRef<str>>(&self, tokens: &[S], out: &mut String) {
        match self {
            ParseTree::Leaf(i) => out.push_str(tokens[*i].as_ref()),
            ParseTree::Node(ch) => {
                out.push('[');
                for (k, c) in ch.iter().enumerate() {
                    if k > 0 {
                        out.push(' ');
                    }
                    c.render(tokens, out);
                }
                out.push(']');
            }
        }
    }

    /// Inverse of [`ParseTree::to_bracketed`]. Brackets around a single item
    /// are dropped, so `[[the cat] [runs]]` reads as `[[the cat] runs]`.
    pub fn parse_bracketed(text: &str) -> Result<(ParseTree, Vec<String>)> {
        let mut lexemes = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c == '[' || c == ']' || c.is_whitespace() {
                if !word.is_empty() {
                    lexemes.push(Lexeme::Word(std::mem::take(&mut word)));
                }
                match c {
                    '[' => lexemes.push(Lexeme::Open),
                    ']' => lexemes.push(Lexeme::Close),
                    _ => {}
                }
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            lexemes.push(Lexeme::Word(word));
        }
        let mut tokens = Vec::new();
        let mut pos = 0;
        let tree = parse_item(&lexemes, &mut pos, &mut tokens)?;
        if pos != lexemes.len() {
            return Err(Error::Format(format!("trailing input after a complete tree in `{text}`")));
        }
        Ok((tree, tokens))
    }
}

enum Lexeme {
    Open,
    Close,
    Word(String),
}

fn parse_item(lex: &[Lexeme], pos: &mut usize, tokens: &mut Vec<String>) -> Result<ParseTree> {
    match lex.get(*pos) {
        None => Err(Error::Format("unexpected end of bracketed tree".into())),
        Some(Lexeme::Close) => Err(Error::Format("unbalanced `]`".into())),
        Some(Lexeme::Word(w)) => {
            *pos += 1;
            tokens.push(w.clone());
            Ok(ParseTree::Leaf(tokens.len() - 1))
        }
        Some(Lexeme::Open) => {
            *pos += 1;
            let mut children = Vec::new();
            loop {
                match lex.get(*pos) {
                    Some(Lexeme::Close) => {
                        *pos += 1;
                        break;
                    }
                    None => return Err(Error::Format("missing `]`".into())),
                    _ => children.push(parse_item(lex, pos, tokens)?),
                }
            }
            match children.len() {
                0 => Err(Error::Format("empty brackets".into())),
                1 => Ok(children.pop().expect("one child")),
                _ => Ok(ParseTree::Node(children)),
            }
        }
    }
}

/// Checks a ladder's shape and returns the token count.
fn ladder_len(ladder: &[Vec<f64>]) -> Result<usize> {
    let first = ladder.first().ok_or(Error::EmptyInput("merge-probability ladder"))?;
    if ladder.iter().any(|l| l.len() != first.len()) {
        return Err(Error::Contract("ladder layers differ in length".into()));
    }
    Ok(first.len() + 1)
}

/// Tree induced by a ladder (`ladder[0]` is the lowest layer, each layer
/// holds `N-1` merge probabilities). Ties go to the leftmost breakpoint.
pub fn extract(ladder: &[Vec<f64>], threshold: f64) -> Result<ParseTree> {
    Ok(extract_with_splits(ladder, threshold)?.0)
}

/// As [`extract`], also returning the breakpoints split on, in the order
/// they were chosen. Breakpoint `k` separates tokens `k` and `k+1`.
pub fn extract_with_splits(ladder: &[Vec<f64>], threshold: f64) -> Result<(ParseTree, Vec<usize>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let n = ladder_len(ladder)?;
    let mut splits = Vec::new();
    let tree = split_segment(ladder, threshold, 0, n, ladder.len() - 1, &mut splits);
    Ok((tree, splits))
}

fn split_segment(ladder: &[Vec<f64>], t: f64, start: usize, end: usize, layer: usize, splits: &mut Vec<usize>) -> ParseTree {
    if end - start == 1 {
        return ParseTree::Leaf(start);
    }
    let mut layer = layer;
    loop {
        let a = &ladder[layer];
        let mut best = start;
        for k in start + 1..end - 1 {
            if a[k] < a[best] {
                best = k;
            }
        }
        if a[best] < t {
            splits.push(best);
            let left = split_segment(ladder, t, start, best + 1, layer, splits);
            let right = split_segment(ladder, t, best + 1, end, layer, splits);
            return ParseTree::Node(vec![left, right]);
        }
        if layer == 0 {
            return ParseTree::Node((start..end).map(ParseTree::Leaf).collect());
        }
        layer -= 1;
    }
}

/// Renders a ladder as a small text table, one row per layer, top first.
pub fn format_ladder(ladder: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (l, row) in ladder.iter().enumerate().rev() {
        let _ = write!(out, "layer {}:", l + 1);
        for a in row {
            let _ = write!(out, " {a:.3}");
        }
        out.push('\n');
    }
    out
}
