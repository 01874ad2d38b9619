//! Constituent attention.
//!
//! Each layer scores every adjacent token pair, turns the scores into
//! per-token link probabilities (a two-way softmax between the left and
//! right neighbour), combines the two directions of a pair into a merge
//! probability, and folds it into the previous layer's merge probability so
//! constituents only grow with depth. The constituent prior `C` is the
//! product of merge probabilities along the span between two tokens and
//! gates ordinary scaled dot-product attention elementwise.
//!
//! The numeric kernels are plain functions over slices; the `graph_*`
//! functions wrap them as differentiable ops on an [`autodiff::Graph`].

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Products below this magnitude are flushed to zero.
pub const UNDERFLOW_FLUSH: f64 = 1e-300;

/// How the two link directions of a pair combine into a merge probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePairing {
    /// `sqrt(p[k→k+1] · p[k+1→k])`: token k links right and token k+1 links left.
    #[default]
    Adjacent,
    /// `sqrt(p[k→k+1] · p[k→k-1])`: both factors read at token k, as the
    /// formula is sometimes printed.
    SameToken,
}

/// Scores for each adjacent pair `(k, k+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkScores {
    /// `right[k]`: score of token `k` linking to `k+1`.
    pub right: Vec<f64>,
    /// `left[k]`: score of token `k+1` linking to `k`.
    pub left: Vec<f64>,
}

/// Dedicated query/key projections for link scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkWeights {
    pub query: Tensor,
    pub query_bias: Tensor,
    pub key: Tensor,
    pub key_bias: Tensor,
}

/// Merge probabilities and prior of one layer for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstituentState {
    pub layer: usize,
    pub merge_probs: Vec<f64>,
    pub prior: Tensor,
}

impl ConstituentState {
    pub fn new(layer: usize, merge_probs: Vec<f64>) -> Self {
        let prior = constituent_prior(&merge_probs);
        Self {
            layer,
            merge_probs,
            prior,
        }
    }

    pub fn len(&self) -> usize {
        self.merge_probs.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn project(hidden: &[f64], n: usize, d: usize, w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if w.shape() != [d, d] || b.shape() != [d] {
        return Err(Error::Shape {
            op: "link_scores",
            lhs: vec![n, d],
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let mut acc = b.data()[j];
            for k in 0..d {
                acc += hidden[i * d + k] * w.data()[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

/// Neighbour link scores `s(k, k+1) = q_k · k_{k+1} / scale` for an `N×d`
/// hidden matrix. Pairs touching a `blocked` token get `-inf`.
pub fn link_scores(hidden: &Tensor, weights: &LinkWeights, blocked: &[bool], scale: f64) -> Result<LinkScores> {
    let shape = hidden.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("link_scores expects N×d hidden states, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::SequenceTooShort(n));
    }
    if blocked.len() != n {
        return Err(Error::Shape {
            op: "link_scores",
            lhs: shape.to_vec(),
            rhs: vec![blocked.len()],
        });
    }
    let q = project(hidden.data(), n, d, &weights.query, &weights.query_bias)?;
    let k = project(hidden.data(), n, d, &weights.key, &weights.key_bias)?;
    let dot = |a: usize, b: usize| -> f64 { (0..d).map(|j| q[a * d + j] * k[b * d + j]).sum::<f64>() / scale };
    let mut right = Vec::with_capacity(n - 1);
    let mut left = Vec::with_capacity(n - 1);
    for p in 0..n - 1 {
        if blocked[p] || blocked[p + 1] {
            right.push(f64::NEG_INFINITY);
            left.push(f64::NEG_INFINITY);
        } else {
            right.push(dot(p, p + 1));
            left.push(dot(p + 1, p));
        }
    }
    Ok(LinkScores { right, left })
}

#[inline]
fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return (0.0, 0.0);
    }
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    (ea / z, eb / z)
}

fn link_probs_slices(right: &[f64], left: &[f64], p_right: &mut [f64], p_left: &mut [f64]) {
    let m = right.len();
    for i in 0..=m {
        let r = if i < m { right[i] } else { f64::NEG_INFINITY };
        let l = if i > 0 { left[i - 1] } else { f64::NEG_INFINITY };
        let (pr, pl) = softmax2(r, l);
        if i < m {
            p_right[i] = pr;
        }
        if i > 0 {
            p_left[i - 1] = pl;
        }
    }
}

/// Per-token softmax over its (at most two) existing links.
///
/// Returns `(p_right, p_left)` with `p_right[k] = p(k → k+1)` and
/// `p_left[k] = p(k+1 → k)`. A token with a single existing link gives it
/// probability 1; a token with none gives both 0.
pub fn link_probs(scores: &LinkScores) -> (Vec<f64>, Vec<f64>) {
    let m = scores.right.len();
    assert_eq!(m, scores.left.len(), "right/left score lengths differ");
    let mut p_right = vec![0.0; m];
    let mut p_left = vec![0.0; m];
    link_probs_slices(&scores.right, &scores.left, &mut p_right, &mut p_left);
    (p_right, p_left)
}

fn partner(p_left: &[f64], k: usize, pairing: MergePairing) -> f64 {
    match pairing {
        MergePairing::Adjacent => p_left[k],
        MergePairing::SameToken => {
            if k == 0 {
                0.0
            } else {
                p_left[k - 1]
            }
        }
    }
}

/// Geometric mean of the two link directions of each pair.
pub fn merge_probs(p_right: &[f64], p_left: &[f64], pairing: MergePairing) -> Vec<f64> {
    (0..p_right.len())
        .map(|k| (p_right[k] * partner(p_left, k, pairing)).sqrt())
        .collect()
}

/// `a[k] = prev[k] + (1 - prev[k]) · fresh[k]`; the first layer passes `prev = 0`.
pub fn compose_layers(fresh: &[f64], prev: &[f64]) -> Vec<f64> {
    assert_eq!(fresh.len(), prev.len());
    fresh.iter().zip(prev).map(|(f, p)| p + (1.0 - p) * f).collect()
}

/// `C[i][j] = Π_{k=min(i,j)}^{max(i,j)-1} a[k]`, an `N×N` symmetric matrix
/// with unit diagonal, for `N = a.len() + 1`.
pub fn constituent_prior(a: &[f64]) -> Tensor {
    let n = a.len() + 1;
    let mut c = vec![0.0; n * n];
    fill_prior(a, &mut c);
    Tensor::new(vec![n, n], c).expect("n×n")
}

fn fill_prior(a: &[f64], c: &mut [f64]) {
    let n = a.len() + 1;
    for i in 0..n {
        c[i * n + i] = 1.0;
        let mut run = 1.0;
        for j in i + 1..n {
            run *= a[j - 1];
            if run < UNDERFLOW_FLUSH {
                run = 0.0;
            }
            c[i * n + j] = run;
            c[j * n + i] = run;
        }
    }
}

/// Gradient of [`constituent_prior`] with respect to `a`, in `O(N²)`.
///
/// `dC[i][j]/da[k] = Π_{t∈[i,j), t≠k} a[t]` for `i ≤ k < j`, so the gradient
/// splits into a left running sum `h[j] = Σ_{i≤k} s(i,j) Π_{t=i}^{k-1} a[t]`
/// and a right running product. No division, so zero entries are exact.
fn prior_backward(a: &[f64], g: &[f64], out: &mut [f64]) {
    let m = a.len();
    let n = m + 1;
    let s = |i: usize, j: usize| g[i * n + j] + g[j * n + i];
    let mut h = vec![0.0; n];
    for (j, hj) in h.iter_mut().enumerate().skip(1) {
        *hj = s(0, j);
    }
    for k in 0..m {
        if k > 0 {
            for j in k + 1..n {
                h[j] = a[k - 1] * h[j] + s(k, j);
            }
        }
        let mut right = 1.0;
        let mut acc = 0.0;
        for j in k + 1..n {
            acc += h[j] * right;
            if j < m {
                right *= a[j];
            }
        }
        out[k] = acc;
    }
}

/// Scores, probabilities and merge probabilities of one layer, as values
/// (no graph), used by analysis and the reference tests.
pub fn layer_merge_probs(scores: &LinkScores, prev: Option<&[f64]>, pairing: MergePairing) -> Vec<f64> {
    let (pr, pl) = link_probs(scores);
    let fresh = merge_probs(&pr, &pl, pairing);
    match prev {
        Some(p) => compose_layers(&fresh, p),
        None => fresh,
    }
}

// ---------------------------------------------------------------------------
// Differentiable versions
// ---------------------------------------------------------------------------

/// Batched neighbour scores on a graph.
///
/// `q` and `k` are `[B, N, d]` link projections; `blocked_bias` is a
/// `[B, N-1]` constant holding `0` or `-inf`. Returns `(right, left)`, each
/// `[B, N-1]`.
pub fn graph_link_scores(g: &mut Graph, q: Var, k: Var, blocked_bias: Var, scale: f64) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 3 || g.shape(k) != shape.as_slice() {
        return Err(Error::Shape {
            op: "link_scores",
            lhs: shape,
            rhs: g.shape(k).to_vec(),
        });
    }
    let n = shape[1];
    if n < 2 {
        return Err(Error::SequenceTooShort(n));
    }
    let q_lo = g.slice(q, 1, 0, n - 1)?;
    let q_hi = g.slice(q, 1, 1, n)?;
    let k_lo = g.slice(k, 1, 0, n - 1)?;
    let k_hi = g.slice(k, 1, 1, n)?;
    let mut dir = |a: Var, b: Var| -> Result<Var> {
        let prod = g.mul(a, b)?;
        let dot = g.sum_axis(prod, 2)?;
        let scaled = g.scale(dot, 1.0 / scale);
        g.add(scaled, blocked_bias)
    };
    let right = dir(q_lo, k_hi)?;
    let left = dir(q_hi, k_lo)?;
    Ok((right, left))
}

struct LinkProbsOp;

impl CustomOp for LinkProbsOp {
    fn name(&self) -> &'static str {
        "link_probs"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (right, left) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let m = *ctx.inputs[0].shape().last().expect("rank 2");
        let rows = right.len() / m;
        let p = ctx.output.data();
        let g = ctx.grad_output;
        let mut gr = vec![0.0; right.len()];
        let mut gl = vec![0.0; left.len()];
        for b in 0..rows {
            let base = b * 2 * m;
            let (pr, pl) = (&p[base..base + m], &p[base + m..base + 2 * m]);
            let (g_r, g_l) = (&g[base..base + m], &g[base + m..base + 2 * m]);
            for i in 0..=m {
                // token i: probabilities (pr[i], pl[i-1]) from logits (right[i], left[i-1])
                let (p0, g0) = if i < m { (pr[i], g_r[i]) } else { (0.0, 0.0) };
                let (p1, g1) = if i > 0 { (pl[i - 1], g_l[i - 1]) } else { (0.0, 0.0) };
                let dot = p0 * g0 + p1 * g1;
                if i < m {
                    gr[b * m + i] = p0 * (g0 - dot);
                }
                if i > 0 {
                    gl[b * m + i - 1] = p1 * (g1 - dot);
                }
            }
        }
        vec![Some(gr), Some(gl)]
    }
}

/// Link probabilities on a graph: `[B, M]` scores in, `[B, 2, M]` out with
/// row 0 = `p_right` and row 1 = `p_left`.
pub fn graph_link_probs(g: &mut Graph, right: Var, left: Var) -> Result<Var> {
    let shape = g.shape(right).to_vec();
    if shape.len() != 2 || g.shape(left) != shape.as_slice() {
        return Err(Error::Shape {
            op: "link_probs",
            lhs: shape,
            rhs: g.shape(left).to_vec(),
        });
    }
    let (rows, m) = (shape[0], shape[1]);
    let (r, l) = (g.value(right).data(), g.value(left).data());
    let mut out = vec![0.0; rows * 2 * m];
    for b in 0..rows {
        let (pr, pl) = out[b * 2 * m..(b + 1) * 2 * m].split_at_mut(m);
        link_probs_slices(&r[b * m..(b + 1) * m], &l[b * m..(b + 1) * m], pr, pl);
    }
    let t = Tensor::new(vec![rows, 2, m], out)?;
    Ok(g.custom(vec![right, left], t, Box::new(LinkProbsOp)))
}

struct MergeOp {
    pairing: MergePairing,
}

impl CustomOp for MergeOp {
    fn name(&self) -> &'static str {
        "merge_probs"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let p = ctx.inputs[0].data();
        let m = ctx.inputs[0].shape()[2];
        let rows = p.len() / (2 * m);
        let out = ctx.output.data();
        let g = ctx.grad_output;
        let mut gp = vec![0.0; p.len()];
        for b in 0..rows {
            let base = b * 2 * m;
            for k in 0..m {
                let y = out[b * m + k];
                if y == 0.0 {
                    continue;
                }
                let pr = p[base + k];
                let gk = g[b * m + k];
                // d sqrt(x·z)/dx = z / (2 sqrt(x·z)) = y / (2x)
                let idx_partner = match self.pairing {
                    MergePairing::Adjacent => base + m + k,
                    MergePairing::SameToken => base + m + k - 1,
                };
                gp[base + k] += gk * y / (2.0 * pr);
                gp[idx_partner] += gk * y / (2.0 * p[idx_partner]);
            }
        }
        vec![Some(gp)]
    }
}

/// Merge probabilities on a graph: `[B, 2, M]` link probabilities in, `[B, M]` out.
pub fn graph_merge_probs(g: &mut Graph, probs: Var, pairing: MergePairing) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 3 || shape[1] != 2 {
        return Err(Error::Contract(format!("merge_probs expects [B, 2, M], got {shape:?}")));
    }
    let (rows, m) = (shape[0], shape[2]);
    let p = g.value(probs).data();
    let mut out = Vec::with_capacity(rows * m);
    for b in 0..rows {
        let base = b * 2 * m;
        out.extend(merge_probs(&p[base..base + m], &p[base + m..base + 2 * m], pairing));
    }
    let t = Tensor::new(vec![rows, m], out)?;
    Ok(g.custom(vec![probs], t, Box::new(MergeOp { pairing })))
}

/// `prev + (1 - prev) · fresh` on a graph.
pub fn graph_compose_layers(g: &mut Graph, fresh: Var, prev: Option<Var>) -> Result<Var> {
    let Some(prev) = prev else { return Ok(fresh) };
    // this form keeps `result >= prev` exact under rounding
    let neg = g.scale(prev, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let grow = g.mul(rest, fresh)?;
    g.add(prev, grow)
}

struct PriorOp;

impl CustomOp for PriorOp {
    fn name(&self) -> &'static str {
        "constituent_prior"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let a = ctx.inputs[0].data();
        let m = *ctx.inputs[0].shape().last().expect("rank 2");
        let n = m + 1;
        let rows = a.len() / m;
        let mut ga = vec![0.0; a.len()];
        for b in 0..rows {
            prior_backward(
                &a[b * m..(b + 1) * m],
                &ctx.grad_output[b * n * n..(b + 1) * n * n],
                &mut ga[b * m..(b + 1) * m],
            );
        }
        vec![Some(ga)]
    }
}

/// Constituent prior on a graph: `[B, N-1]` merge probabilities in, `[B, N, N]` out.
pub fn graph_constituent_prior(g: &mut Graph, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("constituent_prior expects [B, N-1], got {shape:?}")));
    }
    let (rows, m) = (shape[0], shape[1]);
    let n = m + 1;
    let src = g.value(a).data();
    let mut out = vec![0.0; rows * n * n];
    for b in 0..rows {
        fill_prior(&src[b * m..(b + 1) * m], &mut out[b * n * n..(b + 1) * n * n]);
    }
    let t = Tensor::new(vec![rows, n, n], out)?;
    Ok(g.custom(vec![a], t, Box::new(PriorOp)))
}

/// Attention probabilities gated by a constituent prior.
///
/// `q`, `k`, `v` are `[B, H, N, dh]`; `gate` is `[B, N, N]` and shared by
/// every head; `pad_bias` is `[B, 1, 1, N]` with `0` or `-inf`. Gated rows are
/// not renormalised, so a row sums to at most 1. Returns
/// `(context [B, H, N, dh], probs [B, H, N, N])`.
pub fn gated_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    gate: Option<Var>,
    pad_bias: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(Error::Shape {
            op: "gated_attention",
            lhs: qs,
            rhs: g.shape(k).to_vec(),
        });
    }
    let (b, n) = (qs[0], qs[2]);
    if g.shape(pad_bias) != [b, 1, 1, n] {
        return Err(Error::Shape {
            op: "gated_attention",
            lhs: qs,
            rhs: g.shape(pad_bias).to_vec(),
        });
    }
    let kt = g.transpose_last(k)?;
    let raw = g.matmul(q, kt)?;
    let scaled = g.scale(raw, 1.0 / scale);
    let masked = g.add(scaled, pad_bias)?;
    let mut probs = g.softmax(masked, 3)?;
    if let Some(gate) = gate {
        if g.shape(gate) != [b, n, n] {
            return Err(Error::Shape {
                op: "gated_attention",
                lhs: vec![b, n, n],
                rhs: g.shape(gate).to_vec(),
            });
        }
        let shared = g.reshape(gate, &[b, 1, n, n])?;
        probs = g.mul(probs, shared)?;
    }
    let context = g.matmul(probs, v)?;
    Ok((context, probs))
}

/// Masks that turn a prior into the encoder's gate: `C` on content×content
/// entries and 1 wherever a special token is involved, so `[CLS]`/`[SEP]`
/// stay ungated.
#[derive(Clone, Copy, Debug)]
pub struct ContentGate {
    keep: Var,
    fill: Var,
}

impl ContentGate {
    /// `content[b][i]` is true when position `i` of sequence `b` is a word.
    pub fn new(g: &mut Graph, content: &[Vec<bool>]) -> Result<Self> {
        let b = content.len();
        let n = content.first().map_or(0, Vec::len);
        if b == 0 || content.iter().any(|c| c.len() != n) {
            return Err(Error::Contract("content mask must be non-empty and rectangular".into()));
        }
        let mut keep = vec![0.0; b * n * n];
        let mut fill = vec![0.0; b * n * n];
        for (bi, c) in content.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let at = bi * n * n + i * n + j;
                    if c[i] && c[j] {
                        keep[at] = 1.0;
                    } else {
                        fill[at] = 1.0;
                    }
                }
            }
        }
        let keep = g.constant(Tensor::new(vec![b, n, n], keep)?);
        let fill = g.constant(Tensor::new(vec![b, n, n], fill)?);
        Ok(Self { keep, fill })
    }

    pub fn apply(&self, g: &mut Graph, prior: Var) -> Result<Var> {
        let kept = g.mul(prior, self.keep)?;
        g.add(kept, self.fill)
    }
}

/// One-shot form of [`ContentGate`].
pub fn graph_content_gate(g: &mut Graph, prior: Var, content: &[Vec<bool>]) -> Result<Var> {
    ContentGate::new(g, content)?.apply(g, prior)
}

// ---------------------------------------------------------------------------
// Ladder serialisation
// ---------------------------------------------------------------------------

/// Writes one sequence's merge-probability ladder.
///
/// Text block: a header line `N L`, then `L` lines of `N-1`
/// space-separated floats (lowest layer first). Floats use Rust's
/// shortest round-trip formatting, so reading back is exact.
pub fn write_ladder<W: Write>(w: &mut W, n: usize, ladder: &[Vec<f64>]) -> Result<()> {
    writeln!(w, "{} {}", n, ladder.len())?;
    for row in ladder {
        if row.len() + 1 != n && !(n == 1 && row.is_empty()) {
            return Err(Error::Shape {
                op: "write_ladder",
                lhs: vec![n],
                rhs: vec![row.len()],
            });
        }
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads every ladder block written by [`write_ladder`].
pub fn read_ladders<R: BufRead>(r: R) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    let mut lines = r.lines();
    let mut out = Vec::new();
    while let Some(header) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(n)), Some(Ok(layers)), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("bad ladder header {header:?}")));
        };
        let mut ladder = Vec::with_capacity(layers);
        for _ in 0..layers {
            let line = lines.next().ok_or_else(|| Error::Format("truncated ladder".into()))??;
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad float {t:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() + 1 != n && !(n <= 1 && row.is_empty()) {
                return Err(Error::Format(format!("ladder row has {} values for N = {n}", row.len())));
            }
            ladder.push(row);
        }
        out.push((n, ladder));
    }
    Ok(out)
}
