//! Exact decomposition of logits into per-source contributions.
//!
//! Unrolling the affine recurrence gives
//! `l_t = b_ro + sum_{s=0..t} kappa_s^t` with
//! `kappa_s^t = W_ro (W_{x_t} ... W_{x_{s+1}}) b_{x_s}`,
//! where source `s = 0` is the learned initial state (`b_{x_0} = h0`) and
//! `kappa_t^t = W_ro b_{x_t}`. Source `s >= 1` is the token `tokens[s - 1]`.
//! Contributions are computed by pushing the injected bias vectors through
//! each new transition, never by forming matrix products.

use nalgebra::{DMatrix, DVector};

use crate::data::{positions_in_word, word_spans};
use crate::error::{IsanError, Result};
use crate::model::{log_sum_exp, softmax, ModelParams, PredictionFrame};
use crate::stats::median;
use crate::vocab::Vocab;

/// Longest sequence [`kappa`] stores; use [`KappaRows`] beyond this.
pub const MAX_KAPPA_LEN: usize = 512;

/// Streams the contribution rows `t = 0, 1, ..., T`. Row `t` is a `K x (t+1)`
/// matrix whose column `s` is `kappa_s^t`. Memory is `O(T n)` for the
/// propagated vectors plus the row being returned.
pub struct KappaRows<'a> {
    params: &'a ModelParams,
    tokens: &'a [usize],
    /// Column `s` holds `(W_{x_t} ... W_{x_{s+1}}) b_{x_s}` for the current `t`.
    vectors: DMatrix<f64>,
    t: usize,
}

impl<'a> KappaRows<'a> {
    pub fn new(params: &'a ModelParams, tokens: &'a [usize]) -> Result<Self> {
        for &x in tokens {
            params.vocab.check(x)?;
        }
        Ok(Self {
            params,
            tokens,
            vectors: DMatrix::from_column_slice(params.hidden_dim(), 1, params.h0.as_slice()),
            t: 0,
        })
    }
}

impl Iterator for KappaRows<'_> {
    type Item = (usize, DMatrix<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.t > self.tokens.len() {
            return None;
        }
        if self.t > 0 {
            let x = self.tokens[self.t - 1];
            let mut grown = (self.params.transition(x) * &self.vectors).insert_column(self.t, 0.0);
            grown.set_column(self.t, &self.params.biases[x]);
            self.vectors = grown;
        }
        let row = &self.params.readout.weight * &self.vectors;
        let t = self.t;
        self.t += 1;
        Some((t, row))
    }
}

/// All contributions `kappa_s^t` for `0 <= s <= t <= T`, stored lower-triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct KappaTensor {
    vocab: Vocab,
    tokens: Vec<usize>,
    k: usize,
    data: Vec<f64>,
    readout_bias: DVector<f64>,
}

fn row_offset(t: usize) -> usize {
    t * (t + 1) / 2
}

/// Full contribution tensor for at most [`MAX_KAPPA_LEN`] tokens.
pub fn kappa(params: &ModelParams, tokens: &[usize]) -> Result<KappaTensor> {
    kappa_capped(params, tokens, MAX_KAPPA_LEN)
}

pub fn kappa_capped(params: &ModelParams, tokens: &[usize], cap: usize) -> Result<KappaTensor> {
    if tokens.is_empty() {
        return Err(IsanError::Argument("kappa needs at least one token".into()));
    }
    if tokens.len() > cap {
        return Err(IsanError::Argument(format!(
            "{} tokens exceed the stored-kappa cap of {cap}; stream rows with KappaRows",
            tokens.len()
        )));
    }
    let k = params.output_dim();
    let t_len = tokens.len();
    let mut data = Vec::with_capacity(row_offset(t_len + 1) * k);
    for (_, row) in KappaRows::new(params, tokens)? {
        data.extend_from_slice(row.as_slice());
    }
    Ok(KappaTensor {
        vocab: params.vocab.clone(),
        tokens: tokens.to_vec(),
        k,
        data,
        readout_bias: params.readout.bias.clone(),
    })
}

impl KappaTensor {
    /// Number of tokens `T`; rows run `0..=T`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn output_dim(&self) -> usize {
        self.k
    }

    pub fn readout_bias(&self) -> &DVector<f64> {
        &self.readout_bias
    }

    /// Token injected at source `s`, or `None` for the initial state.
    pub fn source_token(&self, s: usize) -> Option<usize> {
        s.checked_sub(1).map(|i| self.tokens[i])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(IsanError::Index {
                index: t,
                len: self.len() + 1,
            });
        }
        Ok(())
    }

    /// `kappa_s^t`.
    pub fn get(&self, s: usize, t: usize) -> Result<&[f64]> {
        self.check_t(t)?;
        if s > t {
            return Err(IsanError::Index { index: s, len: t + 1 });
        }
        let start = (row_offset(t) + s) * self.k;
        Ok(&self.data[start..start + self.k])
    }

    /// `b_ro + sum_{s <= t} kappa_s^t`.
    pub fn reconstruct_logits(&self, t: usize) -> Result<DVector<f64>> {
        self.masked_sum(&SourceMask::All, t)
    }

    fn masked_sum(&self, mask: &SourceMask, t: usize) -> Result<DVector<f64>> {
        self.check_t(t)?;
        let mut l = self.readout_bias.clone();
        for s in 0..=t {
            if mask.keeps(s, self.source_token(s), t) {
                for (li, v) in l.iter_mut().zip(self.get(s, t)?) {
                    *li += v;
                }
            }
        }
        Ok(l)
    }
}

/// Free function form of [`KappaTensor::reconstruct_logits`].
pub fn reconstruct_logits(kappa: &KappaTensor, t: usize) -> Result<DVector<f64>> {
    kappa.reconstruct_logits(t)
}

/// Which sources `s` feed a prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceMask {
    All,
    Nothing,
    /// Keep exactly these source indices (0 is the initial state).
    Positions(Vec<usize>),
    /// Keep sources whose token is flagged in `keep` (indexed by token);
    /// `initial` decides the initial state.
    Tokens { keep: Vec<bool>, initial: bool },
    /// Keep the `n` most recent sources, `t - n < s <= t`.
    MostRecent(usize),
}

impl SourceMask {
    /// Keep only sources that inject `token`.
    pub fn only_token(k: usize, token: usize) -> Self {
        let mut keep = vec![false; k];
        keep[token] = true;
        SourceMask::Tokens { keep, initial: false }
    }

    /// Drop sources that inject `token`; the initial state stays.
    pub fn without_token(k: usize, token: usize) -> Self {
        let mut keep = vec![true; k];
        keep[token] = false;
        SourceMask::Tokens { keep, initial: true }
    }

    /// Drop the sources in `positions`.
    pub fn without_positions(t_len: usize, positions: &[usize]) -> Self {
        SourceMask::Positions((0..=t_len).filter(|s| !positions.contains(s)).collect())
    }

    pub fn keeps(&self, s: usize, token: Option<usize>, t: usize) -> bool {
        match self {
            SourceMask::All => true,
            SourceMask::Nothing => false,
            SourceMask::Positions(p) => p.contains(&s),
            SourceMask::Tokens { keep, initial } => match token {
                None => *initial,
                Some(x) => keep.get(x).copied().unwrap_or(false),
            },
            SourceMask::MostRecent(n) => s + n > t,
        }
    }

    /// Whether the mask depends only on the source (not on `t`).
    fn is_static(&self) -> bool {
        !matches!(self, SourceMask::MostRecent(_))
    }
}

/// Logits and probabilities from the sources that pass `mask` plus `b_ro`.
pub fn masked_logits(kappa: &KappaTensor, mask: &SourceMask, t: usize) -> Result<PredictionFrame> {
    let logits = kappa.masked_sum(mask, t)?;
    let probs = softmax(&logits);
    Ok(PredictionFrame { logits, probs })
}

/// Logits after every token computed from masked sources, for masks that do
/// not depend on `t`: `g_t = W_{x_t} g_{t-1} + [x_t kept] b_{x_t}`.
/// Entry `t - 1` holds the logits after token `t`.
pub fn masked_trajectory_logits(params: &ModelParams, tokens: &[usize], mask: &SourceMask) -> Result<Vec<DVector<f64>>> {
    if !mask.is_static() {
        return Err(IsanError::Argument("masked propagation needs a time-independent mask".into()));
    }
    let n = params.hidden_dim();
    let mut g = if mask.keeps(0, None, 0) {
        params.h0.clone()
    } else {
        DVector::zeros(n)
    };
    let mut next = DVector::zeros(n);
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &x) in tokens.iter().enumerate() {
        params.vocab.check(x)?;
        if mask.keeps(i + 1, Some(x), i + 1) {
            next.copy_from(&params.biases[x]);
        } else {
            next.fill(0.0);
        }
        next.gemv(1.0, params.transition(x), &g, 1.0);
        std::mem::swap(&mut g, &mut next);
        out.push(params.readout.apply(&g)?);
    }
    Ok(out)
}

/// Visit every step `t = 1..=T` with the contributions of the most recent
/// `width` sources: `f(t, C, first)` where column `j` of `C` is
/// `kappa_{first + j}^t` (oldest first).
fn for_each_window(
    params: &ModelParams,
    tokens: &[usize],
    width: usize,
    mut f: impl FnMut(usize, &DMatrix<f64>, usize) -> Result<()>,
) -> Result<()> {
    let n = params.hidden_dim();
    let mut vectors = DMatrix::from_column_slice(n, 1, params.h0.as_slice());
    let mut first = 0usize;
    for (i, &x) in tokens.iter().enumerate() {
        params.vocab.check(x)?;
        let t = i + 1;
        let mut moved = params.transition(x) * &vectors;
        let m = moved.ncols();
        moved = moved.insert_column(m, 0.0);
        moved.set_column(m, &params.biases[x]);
        if moved.ncols() > width {
            let drop = moved.ncols() - width;
            moved = moved.remove_columns(0, drop);
            first += drop;
        }
        vectors = moved;
        let c = &params.readout.weight * &vectors;
        f(t, &c, first)?;
    }
    Ok(())
}

/// Bits per character when each prediction sees only `b_ro` and the
/// contributions of the `n` most recent sources, for every `n` in
/// `0..=max_n`. Predictions are scored as in
/// [`evaluate_bpc`](crate::model::evaluate_bpc): the state after token `t`
/// predicts token `t + 1`.
pub fn truncated_history_curve(params: &ModelParams, tokens: &[usize], max_n: usize) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(IsanError::Argument("need at least 2 tokens to score".into()));
    }
    let mut totals = vec![0.0; max_n + 1];
    let scored = &tokens[..tokens.len() - 1];
    let b = &params.readout.bias;
    let base_nll = |target: usize| log_sum_exp(b.as_slice()) - b[target];
    if max_n == 0 {
        let nll: f64 = tokens[1..].iter().map(|&y| base_nll(y)).sum();
        return Ok(vec![nll / ((tokens.len() - 1) as f64 * std::f64::consts::LN_2)]);
    }
    let mut l = b.clone();
    for_each_window(params, scored, max_n, |t, c, _| {
        let target = tokens[t];
        totals[0] += base_nll(target);
        l.copy_from(b);
        let m = c.ncols();
        for n in 1..=max_n {
            if n <= m {
                l += c.column(m - n);
            }
            totals[n] += log_sum_exp(l.as_slice()) - l[target];
        }
        Ok(())
    })?;
    let denom = (tokens.len() - 1) as f64 * std::f64::consts::LN_2;
    Ok(totals.into_iter().map(|v| v / denom).collect())
}

/// Bits per character with only the `n` most recent sources.
pub fn truncated_history_bpc(params: &ModelParams, tokens: &[usize], n: usize) -> Result<f64> {
    let n_eff = n.min(tokens.len());
    Ok(truncated_history_curve(params, tokens, n_eff)?[n_eff])
}

/// Mean contribution norm per lag.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySummary {
    /// Mean `||kappa_s^t||_2` over pairs with `t - s = lag`, index = lag.
    pub mean_norm: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Average contribution norm as a function of lag, uniformly over all
/// `(s, t)` pairs with `1 <= s <= t <= T`. The initial-state source is excluded.
pub fn decay_curve(params: &ModelParams, tokens: &[usize], max_lag: usize) -> Result<DecaySummary> {
    if max_lag == 0 {
        return Err(IsanError::Argument("max_lag must be at least 1".into()));
    }
    let mut sums = vec![0.0; max_lag + 1];
    let mut counts = vec![0usize; max_lag + 1];
    for_each_window(params, tokens, max_lag + 1, |t, c, first| {
        for (j, col) in c.column_iter().enumerate() {
            let s = first + j;
            if s == 0 {
                continue;
            }
            let lag = t - s;
            sums[lag] += col.norm();
            counts[lag] += 1;
        }
        Ok(())
    })?;
    let mean_norm = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    Ok(DecaySummary { mean_norm, counts })
}

/// Source selection for [`position_in_word_ce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    All,
    /// Keep only contributions injected by spaces.
    OnlySpace,
    /// Zero the contributions injected by spaces.
    WithoutSpace,
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::OnlySpace => "only_space",
            Self::WithoutSpace => "without_space",
        })
    }
}

impl std::str::FromStr for PositionMode {
    type Err = IsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "only-space" | "only_space" => Ok(Self::OnlySpace),
            "without-space" | "without_space" => Ok(Self::WithoutSpace),
            other => Err(IsanError::Argument(format!("unknown position mode {other:?}"))),
        }
    }
}

/// Median cross entropy (bits) at one word position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionCe {
    pub position: usize,
    pub median_bits: f64,
    pub count: usize,
}

/// Median `-log2 p(true char)` grouped by the predicted character's index in
/// its word span (leading space = 0), under the chosen source mask.
pub fn position_in_word_ce(params: &ModelParams, tokens: &[usize], mode: PositionMode) -> Result<Vec<PositionCe>> {
    let space = params
        .vocab
        .space()
        .ok_or_else(|| IsanError::Argument("position analysis needs a vocabulary with a space".into()))?;
    if tokens.len() < 2 {
        return Err(IsanError::Argument("need at least 2 tokens to score".into()));
    }
    let k = params.vocab_size();
    let mask = match mode {
        PositionMode::All => SourceMask::All,
        PositionMode::OnlySpace => SourceMask::only_token(k, space),
        PositionMode::WithoutSpace => SourceMask::without_token(k, space),
    };
    let logits = masked_trajectory_logits(params, &tokens[..tokens.len() - 1], &mask)?;
    let positions = positions_in_word(tokens, space);
    let mut by_pos: Vec<Vec<f64>> = Vec::new();
    for (i, l) in logits.iter().enumerate() {
        let target = tokens[i + 1];
        let bits = (log_sum_exp(l.as_slice()) - l[target]) / std::f64::consts::LN_2;
        let p = positions[i + 1];
        if by_pos.len() <= p {
            by_pos.resize(p + 1, Vec::new());
        }
        by_pos[p].push(bits);
    }
    Ok(by_pos
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(position, v)| PositionCe {
            position,
            median_bits: median(&v).expect("nonempty"),
            count: v.len(),
        })
        .collect())
}

/// Contributions summed over word spans.
#[derive(Clone, Debug, PartialEq)]
pub struct WordContributions {
    /// Token ranges of each word (source `s` is token `s - 1`).
    pub spans: Vec<std::ops::Range<usize>>,
    pub words: Vec<String>,
    /// `vectors[w][t]`: summed contribution of word `w` at step `t`
    /// (sources after `t` are not yet injected and contribute nothing).
    pub vectors: Vec<Vec<DVector<f64>>>,
    /// `norms[w][t] = ||vectors[w][t]||_2`.
    pub norms: Vec<Vec<f64>>,
}

/// Aggregate `kappa_s^t` over each word span, the leading space included.
pub fn word_contributions(kappa: &KappaTensor) -> Result<WordContributions> {
    let space = kappa
        .vocab()
        .space()
        .ok_or_else(|| IsanError::Argument("word aggregation needs a vocabulary with a space".into()))?;
    let spans = word_spans(kappa.tokens(), space);
    let t_len = kappa.len();
    let k = kappa.output_dim();
    let mut vectors = Vec::with_capacity(spans.len());
    let mut norms = Vec::with_capacity(spans.len());
    let mut words = Vec::with_capacity(spans.len());
    for span in &spans {
        words.push(kappa.vocab().decode(&kappa.tokens()[span.clone()])?);
        let mut per_t = Vec::with_capacity(t_len + 1);
        for t in 0..=t_len {
            let mut v = DVector::zeros(k);
            for i in span.clone() {
                let s = i + 1;
                if s <= t {
                    for (vi, c) in v.iter_mut().zip(kappa.get(s, t)?) {
                        *vi += c;
                    }
                }
            }
            per_t.push(v);
        }
        norms.push(per_t.iter().map(|v| v.norm()).collect());
        vectors.push(per_t);
    }
    Ok(WordContributions {
        spans,
        words,
        vectors,
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate_bpc, logits, run, Mode};
    use crate::testing::{random_model, random_tokens, rel_err};

    #[test]
    fn single_step_from_zero_state() {
        let mut p = random_model(Mode::Switched, 3, 4, 4, 1);
        p.h0.fill(0.0);
        let kap = kappa(&p, &[2]).unwrap();
        let expected = &p.readout.weight * &p.biases[2];
        assert!(rel_err(&DVector::from_column_slice(kap.get(1, 1).unwrap()), &expected) < 1e-15);
        let l = kap.reconstruct_logits(1).unwrap();
        let direct = logits(&p, run(&p, &[2]).unwrap().last()).unwrap();
        assert!(rel_err(&l, &direct) < 1e-14);
    }

    #[test]
    fn memoryless_limit() {
        let mut p = random_model(Mode::Switched, 3, 4, 4, 2);
        p.transitions.iter_mut().for_each(|w| w.fill(0.0));
        let kap = kappa(&p, &[0, 1, 2, 3]).unwrap();
        for t in 1..=4 {
            for s in 0..t {
                assert!(kap.get(s, t).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn matches_explicit_product_chain() {
        let p = random_model(Mode::Switched, 3, 5, 5, 3);
        let tokens = random_tokens(5, 6, 4);
        let kap = kappa(&p, &tokens).unwrap();
        let traj = run(&p, &tokens).unwrap();
        for t in 0..=tokens.len() {
            for s in 0..=t {
                let mut prod = DMatrix::<f64>::identity(3, 3);
                for sp in s + 1..=t {
                    prod = p.transition(tokens[sp - 1]) * prod;
                }
                let b = if s == 0 { p.h0.clone() } else { p.biases[tokens[s - 1]].clone() };
                let oracle = &p.readout.weight * (prod * b);
                let got = DVector::from_column_slice(kap.get(s, t).unwrap());
                assert!((got - &oracle).amax() <= 1e-13 * oracle.amax().max(1.0));
            }
            let direct = logits(&p, &traj.states[t]).unwrap();
            assert!(rel_err(&kap.reconstruct_logits(t).unwrap(), &direct) < 1e-12);
        }
    }

    #[test]
    fn masks_all_and_nothing() {
        let p = random_model(Mode::Switched, 4, 6, 6, 5);
        let tokens = random_tokens(6, 10, 6);
        let kap = kappa(&p, &tokens).unwrap();
        let all = masked_logits(&kap, &SourceMask::All, 7).unwrap();
        assert_eq!(all.logits, kap.reconstruct_logits(7).unwrap());
        let none = masked_logits(&kap, &SourceMask::Nothing, 7).unwrap();
        assert_eq!(none.logits, p.readout.bias);
    }

    #[test]
    fn truncated_history_limits() {
        let p = random_model(Mode::Switched, 4, 6, 6, 7);
        let tokens = random_tokens(6, 30, 8);
        let full = evaluate_bpc(&p, &tokens).unwrap();
        let curve = truncated_history_curve(&p, &tokens, 30).unwrap();
        assert!((curve[30] - full).abs() < 1e-12);
        assert!((truncated_history_bpc(&p, &tokens, 100).unwrap() - full).abs() < 1e-12);
        let b = &p.readout.bias;
        let lse = log_sum_exp(b.as_slice());
        let zero: f64 = tokens[1..].iter().map(|&y| lse - b[y]).sum::<f64>()
            / (29.0 * std::f64::consts::LN_2);
        assert!((curve[0] - zero).abs() < 1e-12);
        assert!((truncated_history_bpc(&p, &tokens, 0).unwrap() - zero).abs() < 1e-12);
        // each truncation level agrees with the stored tensor
        let kap = kappa(&p, &tokens).unwrap();
        let n = 3;
        let mut total = 0.0;
        for t in 1..tokens.len() {
            let l = masked_logits(&kap, &SourceMask::MostRecent(n), t).unwrap().logits;
            total += log_sum_exp(l.as_slice()) - l[tokens[t]];
        }
        let expected = total / (29.0 * std::f64::consts::LN_2);
        assert!((curve[n] - expected).abs() < 1e-12);
    }

    #[test]
    fn geometric_decay_closed_form() {
        let mut p = random_model(Mode::Switched, 3, 4, 4, 9);
        let b = DVector::from_vec(vec![0.4, -1.0, 0.7]);
        for x in 0..4 {
            p.transitions[x] = DMatrix::identity(3, 3) * 0.5;
            p.biases[x] = b.clone();
        }
        let tokens = random_tokens(4, 50, 10);
        let d = decay_curve(&p, &tokens, 6).unwrap();
        let base = (&p.readout.weight * &b).norm();
        for lag in 0..=6 {
            assert!((d.mean_norm[lag] - 0.5f64.powi(lag as i32) * base).abs() < 1e-12 * base);
            assert_eq!(d.counts[lag], 50 - lag);
        }
    }

    #[test]
    fn word_partition_reconstructs_logits() {
        let p = random_model(Mode::Switched, 5, 27, 27, 11);
        let tokens = p.vocab.encode("the cat a dog").unwrap();
        let kap = kappa(&p, &tokens).unwrap();
        let w = word_contributions(&kap).unwrap();
        assert_eq!(w.words, vec!["the", " cat", " a", " dog"]);
        for t in 0..=tokens.len() {
            let mut l = kap.readout_bias().clone() + DVector::from_column_slice(kap.get(0, t).unwrap());
            for word in &w.vectors {
                l += &word[t];
            }
            assert!(rel_err(&l, &kap.reconstruct_logits(t).unwrap()) < 1e-12);
        }
        // " a" is two characters; "a" alone at the start would be a single source
        let single = kappa(&p, &p.vocab.encode("a").unwrap()).unwrap();
        let ws = word_contributions(&single).unwrap();
        assert_eq!(ws.vectors[0][1].as_slice(), single.get(1, 1).unwrap());
    }

    #[test]
    fn position_ce_modes() {
        let p = random_model(Mode::Switched, 5, 27, 27, 12);
        let tokens = p.vocab.encode("abcdefg hij klmnop qrs").unwrap();
        let all = position_in_word_ce(&p, &tokens, PositionMode::All).unwrap();
        // unmasked medians equal the per-position medians of the plain model
        let traj = run(&p, &tokens).unwrap();
        let positions = positions_in_word(&tokens, 0);
        for row in &all {
            let v: Vec<f64> = (1..tokens.len())
                .filter(|&i| positions[i] == row.position)
                .map(|i| {
                    let l = logits(&p, &traj.states[i]).unwrap();
                    (log_sum_exp(l.as_slice()) - l[tokens[i]]) / std::f64::consts::LN_2
                })
                .collect();
            assert!((median(&v).unwrap() - row.median_bits).abs() < 1e-12);
        }
        // no spaces at all: only-space sees nothing but b_ro
        let t2 = p.vocab.encode("abcabcabc").unwrap();
        let only = position_in_word_ce(&p, &t2, PositionMode::OnlySpace).unwrap();
        let b = &p.readout.bias;
        let lse = log_sum_exp(b.as_slice());
        for row in only {
            let v: Vec<f64> = (1..t2.len())
                .filter(|&i| i == row.position)
                .map(|i| (lse - b[t2[i]]) / std::f64::consts::LN_2)
                .collect();
            assert!((median(&v).unwrap() - row.median_bits).abs() < 1e-12);
        }
    }
}
