//! Corpora, lane batching, the bracket-counting task and n-gram statistics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IsanError, Result};
use crate::model::{softmax, ModelParams};
use crate::stats::pearson;
use crate::vocab::Vocab;

/// Character corpus split 90/5/5 into contiguous train, validation and test parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = IsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(IsanError::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Lowercase and map everything outside `a`..`z` to space.
pub fn normalize_text(text: &str) -> String {
    let vocab = Vocab::text();
    text.chars().map(|c| vocab.normalize_char(c)).collect()
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let vocab = Vocab::text();
        let tokens = vocab.encode(text)?;
        Self::from_tokens(vocab, tokens)
    }

    pub fn from_tokens(vocab: Vocab, tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(IsanError::Argument("corpus is empty".into()));
        }
        let len = tokens.len();
        let n_train = len * 90 / 100;
        let n_val = len * 5 / 100;
        let mut train = tokens;
        let mut validation = train.split_off(n_train);
        let test = validation.split_off(n_val);
        Ok(Self {
            vocab,
            train,
            validation,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read a text file, normalise it, and split it. `max_chars` keeps only a prefix.
pub fn load_text_corpus(path: &Path, max_chars: Option<usize>) -> Result<Corpus> {
    let raw = std::fs::read(path).map_err(|e| IsanError::io(path, e))?;
    let text = String::from_utf8_lossy(&raw);
    let text: String = match max_chars {
        Some(m) => text.chars().take(m).collect(),
        None => text.into_owned(),
    };
    if text.is_empty() {
        return Err(IsanError::Argument(format!("{} is empty", path.display())));
    }
    Corpus::from_text(&text)
}

/// `batch_size` contiguous lanes cut into consecutive `seq_len` segments.
///
/// Lane `i` starts at `i * floor(len / batch_size)`. Batch `j` holds segment
/// `j` of every lane, so a lane's segments follow each other in the text and a
/// hidden state can be carried from one batch to the next. The tail of each
/// lane that does not fill a segment is dropped.
#[derive(Clone, Copy, Debug)]
pub struct LaneBatches<'a> {
    data: &'a [usize],
    seq_len: usize,
    lanes: usize,
    lane_len: usize,
}

pub fn batches(split: &[usize], seq_len: usize, batch_size: usize) -> Result<LaneBatches<'_>> {
    if seq_len == 0 || batch_size == 0 {
        return Err(IsanError::Argument("seq_len and batch_size must be positive".into()));
    }
    if split.len() < seq_len * batch_size {
        return Err(IsanError::Argument(format!(
            "split of {} tokens is shorter than seq_len * batch_size = {}",
            split.len(),
            seq_len * batch_size
        )));
    }
    Ok(LaneBatches {
        data: split,
        seq_len,
        lanes: batch_size,
        lane_len: split.len() / batch_size,
    })
}

impl<'a> LaneBatches<'a> {
    /// Number of batches (segments per lane).
    pub fn len(&self) -> usize {
        self.lane_len / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn lane_start(&self, lane: usize) -> usize {
        lane * self.lane_len
    }

    /// Segment `index` of every lane.
    pub fn batch(&self, index: usize) -> Vec<&'a [usize]> {
        (0..self.lanes)
            .map(|lane| {
                let start = self.lane_start(lane) + index * self.seq_len;
                &self.data[start..start + self.seq_len]
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<&'a [usize]>> + '_ {
        (0..self.len()).map(move |i| self.batch(i))
    }
}

/// Word spans over token positions: each span starts at a space (or at the
/// start of the stream) and runs up to the next space, so `_annual` is one word.
pub fn word_spans(tokens: &[usize], space: usize) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &x) in tokens.iter().enumerate() {
        if x == space && i > start {
            spans.push(start..i);
            start = i;
        }
    }
    if start < tokens.len() {
        spans.push(start..tokens.len());
    }
    spans
}

/// Index of each token inside its word span (the leading space is 0).
pub fn positions_in_word(tokens: &[usize], space: usize) -> Vec<usize> {
    let mut out = vec![0; tokens.len()];
    for span in word_spans(tokens, space) {
        for (j, i) in span.enumerate() {
            out[i] = j;
        }
    }
    out
}

/// Saturation level of the bracket counters.
pub const PAREN_MAX: usize = 5;
pub const PAREN_LEVELS: usize = PAREN_MAX + 1;
/// Width of the 2-hot count code.
pub const PAREN_CODE_DIM: usize = 2 * PAREN_LEVELS;
/// Default probability of the noise symbol.
pub const PAREN_NOISE: f64 = 0.2;

const OPEN_ROUND: usize = 0;
const CLOSE_ROUND: usize = 1;
const OPEN_SQUARE: usize = 2;
const CLOSE_SQUARE: usize = 3;

/// Counter update for one token of the bracket vocabulary.
pub fn paren_update(counts: [usize; 2], token: usize) -> [usize; 2] {
    let [a, b] = counts;
    match token {
        OPEN_ROUND => [(a + 1).min(PAREN_MAX), b],
        CLOSE_ROUND => [a.saturating_sub(1), b],
        OPEN_SQUARE => [a, (b + 1).min(PAREN_MAX)],
        CLOSE_SQUARE => [a, b.saturating_sub(1)],
        _ => [a, b],
    }
}

/// Counts after each token, starting from `(0, 0)`.
pub fn paren_counts(tokens: &[usize]) -> Vec<[usize; 2]> {
    let mut c = [0, 0];
    tokens
        .iter()
        .map(|&x| {
            c = paren_update(c, x);
            c
        })
        .collect()
}

/// One-hot level of each counter, concatenated.
pub fn two_hot(counts: [usize; 2]) -> DVector<f64> {
    let mut v = DVector::zeros(PAREN_CODE_DIM);
    v[counts[0].min(PAREN_MAX)] = 1.0;
    v[PAREN_LEVELS + counts[1].min(PAREN_MAX)] = 1.0;
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParenSample {
    pub tokens: Vec<usize>,
    /// Counter values after each token.
    pub counts: Vec<[usize; 2]>,
}

impl ParenSample {
    pub fn new(tokens: Vec<usize>) -> Self {
        let counts = paren_counts(&tokens);
        Self { tokens, counts }
    }

    /// Counts before each token (the first entry is `(0, 0)`).
    pub fn lagged_counts(&self) -> Vec<[usize; 2]> {
        std::iter::once([0, 0])
            .chain(self.counts.iter().copied())
            .take(self.tokens.len())
            .collect()
    }

    /// Per-step training targets: the 2-hot code of the lagged counts.
    pub fn targets(&self) -> Vec<DVector<f64>> {
        self.lagged_counts().into_iter().map(two_hot).collect()
    }

    /// Line format: tokens, a tab, then `a:b` count pairs separated by commas.
    pub fn to_line(&self) -> String {
        let vocab = Vocab::paren();
        let text = vocab.decode(&self.tokens).expect("paren tokens are in range");
        let counts: Vec<String> = self.counts.iter().map(|[a, b]| format!("{a}:{b}")).collect();
        format!("{text}\t{}", counts.join(","))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let (text, counts) = line
            .split_once('\t')
            .ok_or_else(|| IsanError::Argument("missing tab in paren line".into()))?;
        let tokens = Vocab::paren().encode(text)?;
        let sample = Self::new(tokens);
        let parsed = counts
            .split(',')
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| IsanError::Argument(format!("bad count pair {pair:?}")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| IsanError::Argument(format!("bad count {s:?}: {e}")))
                };
                Ok([parse(a)?, parse(b)?])
            })
            .collect::<Result<Vec<_>>>()?;
        if parsed != sample.counts {
            return Err(IsanError::Argument(
                "stored counts disagree with the token string".into(),
            ));
        }
        Ok(sample)
    }
}

/// `n_samples` i.i.d. bracket streams: each symbol is the noise symbol `a`
/// with probability `p_noise`, otherwise a uniformly chosen bracket.
pub fn gen_paren(n_samples: usize, length: usize, p_noise: f64, seed: u64) -> Result<Vec<ParenSample>> {
    if length == 0 {
        return Err(IsanError::Argument("paren length must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(IsanError::Argument(format!("p_noise {p_noise} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| {
            let tokens = (0..length)
                .map(|_| {
                    if rng.random::<f64>() < p_noise {
                        4
                    } else {
                        rng.random_range(0..4)
                    }
                })
                .collect();
            ParenSample::new(tokens)
        })
        .collect())
}

/// Empirical unigram and bigram distributions of a token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramStats {
    pub unigram_counts: Vec<u64>,
    /// `bigram_counts[(a, b)]`: occurrences of `a` followed by `b`.
    pub bigram_counts: DMatrix<f64>,
    pub unigram: DVector<f64>,
    /// Add-one smoothed `P(next | current)`, one row per current symbol.
    pub bigram: DMatrix<f64>,
}

pub fn empirical_ngrams(tokens: &[usize], k: usize) -> Result<NgramStats> {
    if tokens.is_empty() {
        return Err(IsanError::Argument("n-gram statistics need a nonempty split".into()));
    }
    let mut unigram_counts = vec![0u64; k];
    for &x in tokens {
        if x >= k {
            return Err(IsanError::Index { index: x, len: k });
        }
        unigram_counts[x] += 1;
    }
    let mut bigram_counts = DMatrix::zeros(k, k);
    for w in tokens.windows(2) {
        bigram_counts[(w[0], w[1])] += 1.0;
    }
    let total = tokens.len() as f64;
    let unigram = DVector::from_iterator(k, unigram_counts.iter().map(|&c| c as f64 / total));
    let mut bigram = bigram_counts.add_scalar(1.0);
    for mut row in bigram.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    Ok(NgramStats {
        unigram_counts,
        bigram_counts,
        unigram,
        bigram,
    })
}

impl NgramStats {
    pub fn k(&self) -> usize {
        self.unigram.len()
    }

    /// Unsmoothed `P(next | current)`; rows of unseen symbols are all zero.
    pub fn bigram_unsmoothed(&self) -> DMatrix<f64> {
        let mut m = self.bigram_counts.clone();
        for mut row in m.row_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        m
    }
}

/// Whether correlations are taken between probabilities or their logarithms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbSpace {
    #[default]
    Probability,
    /// Natural logs; entries where either side is zero are left out.
    Log,
}

/// Pearson correlation of two distributions; `None` when undefined.
pub fn distribution_correlation(a: &[f64], b: &[f64], space: ProbSpace) -> Option<f64> {
    match space {
        ProbSpace::Probability => pearson(a, b),
        ProbSpace::Log => {
            let (la, lb): (Vec<f64>, Vec<f64>) = a
                .iter()
                .zip(b)
                .filter(|(x, y)| **x > 0.0 && **y > 0.0)
                .map(|(x, y)| (x.ln(), y.ln()))
                .unzip();
            pearson(&la, &lb)
        }
    }
}

fn check_stats(params: &ModelParams, stats: &NgramStats) -> Result<()> {
    if stats.k() != params.output_dim() || stats.k() != params.vocab_size() {
        return Err(IsanError::shape("n-gram statistics", params.output_dim(), stats.k()));
    }
    Ok(())
}

/// Correlation of `softmax(b_ro)` with the unigram distribution.
pub fn compare_unigram(params: &ModelParams, stats: &NgramStats, space: ProbSpace) -> Result<Option<f64>> {
    check_stats(params, stats)?;
    let p = softmax(&params.readout.bias);
    Ok(distribution_correlation(p.as_slice(), stats.unigram.as_slice(), space))
}

/// One row of the bigram comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramRow {
    pub symbol: char,
    /// `softmax(W_ro b_x + b_ro)` against `P(. | x)`.
    pub model: Option<f64>,
    /// `P(.)` against `P(. | x)`.
    pub unigram_baseline: Option<f64>,
}

pub fn compare_bigram(params: &ModelParams, stats: &NgramStats, space: ProbSpace) -> Result<Vec<BigramRow>> {
    check_stats(params, stats)?;
    let mut rows = Vec::with_capacity(stats.k());
    for x in 0..stats.k() {
        let l = params.readout.apply(&params.biases[x])?;
        let p = softmax(&l);
        let cond: Vec<f64> = stats.bigram.row(x).iter().copied().collect();
        rows.push(BigramRow {
            symbol: params.vocab.symbol(x)?,
            model: distribution_correlation(p.as_slice(), &cond, space),
            unigram_baseline: distribution_correlation(stats.unigram.as_slice(), &cond, space),
        });
    }
    Ok(rows)
}

/// Means of the defined model and baseline correlations.
pub fn bigram_means(rows: &[BigramRow]) -> (Option<f64>, Option<f64>) {
    let mean = |f: &dyn Fn(&BigramRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        crate::stats::mean(&v)
    };
    (mean(&|r| r.model), mean(&|r| r.unigram_baseline))
}
