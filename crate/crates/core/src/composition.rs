//! Precomposed affine maps for whole strings and word-level fast inference.
//!
//! Composing affine maps gives an affine map, so the effect of a word on the
//! hidden state can be stored once and applied with a single matrix-vector
//! product instead of one product per character.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::data::word_spans;
use crate::error::{IsanError, Result};
use crate::model::ModelParams;
use crate::stats::median;

/// Maximum relative disagreement tolerated when a table entry is re-verified.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

/// The map applying `first`, then `then`.
pub fn compose(first: &AffineMap, then: &AffineMap) -> Result<AffineMap> {
    first.then(then)
}

/// Left-to-right fold of the tokens' maps.
pub fn compose_string(params: &ModelParams, tokens: &[usize]) -> Result<AffineMap> {
    let (&head, rest) = tokens
        .split_first()
        .ok_or_else(|| IsanError::Argument("cannot compose an empty string".into()))?;
    let mut acc = params.token_map(head)?;
    for &x in rest {
        params.vocab.check(x)?;
        let w = params.transition(x);
        let mut bias = params.biases[x].clone();
        bias.gemv(1.0, w, &acc.bias, 1.0);
        acc = AffineMap {
            weight: w * &acc.weight,
            bias,
        };
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TablePolicy {
    /// The `k` most frequent words (leading space included).
    TopWords { k: usize },
    /// Every string of length `2..=max_len` seen in the corpus.
    NGrams { max_len: usize },
}

impl Default for TablePolicy {
    fn default() -> Self {
        TablePolicy::TopWords { k: 2000 }
    }
}

impl std::fmt::Display for TablePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TablePolicy::TopWords { k } => write!(f, "top-words:{k}"),
            TablePolicy::NGrams { max_len } => write!(f, "ngrams:{max_len}"),
        }
    }
}

impl std::str::FromStr for TablePolicy {
    type Err = IsanError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || IsanError::Argument(format!("table policy must be top-words:K or ngrams:L, got {s:?}"));
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        match kind {
            "top-words" => Ok(TablePolicy::TopWords { k: n }),
            "ngrams" => Ok(TablePolicy::NGrams { max_len: n }),
            _ => Err(bad()),
        }
    }
}

/// Token strings mapped to their composed maps.
#[derive(Clone, Debug)]
pub struct CompositionTable {
    policy: TablePolicy,
    entries: HashMap<Vec<usize>, AffineMap>,
    max_key_len: usize,
    hidden: usize,
    /// Entries skipped because the memory budget was reached.
    pub skipped: usize,
}

impl CompositionTable {
    pub fn empty(params: &ModelParams, policy: TablePolicy) -> Self {
        Self {
            policy,
            entries: HashMap::new(),
            max_key_len: 0,
            hidden: params.hidden_dim(),
            skipped: 0,
        }
    }

    pub fn policy(&self) -> TablePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[usize]) -> Option<&AffineMap> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &[usize]) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.entries.keys()
    }

    /// Stored reals: `n^2 + n` per entry.
    pub fn size_reals(&self) -> usize {
        self.entries.len() * (self.hidden * self.hidden + self.hidden)
    }

    pub fn bytes(&self) -> usize {
        self.size_reals() * std::mem::size_of::<f64>()
    }

    /// Compose `key`, check it against per-token stepping, and store it.
    pub fn insert(&mut self, params: &ModelParams, key: Vec<usize>) -> Result<()> {
        let map = compose_string(params, &key)?;
        verify_entry(params, &key, &map)?;
        self.max_key_len = self.max_key_len.max(key.len());
        self.entries.insert(key, map);
        Ok(())
    }
}

/// Apply `map` to `h0` and compare with stepping through `key` one token at a time.
fn verify_entry(params: &ModelParams, key: &[usize], map: &AffineMap) -> Result<()> {
    let mut h = params.h0.clone();
    let mut next = DVector::zeros(params.hidden_dim());
    for &x in key {
        params.step_into(&h, x, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    let got = map.apply(&params.h0)?;
    let err = (&got - &h).amax() / h.amax().max(1.0);
    if err > VERIFY_TOLERANCE {
        return Err(IsanError::Residual {
            residual: err,
            threshold: VERIFY_TOLERANCE,
        });
    }
    Ok(())
}

/// Build a table from a corpus. `max_reals` caps the stored size; entries
/// past the cap are counted in [`CompositionTable::skipped`].
pub fn build_table(
    params: &ModelParams,
    corpus: &[usize],
    policy: TablePolicy,
    max_reals: Option<usize>,
) -> Result<CompositionTable> {
    let mut table = CompositionTable::empty(params, policy);
    let per_entry = params.hidden_dim() * params.hidden_dim() + params.hidden_dim();
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    match policy {
        TablePolicy::TopWords { k } => {
            if k == 0 {
                return Ok(table);
            }
            let space = params
                .vocab
                .space()
                .ok_or_else(|| IsanError::Argument("word tables need a vocabulary with a space".into()))?;
            for span in word_spans(corpus, space) {
                *counts.entry(&corpus[span]).or_default() += 1;
            }
        }
        TablePolicy::NGrams { max_len } => {
            for len in 2..=max_len {
                for w in corpus.windows(len) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&[usize], usize)> = counts.into_iter().collect();
    // frequency first, then the key itself, so ties are deterministic
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let TablePolicy::TopWords { k } = policy {
        ranked.truncate(k);
    }
    for (key, _) in ranked {
        if key.len() < 2 && matches!(policy, TablePolicy::NGrams { .. }) {
            continue;
        }
        if let Some(cap) = max_reals {
            if (table.len() + 1) * per_entry > cap {
                table.skipped += 1;
                continue;
            }
        }
        table.insert(params, key.to_vec())?;
    }
    Ok(table)
}

/// Result of a word-granularity run.
#[derive(Clone, Debug, PartialEq)]
pub struct FastRun {
    pub final_state: DVector<f64>,
    /// `(position, state)` after each segment; `position` counts consumed
    /// tokens, so the state equals `run(..).states[position]`.
    pub boundaries: Vec<(usize, DVector<f64>)>,
    pub hits: usize,
    pub misses: usize,
    /// Matrix-vector products performed.
    pub matvecs: usize,
}

/// Segment `tokens` the way `table` is keyed: word spans for word tables,
/// greedy longest known key (else one token) for n-gram tables.
fn segments(params: &ModelParams, table: &CompositionTable, tokens: &[usize]) -> Result<Vec<std::ops::Range<usize>>> {
    match table.policy {
        TablePolicy::TopWords { .. } => {
            let space = params
                .vocab
                .space()
                .ok_or_else(|| IsanError::Argument("word tables need a vocabulary with a space".into()))?;
            Ok(word_spans(tokens, space))
        }
        TablePolicy::NGrams { .. } => {
            let mut out = Vec::new();
            let mut i = 0;
            while i < tokens.len() {
                let longest = (2..=table.max_key_len.min(tokens.len() - i))
                    .rev()
                    .find(|&len| table.contains(&tokens[i..i + len]))
                    .unwrap_or(1);
                out.push(i..i + longest);
                i += longest;
            }
            Ok(out)
        }
    }
}

/// Run from `h0`, applying a table entry per segment when present and stepping
/// token by token otherwise. Interior states of hit segments are not produced.
pub fn fast_run(params: &ModelParams, table: &CompositionTable, tokens: &[usize]) -> Result<FastRun> {
    for &x in tokens {
        params.vocab.check(x)?;
    }
    if table.hidden != params.hidden_dim() {
        return Err(IsanError::shape("composition table", params.hidden_dim(), table.hidden));
    }
    let n = params.hidden_dim();
    let mut h = params.h0.clone();
    let mut next = DVector::zeros(n);
    let spans = segments(params, table, tokens)?;
    let mut boundaries = Vec::with_capacity(spans.len());
    let (mut hits, mut misses, mut matvecs) = (0, 0, 0);
    for span in spans {
        let key = &tokens[span.clone()];
        match table.get(key) {
            Some(map) => {
                map.apply_into(&h, &mut next);
                std::mem::swap(&mut h, &mut next);
                hits += 1;
                matvecs += 1;
            }
            None => {
                for &x in key {
                    params.step_into(&h, x, &mut next);
                    std::mem::swap(&mut h, &mut next);
                }
                misses += 1;
                matvecs += key.len();
            }
        }
        boundaries.push((span.end, h.clone()));
    }
    Ok(FastRun {
        final_state: h,
        boundaries,
        hits,
        misses,
        matvecs,
    })
}

/// Per-token stepping that records the same boundary states as [`fast_run`].
fn stepped_boundaries(params: &ModelParams, spans: &[std::ops::Range<usize>], tokens: &[usize]) -> Vec<(usize, DVector<f64>)> {
    let mut h = params.h0.clone();
    let mut next = DVector::zeros(params.hidden_dim());
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        for &x in &tokens[span.clone()] {
            params.step_into(&h, x, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        out.push((span.end, h.clone()));
    }
    out
}

/// Timing report. Time fields are the only nondeterministic ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub vocab: usize,
    pub policy: String,
    pub entries: usize,
    pub bytes: usize,
    pub tokens: usize,
    pub hits: usize,
    pub misses: usize,
    pub per_char_ns_per_token: f64,
    pub fast_ns_per_token: f64,
    /// Per-token matvecs divided by fast-path matvecs.
    pub matvec_ratio: f64,
    pub speedup: f64,
}

/// Median wall time of per-token stepping and of [`fast_run`] over
/// `repetitions` timed runs each, after one untimed warm-up run of each.
pub fn bench(params: &ModelParams, table: &CompositionTable, tokens: &[usize], repetitions: usize) -> Result<BenchReport> {
    if tokens.is_empty() || repetitions == 0 {
        return Err(IsanError::Argument("bench needs tokens and at least one repetition".into()));
    }
    let spans = segments(params, table, tokens)?;
    let warm = fast_run(params, table, tokens)?;
    std::hint::black_box(stepped_boundaries(params, &spans, tokens));
    let mut slow = Vec::with_capacity(repetitions);
    let mut fast = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(stepped_boundaries(params, &spans, tokens));
        slow.push(start.elapsed().as_nanos() as f64);
        let start = Instant::now();
        std::hint::black_box(fast_run(params, table, tokens)?);
        fast.push(start.elapsed().as_nanos() as f64);
    }
    let per_token = tokens.len() as f64;
    let slow_ns = median(&slow).expect("nonempty") / per_token;
    let fast_ns = median(&fast).expect("nonempty") / per_token;
    Ok(BenchReport {
        n: params.hidden_dim(),
        vocab: params.vocab_size(),
        policy: table.policy().to_string(),
        entries: table.len(),
        bytes: table.bytes(),
        tokens: tokens.len(),
        hits: warm.hits,
        misses: warm.misses,
        per_char_ns_per_token: slow_ns,
        fast_ns_per_token: fast_ns,
        matvec_ratio: tokens.len() as f64 / warm.matvecs as f64,
        speedup: slow_ns / fast_ns,
    })
}
