//! The input-switched affine network: parameters and forward pass.
//!
//! Each token `x` owns an affine map `h -> W_x h + b_x`; there is no
//! elementwise nonlinearity anywhere in the recurrence. Predictions are read
//! out with a second affine map followed by a softmax.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::error::{IsanError, Result};
use crate::vocab::Vocab;

/// Whether every token owns its transition matrix or all tokens share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Switched,
    /// One transition matrix for all tokens, per-token biases.
    Shared,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Switched => f.write_str("switched"),
            Mode::Shared => f.write_str("shared"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = IsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switched" => Ok(Mode::Switched),
            "shared" => Ok(Mode::Shared),
            other => Err(IsanError::Argument(format!("unknown mode {other:?}"))),
        }
    }
}

/// Initialisation recipe: `W_x = gamma I + N(0, sigma^2 / n)`, zero biases
/// and initial state, readout `N(0, readout_scale^2 / n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub gamma: f64,
    pub sigma: f64,
    pub readout_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            sigma: 0.1,
            readout_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mode: Mode,
    pub vocab: Vocab,
    /// `K` matrices in switched mode, exactly one in shared mode.
    pub transitions: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub h0: DVector<f64>,
    pub readout: AffineMap,
}

/// Name and (rows, cols) of one parameter tensor, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub vector: bool,
}

impl ModelParams {
    /// Assemble and validate a parameter set.
    pub fn new(
        mode: Mode,
        vocab: Vocab,
        transitions: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        h0: DVector<f64>,
        readout: AffineMap,
    ) -> Result<Self> {
        let params = Self {
            mode,
            vocab,
            transitions,
            biases,
            h0,
            readout,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn init(
        mode: Mode,
        vocab: Vocab,
        hidden_dim: usize,
        output_dim: usize,
        init: &InitConfig,
        seed: u64,
    ) -> Result<Self> {
        if hidden_dim == 0 || output_dim == 0 {
            return Err(IsanError::Argument("dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = hidden_dim as f64;
        let noise = Normal::new(0.0, init.sigma / n.sqrt())
            .map_err(|e| IsanError::Argument(e.to_string()))?;
        let ro = Normal::new(0.0, init.readout_scale / n.sqrt())
            .map_err(|e| IsanError::Argument(e.to_string()))?;
        let n_mats = match mode {
            Mode::Switched => vocab.len(),
            Mode::Shared => 1,
        };
        let transitions = (0..n_mats)
            .map(|_| {
                let mut w = DMatrix::from_fn(hidden_dim, hidden_dim, |_, _| noise.sample(&mut rng));
                for i in 0..hidden_dim {
                    w[(i, i)] += init.gamma;
                }
                w
            })
            .collect();
        let biases = (0..vocab.len()).map(|_| DVector::zeros(hidden_dim)).collect();
        let readout = AffineMap {
            weight: DMatrix::from_fn(output_dim, hidden_dim, |_, _| ro.sample(&mut rng)),
            bias: DVector::zeros(output_dim),
        };
        Self::new(mode, vocab, transitions, biases, DVector::zeros(hidden_dim), readout)
    }

    pub fn hidden_dim(&self) -> usize {
        self.h0.len()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.n_out()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h0.len();
        let k = self.vocab.len();
        let expected_mats = match self.mode {
            Mode::Switched => k,
            Mode::Shared => 1,
        };
        if self.transitions.len() != expected_mats {
            return Err(IsanError::shape("transition count", expected_mats, self.transitions.len()));
        }
        if self.biases.len() != k {
            return Err(IsanError::shape("bias count", k, self.biases.len()));
        }
        for w in &self.transitions {
            if w.shape() != (n, n) {
                return Err(IsanError::shape("transition matrix", format!("{n}x{n}"), format!("{}x{}", w.nrows(), w.ncols())));
            }
        }
        for b in &self.biases {
            if b.len() != n {
                return Err(IsanError::shape("transition bias", n, b.len()));
            }
        }
        if self.readout.n_in() != n || self.readout.bias.len() != self.readout.n_out() {
            return Err(IsanError::shape("readout", format!("?x{n}"), format!("{}x{}", self.readout.n_out(), self.readout.n_in())));
        }
        if !self.is_finite() {
            return Err(IsanError::Numeric {
                step: 0,
                what: "non-finite parameter".into(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Transition matrix used for `token` (the shared one in shared mode).
    #[inline]
    pub fn transition(&self, token: usize) -> &DMatrix<f64> {
        match self.mode {
            Mode::Switched => &self.transitions[token],
            Mode::Shared => &self.transitions[0],
        }
    }

    /// The full affine map of `token`.
    pub fn token_map(&self, token: usize) -> Result<AffineMap> {
        self.vocab.check(token)?;
        Ok(AffineMap {
            weight: self.transition(token).clone(),
            bias: self.biases[token].clone(),
        })
    }

    /// Same model with every token owning a copy of its matrix.
    pub fn to_switched(&self) -> ModelParams {
        let transitions = (0..self.vocab_size())
            .map(|x| self.transition(x).clone())
            .collect();
        ModelParams {
            mode: Mode::Switched,
            transitions,
            ..self.clone()
        }
    }

    /// Canonical tensor order: transitions, biases, `h0`, readout weight, readout bias.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        tensor_specs(self.mode, self.vocab_size(), self.hidden_dim(), self.output_dim())
    }

    /// Column-major views of every tensor in [`tensor_specs`](Self::tensor_specs) order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.transitions.len() + self.biases.len() + 3);
        out.extend(self.transitions.iter().map(|w| w.as_slice()));
        out.extend(self.biases.iter().map(|b| b.as_slice()));
        out.push(self.h0.as_slice());
        out.push(self.readout.weight.as_slice());
        out.push(self.readout.bias.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.transitions.len() + self.biases.len() + 3);
        out.extend(self.transitions.iter_mut().map(|w| w.as_mut_slice()));
        out.extend(self.biases.iter_mut().map(|b| b.as_mut_slice()));
        out.push(self.h0.as_mut_slice());
        out.push(self.readout.weight.as_mut_slice());
        out.push(self.readout.bias.as_mut_slice());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_hidden(&self, h: &DVector<f64>) -> Result<()> {
        if h.len() != self.hidden_dim() {
            return Err(IsanError::shape("hidden state", self.hidden_dim(), h.len()));
        }
        Ok(())
    }

    /// `out <- W_x h + b_x`, no checks.
    #[inline]
    pub(crate) fn step_into(&self, h: &DVector<f64>, token: usize, out: &mut DVector<f64>) {
        out.copy_from(&self.biases[token]);
        out.gemv(1.0, self.transition(token), h, 1.0);
    }

    #[inline]
    pub(crate) fn logits_into(&self, h: &DVector<f64>, out: &mut DVector<f64>) {
        self.readout.apply_into(h, out);
    }
}

pub(crate) fn tensor_specs(mode: Mode, k: usize, n: usize, out: usize) -> Vec<TensorSpec> {
    let mat = |name: String, rows, cols| TensorSpec { name, rows, cols, vector: false };
    let vec = |name: String, rows| TensorSpec { name, rows, cols: 1, vector: true };
    let mut specs = Vec::new();
    match mode {
        Mode::Switched => specs.extend((0..k).map(|x| mat(format!("transition.{x}"), n, n))),
        Mode::Shared => specs.push(mat("transition".into(), n, n)),
    }
    specs.extend((0..k).map(|x| vec(format!("bias.{x}"), n)));
    specs.push(vec("h0".into(), n));
    specs.push(mat("readout.weight".into(), out, n));
    specs.push(vec("readout.bias".into(), out));
    specs
}

/// Hidden states `h_0 .. h_T` produced by a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub states: Vec<DVector<f64>>,
    pub tokens: Vec<usize>,
}

impl StateTrajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory always holds h0")
    }
}

/// Logits and next-symbol probabilities at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFrame {
    pub logits: DVector<f64>,
    pub probs: DVector<f64>,
}

/// `W_x h + b_x` for the token's map.
pub fn step(params: &ModelParams, h: &DVector<f64>, token: usize) -> Result<DVector<f64>> {
    params.vocab.check(token)?;
    params.check_hidden(h)?;
    let mut out = DVector::zeros(params.hidden_dim());
    params.step_into(h, token, &mut out);
    Ok(out)
}

/// Iterate [`step`] from the learned initial state.
pub fn run(params: &ModelParams, tokens: &[usize]) -> Result<StateTrajectory> {
    run_from(params, &params.h0, tokens)
}

pub fn run_from(params: &ModelParams, start: &DVector<f64>, tokens: &[usize]) -> Result<StateTrajectory> {
    if tokens.is_empty() {
        return Err(IsanError::Argument("run needs at least one token".into()));
    }
    params.check_hidden(start)?;
    let mut states = Vec::with_capacity(tokens.len() + 1);
    states.push(start.clone());
    for &x in tokens {
        params.vocab.check(x)?;
        let mut next = DVector::zeros(params.hidden_dim());
        params.step_into(states.last().expect("nonempty"), x, &mut next);
        states.push(next);
    }
    Ok(StateTrajectory {
        states,
        tokens: tokens.to_vec(),
    })
}

/// `W_ro h + b_ro`.
pub fn logits(params: &ModelParams, h: &DVector<f64>) -> Result<DVector<f64>> {
    params.check_hidden(h)?;
    let mut out = DVector::zeros(params.output_dim());
    params.logits_into(h, &mut out);
    Ok(out)
}

/// Softmax with max-subtraction. Shift invariance is exact up to rounding.
pub fn softmax(l: &DVector<f64>) -> DVector<f64> {
    let max = l.max();
    let mut p = l.map(|v| (v - max).exp());
    let z = p.sum();
    p /= z;
    p
}

/// `ln softmax(l)`, computed stably.
pub fn log_softmax(l: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(l.as_slice());
    l.map(|v| v - lse)
}

pub(crate) fn log_sum_exp(l: &[f64]) -> f64 {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn predict(params: &ModelParams, h: &DVector<f64>) -> Result<PredictionFrame> {
    let logits = logits(params, h)?;
    let probs = softmax(&logits);
    Ok(PredictionFrame { logits, probs })
}

/// Lowest index among the maximal entries.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean `-log2 p(x_{t+1} | x_1..x_t)` over every position after the first.
pub fn evaluate_bpc(params: &ModelParams, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(IsanError::Argument(format!(
            "need at least 2 tokens to score, got {}",
            tokens.len()
        )));
    }
    let mut h = params.h0.clone();
    let mut next = DVector::zeros(params.hidden_dim());
    let mut l = DVector::zeros(params.output_dim());
    let mut total = 0.0;
    for (i, pair) in tokens.windows(2).enumerate() {
        params.vocab.check(pair[0])?;
        params.vocab.check(pair[1])?;
        params.step_into(&h, pair[0], &mut next);
        std::mem::swap(&mut h, &mut next);
        params.logits_into(&h, &mut l);
        let nll = log_sum_exp(l.as_slice()) - l[pair[1]];
        if !nll.is_finite() {
            return Err(IsanError::Numeric {
                step: i + 1,
                what: "non-finite log-likelihood".into(),
            });
        }
        total += nll;
    }
    Ok(total / ((tokens.len() - 1) as f64 * std::f64::consts::LN_2))
}

/// Feed `prompt`, then draw `count` symbols from `softmax(inv_temperature * l_t)`,
/// feeding each sample back in. Randomness comes from ChaCha8 seeded with
/// `seed`; `inv_temperature = inf` decodes greedily.
pub fn sample(
    params: &ModelParams,
    prompt: &[usize],
    count: usize,
    inv_temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(IsanError::Argument("sampling needs a nonempty prompt".into()));
    }
    if inv_temperature.is_nan() || inv_temperature <= 0.0 {
        return Err(IsanError::Argument("inverse temperature must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = run(params, prompt)?.last().clone();
    let mut next = DVector::zeros(params.hidden_dim());
    let mut l = DVector::zeros(params.output_dim());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        params.logits_into(&h, &mut l);
        let x = if inv_temperature.is_infinite() {
            argmax(l.as_slice())
        } else {
            draw(&softmax(&(&l * inv_temperature)), rng.random::<f64>())
        };
        out.push(x);
        params.step_into(&h, x, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    Ok(out)
}

/// Inverse-CDF draw from `p` using a uniform `u` in `[0, 1)`.
pub(crate) fn draw(p: &DVector<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left the total just below 1: take the last symbol with mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_model;

    fn two_unit(w: [f64; 4], b: [f64; 2]) -> ModelParams {
        let vocab = Vocab::new("ab".chars()).unwrap();
        let t = DMatrix::from_row_slice(2, 2, &w);
        ModelParams::new(
            Mode::Switched,
            vocab,
            vec![t.clone(), t],
            vec![DVector::from_row_slice(&b), DVector::from_row_slice(&b)],
            DVector::zeros(2),
            AffineMap::zeros(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn step_identity_and_pure_bias() {
        let id = two_unit([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let h = DVector::from_vec(vec![0.3, -0.5]);
        assert_eq!(step(&id, &h, 0).unwrap(), h);
        let bias = two_unit([0.0; 4], [1.0, 2.0]);
        assert_eq!(step(&bias, &h, 1).unwrap(), DVector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn step_swap_matrix() {
        let m = two_unit([0.0, 1.0, 1.0, 0.0], [0.1, 0.2]);
        let h = DVector::from_vec(vec![1.0, 2.0]);
        // hand matvec: (0*1 + 1*2 + 0.1, 1*1 + 0*2 + 0.2)
        let out = step(&m, &h, 0).unwrap();
        assert!((out[0] - 2.1).abs() < 1e-15 && (out[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn step_errors() {
        let m = two_unit([0.0; 4], [0.0; 2]);
        assert!(matches!(step(&m, &DVector::zeros(2), 2), Err(IsanError::UnknownToken(_))));
        assert!(matches!(step(&m, &DVector::zeros(3), 0), Err(IsanError::Shape { .. })));
    }

    #[test]
    fn run_single_token_and_identity() {
        let p = random_model(Mode::Switched, 3, 3, 3, 7);
        let traj = run(&p, &[1]).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert_eq!(traj.states[0], p.h0);
        assert_eq!(traj.states[1], step(&p, &p.h0, 1).unwrap());
        assert!(run(&p, &[]).is_err());

        let mut id = p.clone();
        for w in &mut id.transitions {
            *w = DMatrix::identity(3, 3);
        }
        for b in &mut id.biases {
            b.fill(0.0);
        }
        let traj = run(&id, &[0, 1, 2, 1]).unwrap();
        assert!(traj.states.iter().all(|h| *h == id.h0));
    }

    #[test]
    fn run_matches_naive_loop() {
        let p = random_model(Mode::Switched, 3, 4, 4, 11);
        let tokens = [2, 0, 3, 3, 1];
        let traj = run(&p, &tokens).unwrap();
        // independent loop with explicit sums
        let mut h: Vec<f64> = p.h0.iter().copied().collect();
        for (t, &x) in tokens.iter().enumerate() {
            let w = &p.transitions[x];
            let next: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|j| w[(i, j)] * h[j]).sum::<f64>() + p.biases[x][i])
                .collect();
            h = next;
            for i in 0..3 {
                assert!((traj.states[t + 1][i] - h[i]).abs() <= 1e-14 * (1.0 + h[i].abs()));
            }
        }
    }

    #[test]
    fn logits_cases() {
        let mut p = random_model(Mode::Switched, 2, 3, 2, 3);
        let h = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(logits(&p, &DVector::zeros(2)).unwrap(), p.readout.bias);
        p.readout.weight = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        p.readout.bias = DVector::from_vec(vec![0.1, -0.1]);
        let l = logits(&p, &h).unwrap();
        assert!((l[0] - (0.5 - 2.0 + 0.1)).abs() < 1e-15);
        assert!((l[1] - (1.5 - 4.0 - 0.1)).abs() < 1e-15);
        p.readout.weight.fill(0.0);
        assert_eq!(logits(&p, &h).unwrap(), p.readout.bias);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&DVector::from_element(5, 3.3));
        assert!(u.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = softmax(&DVector::from_vec(vec![0.0, 2f64.ln()]));
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        let l = DVector::from_vec(vec![1.0, -2.0, 0.5, 7.0]);
        let shifted = softmax(&l.add_scalar(123.456));
        assert!((softmax(&l) - shifted).amax() <= 1e-12);
    }

    #[test]
    fn bpc_uniform_and_certain() {
        let mut p = random_model(Mode::Switched, 4, 27, 27, 5);
        p.vocab = Vocab::text();
        p.readout = AffineMap::zeros(27, 4);
        let tokens = p.vocab.encode("hello world").unwrap();
        let bpc = evaluate_bpc(&p, &tokens).unwrap();
        assert!((bpc - 27f64.log2()).abs() < 1e-12);
        assert!(evaluate_bpc(&p, &tokens[..1]).is_err());

        // a readout that is overwhelmingly confident in 'a' on the sequence "aaaa"
        p.readout.bias[1] = 1e3;
        let bpc = evaluate_bpc(&p, &p.vocab.encode("aaaa").unwrap()).unwrap();
        assert!(bpc.abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_greedy_in_the_limit() {
        let p = random_model(Mode::Switched, 5, 6, 6, 9);
        let a = sample(&p, &[0, 1], 50, 1.5, 42).unwrap();
        let b = sample(&p, &[0, 1], 50, 1.5, 42).unwrap();
        assert_eq!(a, b);
        let hot = sample(&p, &[0, 1], 30, 1e6, 1).unwrap();
        let greedy = sample(&p, &[0, 1], 30, f64::INFINITY, 1).unwrap();
        assert_eq!(hot, greedy);
        assert!(sample(&p, &[], 3, 1.0, 0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn shared_mode_equals_switched_copy() {
        let p = random_model(Mode::Shared, 4, 5, 5, 21);
        let s = p.to_switched();
        let tokens = [0, 4, 2, 2, 1, 3];
        assert_eq!(run(&p, &tokens).unwrap(), run(&s, &tokens).unwrap());
        assert_eq!(evaluate_bpc(&p, &tokens).unwrap(), evaluate_bpc(&s, &tokens).unwrap());
    }
}
