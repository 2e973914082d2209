//! Losses with exact BPTT gradients, gradient checking, optimizers and the
//! truncated-BPTT training loop.
//!
//! A segment either starts a stream ([`SegmentStart::Initial`], state `h0`,
//! which then receives gradient) or continues one from a carried, detached
//! state. With cross entropy, an initial segment of `T` tokens scores the
//! `T - 1` predictions made after each of its first `T - 1` tokens, exactly
//! like [`evaluate_bpc`](crate::model::evaluate_bpc); a carried segment also
//! scores its first token, predicted from the carried state, so every token
//! of a lane after the first is predicted once.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::checkpoint;
use crate::data::{batches, gen_paren, ParenSample, PAREN_CODE_DIM};
use crate::error::{IsanError, Result};
use crate::model::{argmax, evaluate_bpc, log_sum_exp, InitConfig, Mode, ModelParams};
use crate::vocab::Vocab;

/// Parameters beyond this magnitude abort training.
pub const STABILITY_LIMIT: f64 = 1e6;

/// One gradient tensor per parameter tensor, same shapes and order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub transitions: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub h0: DVector<f64>,
    pub readout: AffineMap,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let n = params.hidden_dim();
        Self {
            transitions: params.transitions.iter().map(|_| DMatrix::zeros(n, n)).collect(),
            biases: params.biases.iter().map(|_| DVector::zeros(n)).collect(),
            h0: DVector::zeros(n),
            readout: AffineMap::zeros(params.output_dim(), n),
        }
    }

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

    /// Global Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SegmentStart<'a> {
    /// Start from the learned `h0`.
    Initial,
    /// Continue from a detached state.
    Carried(&'a DVector<f64>),
}

/// Sum of per-prediction losses in a segment, the number of predictions and
/// the state after the last token (to carry into the next segment).
#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    pub loss_sum: f64,
    pub count: usize,
    pub next_state: DVector<f64>,
}

/// Number of cross-entropy predictions a segment contributes.
pub fn ce_predictions(len: usize, start: SegmentStart<'_>) -> usize {
    match start {
        SegmentStart::Initial => len.saturating_sub(1),
        SegmentStart::Carried(_) => len,
    }
}

fn forward_states(params: &ModelParams, start: &DVector<f64>, tokens: &[usize]) -> Result<DMatrix<f64>> {
    let n = params.hidden_dim();
    let mut states = DMatrix::zeros(n, tokens.len() + 1);
    states.set_column(0, start);
    let mut next = DVector::zeros(n);
    for (t, &x) in tokens.iter().enumerate() {
        params.vocab.check(x)?;
        next.copy_from(&params.biases[x]);
        next.gemv(1.0, params.transition(x), &states.column(t), 1.0);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(IsanError::Numeric {
                step: t + 1,
                what: "non-finite hidden state".into(),
            });
        }
        states.set_column(t + 1, &next);
    }
    Ok(states)
}

/// Backpropagate output-side state gradients `dh_out` (column `j` belongs to
/// state `first + j`) through the recurrence and accumulate every parameter
/// gradient except the readout's.
fn backward_states(
    params: &ModelParams,
    tokens: &[usize],
    states: &DMatrix<f64>,
    first: usize,
    dh_out: &DMatrix<f64>,
    grads: &mut GradientSet,
    initial: bool,
) {
    let n = params.hidden_dim();
    let last = first + dh_out.ncols() - 1;
    // dh[:, t] = total gradient w.r.t. state t, for t in 0..=last
    let mut dh = DMatrix::zeros(n, last + 1);
    let mut carry = DVector::zeros(n);
    for t in (0..=last).rev() {
        let mut col = dh.column_mut(t);
        if t >= first {
            col += dh_out.column(t - first);
        }
        col += &carry;
        if t == 0 {
            break;
        }
        // state t = W_{x} state_{t-1} + b_x with x = tokens[t - 1]
        carry.gemv_tr(1.0, params.transition(tokens[t - 1]), &dh.column(t), 0.0);
    }
    if initial {
        grads.h0 += dh.column(0);
    }
    // weight and bias gradients, one GEMM per token
    let k = params.vocab_size();
    let mut by_token: Vec<Vec<usize>> = vec![Vec::new(); k];
    for t in 1..=last {
        by_token[tokens[t - 1]].push(t);
    }
    let gather = |m: &DMatrix<f64>, cols: &[usize], offset: isize| {
        DMatrix::from_fn(n, cols.len(), |r, j| m[(r, (cols[j] as isize + offset) as usize)])
    };
    match params.mode {
        Mode::Switched => {
            for (x, cols) in by_token.iter().enumerate() {
                if cols.is_empty() {
                    continue;
                }
                let d = gather(&dh, cols, 0);
                let prev = gather(states, cols, -1);
                grads.transitions[x].gemm(1.0, &d, &prev.transpose(), 1.0);
                grads.biases[x] += d.column_sum();
            }
        }
        Mode::Shared => {
            let d = dh.columns(1, last);
            let prev = states.columns(0, last);
            grads.transitions[0].gemm(1.0, &d, &prev.transpose(), 1.0);
            for (x, cols) in by_token.iter().enumerate() {
                for &t in cols {
                    grads.biases[x] += dh.column(t);
                }
            }
        }
    }
}

fn start_state<'a>(params: &'a ModelParams, start: SegmentStart<'a>) -> Result<&'a DVector<f64>> {
    let s = match start {
        SegmentStart::Initial => &params.h0,
        SegmentStart::Carried(h) => h,
    };
    if s.len() != params.hidden_dim() {
        return Err(IsanError::shape("carried state", params.hidden_dim(), s.len()));
    }
    Ok(s)
}

/// Cross entropy (nats) of one segment; adds `scale * d(loss_sum)` to `grads`.
pub fn ce_segment(
    params: &ModelParams,
    tokens: &[usize],
    start: SegmentStart<'_>,
    scale: f64,
    grads: &mut GradientSet,
) -> Result<SegmentOutcome> {
    let first = match start {
        SegmentStart::Initial => 1,
        SegmentStart::Carried(_) => 0,
    };
    let count = ce_predictions(tokens.len(), start);
    let s0 = start_state(params, start)?;
    let states = forward_states(params, s0, tokens)?;
    let next_state = states.column(tokens.len()).into_owned();
    if count == 0 {
        return Ok(SegmentOutcome {
            loss_sum: 0.0,
            count,
            next_state,
        });
    }
    // state j predicts tokens[j]
    let used = states.columns(first, count);
    let mut logits = &params.readout.weight * &used;
    let mut loss_sum = 0.0;
    for (j, mut col) in logits.column_iter_mut().enumerate() {
        col += &params.readout.bias;
        let target = tokens[first + j];
        let lse = log_sum_exp(col.as_slice());
        let nll = lse - col[target];
        if !nll.is_finite() {
            return Err(IsanError::Numeric {
                step: first + j,
                what: "non-finite log-likelihood".into(),
            });
        }
        loss_sum += nll;
        // turn the column into scale * (softmax - onehot)
        col.apply(|v| *v = scale * (*v - lse).exp());
        col[target] -= scale;
    }
    let dl = logits;
    grads.readout.weight.gemm(1.0, &dl, &used.transpose(), 1.0);
    grads.readout.bias += dl.column_sum();
    let dh_out = params.readout.weight.transpose() * &dl;
    backward_states(params, tokens, &states, first, &dh_out, grads, matches!(start, SegmentStart::Initial));
    Ok(SegmentOutcome {
        loss_sum,
        count,
        next_state,
    })
}

/// Squared error between the output after each token and its target.
/// Returns the summed squared error over steps and output dims.
pub fn l2_segment(
    params: &ModelParams,
    tokens: &[usize],
    targets: &[DVector<f64>],
    start: SegmentStart<'_>,
    scale: f64,
    grads: &mut GradientSet,
) -> Result<SegmentOutcome> {
    if targets.len() != tokens.len() {
        return Err(IsanError::shape("l2 targets", tokens.len(), targets.len()));
    }
    let out = params.output_dim();
    if let Some(bad) = targets.iter().find(|t| t.len() != out) {
        return Err(IsanError::shape("l2 target", out, bad.len()));
    }
    let s0 = start_state(params, start)?;
    let states = forward_states(params, s0, tokens)?;
    let t_len = tokens.len();
    let next_state = states.column(t_len).into_owned();
    if t_len == 0 {
        return Ok(SegmentOutcome {
            loss_sum: 0.0,
            count: 0,
            next_state,
        });
    }
    let used = states.columns(1, t_len);
    let mut diff = &params.readout.weight * &used;
    let mut loss_sum = 0.0;
    for (j, mut col) in diff.column_iter_mut().enumerate() {
        col += &params.readout.bias;
        col -= &targets[j];
        loss_sum += col.norm_squared();
    }
    if !loss_sum.is_finite() {
        return Err(IsanError::Numeric {
            step: t_len,
            what: "non-finite squared error".into(),
        });
    }
    let dl = diff * (2.0 * scale);
    grads.readout.weight.gemm(1.0, &dl, &used.transpose(), 1.0);
    grads.readout.bias += dl.column_sum();
    let dh_out = params.readout.weight.transpose() * &dl;
    backward_states(params, tokens, &states, 1, &dh_out, grads, matches!(start, SegmentStart::Initial));
    Ok(SegmentOutcome {
        loss_sum,
        count: t_len * out,
        next_state,
    })
}

/// Mean next-token cross entropy in bits over a sequence started from `h0`,
/// with its exact gradient.
pub fn cross_entropy_loss(params: &ModelParams, tokens: &[usize]) -> Result<(f64, GradientSet)> {
    if tokens.len() < 2 {
        return Err(IsanError::Argument(format!(
            "need at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let mut grads = GradientSet::zeros_like(params);
    let n = (tokens.len() - 1) as f64;
    let scale = 1.0 / (n * std::f64::consts::LN_2);
    let out = ce_segment(params, tokens, SegmentStart::Initial, scale, &mut grads)?;
    Ok((out.loss_sum * scale, grads))
}

/// Mean squared error over steps and output dims, with its exact gradient.
pub fn l2_loss(params: &ModelParams, tokens: &[usize], targets: &[DVector<f64>]) -> Result<(f64, GradientSet)> {
    if tokens.is_empty() {
        return Err(IsanError::Argument("l2 loss needs at least one token".into()));
    }
    let mut grads = GradientSet::zeros_like(params);
    let scale = 1.0 / (tokens.len() * params.output_dim()) as f64;
    let out = l2_segment(params, tokens, targets, SegmentStart::Initial, scale, &mut grads)?;
    Ok((out.loss_sum * scale, grads))
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind<'a> {
    CrossEntropy,
    L2(&'a [DVector<f64>]),
}

pub fn loss_and_grad(params: &ModelParams, tokens: &[usize], loss: LossKind<'_>) -> Result<(f64, GradientSet)> {
    match loss {
        LossKind::CrossEntropy => cross_entropy_loss(params, tokens),
        LossKind::L2(targets) => l2_loss(params, tokens, targets),
    }
}

/// Compare analytic gradients with central differences of step `epsilon`.
/// Returns `max |a - d| / max(|a|, |d|, 1e-8)` over every parameter entry.
pub fn grad_check(params: &ModelParams, tokens: &[usize], loss: LossKind<'_>, epsilon: f64) -> Result<f64> {
    let (_, grads) = loss_and_grad(params, tokens, loss)?;
    grad_check_against(params, tokens, loss, epsilon, &grads)
}

/// [`grad_check`] against a supplied gradient (useful for mutation tests).
pub fn grad_check_against(
    params: &ModelParams,
    tokens: &[usize],
    loss: LossKind<'_>,
    epsilon: f64,
    grads: &GradientSet,
) -> Result<f64> {
    let mut probe = params.clone();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for (ti, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let original = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = original + epsilon;
            let plus = loss_and_grad(&probe, tokens, loss)?.0;
            probe.tensors_mut()[ti][i] = original - epsilon;
            let minus = loss_and_grad(&probe, tokens, loss)?.0;
            probe.tensors_mut()[ti][i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = IsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "adagrad" => Ok(Self::Adagrad),
            "sgd" => Ok(Self::Sgd),
            other => Err(IsanError::Argument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clipping threshold.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IsanError::Argument(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("optimizer epsilon must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }
}

/// Moment accumulators (Adam: first and second, Adagrad: squared sums in `second`).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }
}

/// Scale `grads` to global norm `clip` if larger. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradientSet, clip: Option<f64>) -> f64 {
    let norm = grads.norm();
    if let Some(c) = clip {
        if norm > c {
            grads.scale(c / norm);
        }
    }
    norm
}

/// Clip, then apply one update. Returns the pre-clip gradient norm.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &mut GradientSet,
    config: &OptimizerConfig,
) -> Result<f64> {
    if !grads.is_finite() {
        return Err(IsanError::Numeric {
            step: state.steps as usize,
            what: "non-finite gradient".into(),
        });
    }
    let norm = clip_gradients(grads, config.clip_norm);
    state.steps += 1;
    let lr = config.learning_rate;
    let t = state.steps as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (ti, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let m = &mut state.first[ti];
        let v = &mut state.second[ti];
        match config.kind {
            OptimizerKind::Sgd => {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= lr * gi;
                }
            }
            OptimizerKind::Adagrad => {
                for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi += gi * gi;
                    *pi -= lr * gi / (*vi + config.epsilon).sqrt();
                }
            }
            OptimizerKind::Adam => {
                for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
                    *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
                    *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + config.epsilon);
                }
            }
        }
    }
    Ok(norm)
}

/// Abort if any parameter is non-finite or larger than [`STABILITY_LIMIT`].
pub fn check_stability(params: &ModelParams, step: usize) -> Result<()> {
    for (spec, t) in params.tensor_specs().iter().zip(params.tensors()) {
        if let Some(v) = t.iter().find(|v| !v.is_finite() || v.abs() > STABILITY_LIMIT) {
            return Err(IsanError::Numeric {
                step,
                what: format!("parameter {} reached {v:e}", spec.name),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossConfig {
    CrossEntropy,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub hidden: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Validation tokens (text) or sequences (bracket task) scored per evaluation.
    pub eval_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub init: InitConfig,
    /// Where to write checkpoints at each evaluation and on numeric failure.
    pub checkpoint_dir: Option<PathBuf>,
    /// Multiply the learning rate by `lr_drop_factor` from this step on.
    #[serde(default)]
    pub lr_drop_at: Option<usize>,
    #[serde(default = "unit_factor")]
    pub lr_drop_factor: f64,
}

fn unit_factor() -> f64 {
    1.0
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Switched,
            hidden: 216,
            seq_len: 64,
            batch_size: 32,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adagrad,
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
            max_steps: 10_000,
            eval_every: 500,
            eval_size: 100_000,
            seed: 0,
            loss: LossConfig::CrossEntropy,
            init: InitConfig::default(),
            checkpoint_dir: None,
            lr_drop_at: None,
            lr_drop_factor: 1.0,
        }
    }
}

impl TrainingConfig {
    /// Character language modelling defaults (216 units, cross entropy,
    /// Adagrad at 3e-3).
    pub fn text() -> Self {
        Self::default()
    }

    /// Bracket-counting recipe: 35 units, L2 loss, 20k steps at 3e-3 then
    /// 40k at 3e-4.
    pub fn paren() -> Self {
        Self {
            hidden: 35,
            seq_len: 50,
            batch_size: 16,
            loss: LossConfig::L2,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
            max_steps: 60_000,
            eval_every: 2_000,
            eval_size: 200,
            lr_drop_at: Some(20_000),
            lr_drop_factor: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IsanError::Argument(m));
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.eval_every == 0 {
            return bad("batch_size, hidden and eval_every must be positive".into());
        }
        if !(self.lr_drop_factor > 0.0) || !self.lr_drop_factor.is_finite() {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        self.optimizer.validate()
    }

    /// Optimizer settings in force at `step` (0-based).
    pub fn optimizer_at(&self, step: usize) -> OptimizerConfig {
        let mut opt = self.optimizer.clone();
        if self.lr_drop_at.is_some_and(|at| step >= at) {
            opt.learning_rate *= self.lr_drop_factor;
        }
        opt
    }
}

/// Training data source.
#[derive(Clone, Copy, Debug)]
pub enum Task<'a> {
    /// Next-character prediction over lanes of `train`, scored on `validation`.
    Text {
        vocab: &'a Vocab,
        train: &'a [usize],
        validation: &'a [usize],
    },
    /// Bracket counting: fresh streams of `seq_len` symbols every step.
    Paren { p_noise: f64 },
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    /// Bits per character (text) or per-dim MSE (bracket task), averaged since the last row.
    pub train_bpc_or_mse: f64,
    pub val_metric: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub params: ModelParams,
    /// Parameters at the evaluation with the lowest validation metric.
    pub best: ModelParams,
    pub best_step: usize,
    pub log: Vec<MetricRow>,
}

/// Build the freshly initialised model a training run starts from.
pub fn initial_model(config: &TrainingConfig, task: &Task<'_>) -> Result<ModelParams> {
    let (vocab, out) = match task {
        Task::Text { vocab, .. } => ((*vocab).clone(), vocab.len()),
        Task::Paren { .. } => (Vocab::paren(), PAREN_CODE_DIM),
    };
    ModelParams::init(config.mode, vocab, config.hidden, out, &config.init, config.seed)
}

/// Train from a fresh initialisation. See [`train_from`].
pub fn train(config: &TrainingConfig, task: Task<'_>, on_row: &mut dyn FnMut(&MetricRow)) -> Result<TrainOutcome> {
    let params = initial_model(config, &task)?;
    train_from(config, task, params, on_row)
}

/// Truncated BPTT with state carried along lanes; `on_row` sees every log row
/// as it is produced. On numeric failure the last good parameters are written
/// to the checkpoint directory (if any) and the error is returned.
pub fn train_from(
    config: &TrainingConfig,
    task: Task<'_>,
    mut params: ModelParams,
    on_row: &mut dyn FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let clock = Instant::now();
    let mut opt = OptimizerState::new(&params);
    let mut log = Vec::new();
    let mut lane_states: Vec<Option<DVector<f64>>> = vec![None; config.batch_size];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (text_batches, paren_val) = match task {
        Task::Text { vocab, train, .. } => {
            if vocab != &params.vocab {
                return Err(IsanError::Argument("model and corpus vocabularies differ".into()));
            }
            (Some(batches(train, config.seq_len, config.batch_size)?), Vec::new())
        }
        Task::Paren { p_noise } => {
            let val = gen_paren(config.eval_size.max(1), config.seq_len, p_noise, config.seed ^ 0x5eed_0f_ba5e)?;
            (None, val)
        }
    };
    let mut window_loss = 0.0;
    let mut window_count = 0usize;
    let mut last_good = params.clone();
    let mut best = (f64::INFINITY, 0usize, params.clone());

    for step in 0..config.max_steps {
        let mut grads = GradientSet::zeros_like(&params);
        let result: Result<(f64, usize)> = (|| match task {
            Task::Text { .. } => {
                let b = text_batches.as_ref().expect("text task has batches");
                let index = step % b.len();
                if index == 0 {
                    lane_states.iter_mut().for_each(|s| *s = None);
                }
                let segments = b.batch(index);
                let total: usize = segments
                    .iter()
                    .zip(&lane_states)
                    .map(|(seg, s)| match s {
                        None => ce_predictions(seg.len(), SegmentStart::Initial),
                        Some(h) => ce_predictions(seg.len(), SegmentStart::Carried(h)),
                    })
                    .sum();
                let scale = 1.0 / (total as f64 * std::f64::consts::LN_2);
                let mut sum = 0.0;
                for (seg, state) in segments.iter().zip(lane_states.iter_mut()) {
                    let start = match state {
                        None => SegmentStart::Initial,
                        Some(h) => SegmentStart::Carried(h),
                    };
                    let out = ce_segment(&params, seg, start, scale, &mut grads)?;
                    sum += out.loss_sum;
                    *state = Some(out.next_state);
                }
                Ok((sum / std::f64::consts::LN_2, total))
            }
            Task::Paren { p_noise } => {
                let samples = paren_batch(&mut rng, config.batch_size, config.seq_len, p_noise);
                let total = config.batch_size * config.seq_len * params.output_dim();
                let scale = 1.0 / total as f64;
                let mut sum = 0.0;
                for s in &samples {
                    let out = l2_segment(&params, &s.tokens, &s.targets(), SegmentStart::Initial, scale, &mut grads)?;
                    sum += out.loss_sum;
                }
                Ok((sum, total))
            }
        })();
        let update = result.and_then(|(loss, count)| {
            let norm = optimizer_step(&mut opt, &mut params, &mut grads, &config.optimizer_at(step))?;
            check_stability(&params, step + 1)?;
            Ok((loss, count, norm))
        });
        let (loss, count, norm) = match update {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = &config.checkpoint_dir {
                    checkpoint::save(&last_good, dir, None)?;
                }
                return Err(e);
            }
        };
        window_loss += loss;
        window_count += count;
        let grad_norm = norm;

        let done = step + 1 == config.max_steps;
        if (step + 1) % config.eval_every == 0 || done {
            let evaluated = match task {
                Task::Text { validation, .. } => {
                    let n = validation.len().min(config.eval_size.max(2));
                    evaluate_bpc(&params, &validation[..n])
                }
                Task::Paren { .. } => paren_mse(&params, &paren_val),
            };
            let val_metric = match evaluated {
                Ok(v) => v,
                Err(e) => {
                    if let Some(dir) = &config.checkpoint_dir {
                        checkpoint::save(&last_good, dir, None)?;
                    }
                    return Err(e);
                }
            };
            if val_metric < best.0 {
                best = (val_metric, step + 1, params.clone());
            }
            let row = MetricRow {
                step: step + 1,
                train_bpc_or_mse: window_loss / window_count.max(1) as f64,
                val_metric,
                grad_norm,
                wall_ms: clock.elapsed().as_millis() as u64,
            };
            on_row(&row);
            log.push(row);
            window_loss = 0.0;
            window_count = 0;
            if let Some(dir) = &config.checkpoint_dir {
                checkpoint::save(&params, dir, None)?;
            }
        }
        last_good.clone_from(&params);
    }
    let (_, best_step, best) = best;
    Ok(TrainOutcome { params, best, best_step, log })
}

fn paren_batch(rng: &mut ChaCha8Rng, count: usize, len: usize, p_noise: f64) -> Vec<ParenSample> {
    use rand::Rng;
    let seed = rng.random::<u64>();
    gen_paren(count, len, p_noise, seed).expect("validated length and noise")
}

/// Per-dim mean squared error of the model's outputs against the lagged 2-hot targets.
pub fn paren_mse(params: &ModelParams, samples: &[ParenSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let mut g = GradientSet::zeros_like(params);
        let out = l2_segment(params, &s.tokens, &s.targets(), SegmentStart::Initial, 0.0, &mut g)?;
        sum += out.loss_sum;
        count += out.count;
    }
    Ok(sum / count.max(1) as f64)
}

/// Fraction of steps whose argmax level matches the lagged count, per bracket type.
pub fn paren_accuracy(params: &ModelParams, samples: &[ParenSample]) -> Result<[f64; 2]> {
    let half = PAREN_CODE_DIM / 2;
    let mut hits = [0usize; 2];
    let mut total = 0usize;
    for s in samples {
        let traj = crate::model::run(params, &s.tokens)?;
        for (h, lag) in traj.states[1..].iter().zip(s.lagged_counts()) {
            let out = params.readout.apply(h)?;
            for ty in 0..2 {
                let level = argmax(&out.as_slice()[ty * half..(ty + 1) * half]);
                hits[ty] += usize::from(level == lag[ty]);
            }
            total += 1;
        }
    }
    let total = total.max(1) as f64;
    Ok([hits[0] as f64 / total, hits[1] as f64 / total])
}
