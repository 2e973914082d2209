//! Random models and vocabularies for tests, benches and property checks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::affine::AffineMap;
use crate::model::{Mode, ModelParams};
use crate::vocab::{Vocab, TEXT_SYMBOLS};

/// `k` distinct symbols; the first 27 are the text alphabet.
pub fn vocab_of_size(k: usize) -> Vocab {
    if k == 27 {
        return Vocab::text();
    }
    let symbols: Vec<char> = TEXT_SYMBOLS
        .chars()
        .chain(('A'..='Z').chain('0'..='9'))
        .chain((0x100u32..).filter_map(char::from_u32))
        .take(k)
        .collect();
    Vocab::new(symbols).expect("distinct symbols")
}

/// Gaussian model with spectral radius around 0.9 and unit-scale biases,
/// initial state and readout.
pub fn random_model(mode: Mode, hidden: usize, k: usize, out: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hidden as f64;
    let w = Normal::new(0.0, 0.9 / n.sqrt()).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let ro = Normal::new(0.0, 1.0 / n.sqrt()).unwrap();
    let n_mats = if mode == Mode::Switched { k } else { 1 };
    let transitions = (0..n_mats)
        .map(|_| DMatrix::from_fn(hidden, hidden, |_, _| w.sample(&mut rng)))
        .collect();
    let biases = (0..k)
        .map(|_| DVector::from_fn(hidden, |_, _| unit.sample(&mut rng)))
        .collect();
    let h0 = DVector::from_fn(hidden, |_, _| unit.sample(&mut rng));
    let readout = AffineMap {
        weight: DMatrix::from_fn(out, hidden, |_, _| ro.sample(&mut rng)),
        bias: DVector::from_fn(out, |_, _| 0.5 * unit.sample(&mut rng)),
    };
    ModelParams::new(mode, vocab_of_size(k), transitions, biases, h0, readout)
        .expect("consistent shapes")
}

/// Uniform random token sequence over `k` symbols.
pub fn random_tokens(k: usize, len: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..k)).collect()
}

/// Relative max-abs difference `|a - b|_inf / max(|b|_inf, tiny)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}
