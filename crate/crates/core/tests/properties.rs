//! Property tests over random models, strings and transforms.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use isan::basis::{apply_basis, readout_split, BasisTransform};
use isan::composition::compose_string;
use isan::data::{gen_paren, PAREN_MAX};
use isan::decomposition::{kappa, masked_logits, truncated_history_bpc, SourceMask};
use isan::model::{evaluate_bpc, predict, run, softmax, Mode};
use isan::testing::{random_model, random_tokens};
use isan::training::{clip_gradients, loss_and_grad, LossKind};
use isan::Vocab;

fn mode(shared: bool) -> Mode {
    if shared {
        Mode::Shared
    } else {
        Mode::Switched
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalised_and_shift_invariant(
        l in prop::collection::vec(-50.0f64..50.0, 1..30),
        c in -500.0f64..500.0,
    ) {
        let l = DVector::from_vec(l);
        let p = softmax(&l);
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let q = softmax(&l.add_scalar(c));
        prop_assert!((p - q).amax() < 1e-12);
    }

    #[test]
    fn kappa_sums_to_logits(
        n in 2usize..12, k in 2usize..8, len in 1usize..40, shared: bool, seed: u64,
    ) {
        let p = random_model(mode(shared), n, k, k, seed);
        let tokens = random_tokens(k, len, seed ^ 1);
        let kt = kappa(&p, &tokens).unwrap();
        let traj = run(&p, &tokens).unwrap();
        for t in 0..=len {
            let direct = &p.readout.weight * &traj.states[t] + &p.readout.bias;
            let got = kt.reconstruct_logits(t).unwrap();
            prop_assert!((&got - &direct).amax() <= 1e-9 * direct.amax().max(1.0));
        }
    }

    #[test]
    fn disjoint_masks_add(
        n in 2usize..8, k in 2usize..6, len in 1usize..25, seed: u64,
        picks in prop::collection::vec(0u8..3, 26),
    ) {
        let p = random_model(Mode::Switched, n, k, k, seed);
        let tokens = random_tokens(k, len, seed ^ 2);
        let kt = kappa(&p, &tokens).unwrap();
        let group = |g: u8| SourceMask::Positions((0..=len).filter(|&s| picks[s] == g).collect());
        let union = SourceMask::Positions((0..=len).filter(|&s| picks[s] != 2).collect());
        for t in 0..=len {
            let a = masked_logits(&kt, &group(0), t).unwrap().logits;
            let b = masked_logits(&kt, &group(1), t).unwrap().logits;
            let u = masked_logits(&kt, &union, t).unwrap().logits;
            prop_assert!((a + b - &p.readout.bias - &u).amax() <= 1e-12 * u.amax().max(1.0));
        }
    }

    #[test]
    fn composition_is_a_homomorphism(
        n in 2usize..10, k in 2usize..6, len in 2usize..30, cut in 1usize..29, seed: u64,
    ) {
        let cut = cut.min(len - 1);
        let p = random_model(Mode::Switched, n, k, k, seed);
        let tokens = random_tokens(k, len, seed ^ 3);
        let whole = compose_string(&p, &tokens).unwrap();
        let left = compose_string(&p, &tokens[..cut]).unwrap();
        let right = compose_string(&p, &tokens[cut..]).unwrap();
        let joined = left.then(&right).unwrap();
        let scale = whole.weight.amax().max(whole.bias.amax()).max(1.0);
        prop_assert!((&joined.weight - &whole.weight).amax() <= 1e-10 * scale);
        prop_assert!((&joined.bias - &whole.bias).amax() <= 1e-10 * scale);
    }

    #[test]
    fn predictions_survive_basis_changes(
        n in 2usize..10, k in 2usize..6, seed: u64,
        shift in prop::collection::vec(-0.4f64..0.4, 100),
    ) {
        // diagonally dominant, so comfortably invertible
        let t = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + shift[(i * n + j) % 100] / n as f64);
        let p = random_model(Mode::Switched, n, k, k, seed);
        let q = apply_basis(&p, &BasisTransform::new(t).unwrap()).unwrap();
        let tokens = random_tokens(k, 30, seed ^ 4);
        let (a, b) = (run(&p, &tokens).unwrap(), run(&q, &tokens).unwrap());
        for (ha, hb) in a.states.iter().zip(&b.states) {
            let pa = predict(&p, ha).unwrap().probs;
            let pb = predict(&q, hb).unwrap().probs;
            prop_assert!((&pa - &pb).amax() <= 1e-10 * pa.amax());
        }
    }

    #[test]
    fn readout_split_is_complementary(rows in 1usize..6, cols in 2usize..10, seed: u64) {
        let p = random_model(Mode::Switched, cols, 2, rows, seed);
        let split = readout_split(&p.readout.weight).unwrap();
        let v = DVector::from_fn(cols, |i, _| (i as f64 + seed as f64 % 7.0).sin());
        let par = split.project_parallel(&v);
        let perp = split.project_perpendicular(&v);
        prop_assert!((&par + &perp - &v).amax() < 1e-10);
        prop_assert!(par.dot(&perp).abs() < 1e-10);
        prop_assert!((split.project_parallel(&par) - &par).amax() < 1e-10);
        prop_assert!((&p.readout.weight * &perp).amax() < 1e-10 * p.readout.weight.amax().max(1.0));
    }

    #[test]
    fn clipping_never_grows_the_norm(n in 2usize..6, seed: u64, clip in 0.01f64..10.0) {
        let p = random_model(Mode::Switched, n, 3, 3, seed);
        let tokens = random_tokens(3, 10, seed ^ 5);
        let (_, mut g) = loss_and_grad(&p, &tokens, LossKind::CrossEntropy).unwrap();
        let before = g.norm();
        let reported = clip_gradients(&mut g, Some(clip));
        prop_assert_eq!(reported, before);
        prop_assert!(g.norm() <= before.min(clip) * (1.0 + 1e-12));
        if before <= clip {
            prop_assert_eq!(g.norm(), before);
        }
    }

    #[test]
    fn full_window_truncation_is_exact(n in 2usize..6, len in 3usize..20, seed: u64) {
        let p = random_model(Mode::Switched, n, 27, 27, seed);
        let tokens = random_tokens(27, len, seed ^ 6);
        let full = evaluate_bpc(&p, &tokens).unwrap();
        let truncated = truncated_history_bpc(&p, &tokens, len + 1).unwrap();
        prop_assert!((full - truncated).abs() <= 1e-9 * full.max(1.0));
    }

    #[test]
    fn bracket_counts_stay_in_range(samples in 1usize..20, len in 1usize..80, p_noise in 0.0f64..1.0, seed: u64) {
        for s in gen_paren(samples, len, p_noise, seed).unwrap() {
            prop_assert_eq!(s.tokens.len(), len);
            prop_assert!(s.counts.iter().all(|c| c[0] <= PAREN_MAX && c[1] <= PAREN_MAX));
            for (t, target) in s.targets().iter().enumerate() {
                prop_assert_eq!(target.sum(), 2.0);
                let lag = if t == 0 { [0, 0] } else { s.counts[t - 1] };
                prop_assert_eq!(target[lag[0]], 1.0);
            }
            prop_assert_eq!(isan::data::ParenSample::from_line(&s.to_line()).unwrap(), s);
        }
    }

    #[test]
    fn text_round_trips(words in prop::collection::vec("[a-z]{1,8}", 1..20)) {
        let text = format!(" {}", words.join(" "));
        let vocab = Vocab::text();
        let tokens = vocab.encode(&text).unwrap();
        prop_assert_eq!(vocab.decode(&tokens).unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(n in 1usize..8, k in 2usize..6, out in 1usize..6, shared: bool, seed: u64) {
        let dir = tempfile::tempdir().unwrap();
        let p = random_model(mode(shared), n, k, out, seed);
        isan::checkpoint::save(&p, dir.path(), None).unwrap();
        let back = isan::checkpoint::load(dir.path()).unwrap();
        prop_assert_eq!(back.params, p);
        prop_assert!(back.basis.is_none());
    }
}
