use framegate::config::RunConfig;
use framegate::objectives::{contrastive_loss, exchange_annotations, mask_tokens, BatchItem};
use framegate::ops::softmax_stable;
use framegate::sampler::{gumbel_softmax, uniform_indices};
use framegate::seed::derive;
use framegate::synth::{MASK, SPECIAL};
use framegate::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_properties(seed in any::<u64>()) {
        for (name, check) in common::GATE_PROPERTIES {
            prop_assert!(check(seed).is_ok(), "{name}: {:?}", check(seed));
        }
    }

    #[test]
    fn straight_through_matches_soft(seed in any::<u64>()) {
        prop_assert_eq!(common::straight_through_identity(seed), Ok(()));
    }

    #[test]
    fn gumbel_softmax_is_a_distribution(x in prop::collection::vec(-20.0f64..20.0, 1..10), tau in 0.05f64..5.0, seed in any::<u64>()) {
        let y = gumbel_softmax(&x, tau, seed).unwrap();
        prop_assert!(y.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(y, gumbel_softmax(&x, tau, seed).unwrap());
    }

    #[test]
    fn softmax_ignores_shifts(x in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let a = softmax_stable(&x).unwrap();
        let b = softmax_stable(&x.iter().map(|v| v + c).collect::<Vec<_>>()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_indices_are_spread(n in 1usize..200, k in 1usize..40) {
        prop_assume!(k <= n);
        let idx = uniform_indices(n, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        if k >= 2 {
            prop_assert_eq!((idx[0], idx[k - 1]), (0, n - 1));
        }
    }

    #[test]
    fn contrastive_is_nonnegative(b in 1usize..6, d in 1usize..6, seed in any::<u64>(), mask in any::<u8>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let matched: Vec<bool> = (0..b).map(|i| mask >> i & 1 == 1).collect();
        let mut tape = Tape::new();
        let vv = tape.constant(&[b, d], v).unwrap();
        let tt = tape.constant(&[b, d], t).unwrap();
        let (l, _) = contrastive_loss(&mut tape, vv, tt, &matched, 0.07).unwrap();
        prop_assert!(tape.scalar(l) >= 0.0);
    }

    #[test]
    fn exchange_is_a_pairing(n in 0usize..64, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let batch: Vec<BatchItem<usize>> = (0..n).map(BatchItem::new).collect();
        let out = exchange_annotations(batch, p, &mut ChaCha8Rng::seed_from_u64(seed));
        for (i, b) in out.iter().enumerate() {
            match b.exchanged_with {
                Some(j) => {
                    prop_assert_ne!(i, j);
                    prop_assert_eq!(b.annotation, j);
                    prop_assert_eq!(out[j].annotation, i);
                    prop_assert!(!b.matched);
                }
                None => prop_assert!(b.matched && b.annotation == i),
            }
        }
    }

    #[test]
    fn masking_never_touches_specials(
        tokens in prop::collection::vec(0usize..37, 1..12),
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match mask_tokens(&tokens, &mut rng, rate, 37, SPECIAL.len(), MASK) {
            Ok(m) => {
                prop_assert!(!m.positions.is_empty());
                prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
                for (i, &t) in tokens.iter().enumerate() {
                    if t < SPECIAL.len() {
                        prop_assert_eq!(m.token_ids[i], t);
                        prop_assert!(!m.positions.contains(&i));
                    }
                }
                for (&p, &o) in m.positions.iter().zip(&m.originals) {
                    prop_assert_eq!(tokens[p], o);
                }
            }
            Err(_) => prop_assert!(tokens.iter().all(|&t| t < SPECIAL.len())),
        }
    }

    #[test]
    fn derive_separates_keys(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_eq!(derive(seed, &[a]), derive(seed, &[a]));
        prop_assert_ne!(derive(seed, &[a]), derive(seed, &[b]));
    }

    #[test]
    fn config_json_round_trip(lr in 1e-6f64..1.0, frames in 4usize..100, seed in any::<u64>()) {
        let mut run = RunConfig::synthetic();
        run.lr = lr;
        run.model.frames = frames;
        run.seed = seed;
        prop_assert_eq!(RunConfig::from_json(&run.to_json()).unwrap(), run);
    }
}
