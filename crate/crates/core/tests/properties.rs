use pharnet::bt::{bt_fit, log_likelihood, PairCounts};
use pharnet::checkpoint;
use pharnet::data::{composite, Corpus, MAX_AREA_FRACTION, MIN_AREA_FRACTION};
use pharnet::eval::{region_moments, suite_config};
use pharnet::generator::adain_stylize;
use pharnet::train::TrainState;
use pharnet::{Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wins_matrix(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(1u32..20, n * n)
        .prop_map(move |flat| (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { flat[i * n + j] as f64 }).collect()).collect())
}

fn masked(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(-2.0f64..2.0, 2 * n),
        prop::collection::vec(-2.0f64..2.0, 2 * n),
        prop::collection::vec(any::<bool>(), n).prop_filter("need two foreground pixels", |m| m.iter().filter(|&&b| b).count() >= 2),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bt_scores_are_zero_mean_and_scale_free(wins in wins_matrix(4), k in 2u32..6) {
        let fit = bt_fit(&PairCounts::unnamed(wins.clone())).unwrap();
        prop_assert!(fit.scores.iter().sum::<f64>().abs() < 1e-9);
        let scaled: Vec<Vec<f64>> = wins.iter().map(|r| r.iter().map(|v| v * k as f64).collect()).collect();
        let again = bt_fit(&PairCounts::unnamed(scaled)).unwrap();
        for (a, b) in fit.scores.iter().zip(&again.scores) {
            prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", fit.scores, again.scores);
        }
        // the likelihood only sees score differences
        let shifted: Vec<f64> = fit.scores.iter().map(|s| s + 3.7).collect();
        prop_assert!((log_likelihood(&wins, &fit.scores) - log_likelihood(&wins, &shifted)).abs() < 1e-9);
    }

    #[test]
    fn bt_fit_is_a_likelihood_maximum(wins in wins_matrix(3), i in 0usize..3, delta in prop_oneof![-0.05f64..-1e-3, 1e-3f64..0.05]) {
        let fit = bt_fit(&PairCounts::unnamed(wins.clone())).unwrap();
        let mut nudged = fit.scores.clone();
        nudged[i] += delta;
        prop_assert!(log_likelihood(&wins, &nudged) <= log_likelihood(&wins, &fit.scores) + 1e-12);
    }

    #[test]
    fn adain_leaves_background_untouched_and_matches_moments((content, style, mask) in masked(16)) {
        let shape = Shape::new(1, 2, 4, 4);
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::new(shape, content.clone()).unwrap());
        let s = tape.constant(Tensor::new(shape, style).unwrap());
        let m = tape.constant(Tensor::new(shape.with_channels(1), mask.iter().map(|&b| b as u8 as f64).collect()).unwrap());
        let out = adain_stylize(&mut tape, c, s, m).unwrap();
        let (out, style) = (tape.value(out), tape.value(s));
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                for ch in 0..2 {
                    prop_assert_eq!(out.data()[ch * 16 + i], content[ch * 16 + i]);
                }
            }
        }
        for ch in 0..2 {
            let (fg_mu, _) = region_moments(out, 0, ch, |y, x| mask[y * 4 + x]);
            let (bg_mu, _) = region_moments(style, 0, ch, |_, _| true);
            prop_assert!((fg_mu - bg_mu).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composites_only_change_masked_pixels(seed in any::<u64>(), size in prop_oneof![Just(64usize), Just(96), Just(128)]) {
        let corpus = Corpus::synthetic(2, 2, 80, seed % 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, mask) = &corpus.foregrounds[(seed % 2) as usize];
        if let Ok(s) = composite(img, mask, &corpus.backgrounds[0], size, &mut rng) {
            let a = s.area_fraction();
            prop_assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&a), "{}", a);
            let m = &s.mask;
            for y in 0..size {
                for x in 0..size {
                    let v = m.at(0, 0, y, x);
                    prop_assert!(v == 0.0 || v == 1.0);
                    if v == 0.0 {
                        for c in 0..3 {
                            prop_assert_eq!(s.composite.at(0, c, y, x), s.background.at(0, c, y, x));
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Any truncation or single-byte corruption is reported, never a panic
    /// or a silently different state.
    #[test]
    fn damaged_checkpoints_are_rejected(cut in 1usize..4096, flip in any::<prop::sample::Index>(), bit in 0u8..8) {
        thread_local! {
            static BYTES: Vec<u8> = checkpoint::to_bytes(&TrainState::new(suite_config(0, 8)).unwrap()).unwrap();
        }
        BYTES.with(|bytes| {
            let cut = cut.min(bytes.len());
            prop_assert!(checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
            let mut flipped = bytes.clone();
            let i = flip.index(flipped.len());
            flipped[i] ^= 1 << bit;
            if let Ok(state) = checkpoint::from_bytes(&flipped) {
                // a flip inside a payload decodes, but never to the same bytes
                prop_assert_ne!(checkpoint::to_bytes(&state).unwrap(), bytes.clone());
            }
            Ok(())
        })?;
    }
}
