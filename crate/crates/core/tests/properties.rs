use percept_tts::evalkit::{edit_distance, fcr, paired_t_test, tmsr, ScoreHistogram};
use percept_tts::perceptual::{combined_loss, perceptual_loss, LambdaSchedule};
use percept_tts::ttscore::{durations_from_alignment, guided_weight, AttentionAlignment};
use proptest::prelude::*;

fn phones() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..14)
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in phones(), b in phones(), c in phones()) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
    }

    #[test]
    fn relabelling_phones_keeps_the_distance(a in phones(), b in phones(), shift in 1u8..50) {
        let relabel = |v: &[u8]| v.iter().map(|x| format!("p{}", x + shift)).collect::<Vec<_>>();
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&relabel(&a), &relabel(&b)));
    }

    #[test]
    fn ratio_identities(counts in prop::array::uniform5(0u64..200), k in 1u64..7) {
        let h = ScoreHistogram::new(counts);
        let scaled = ScoreHistogram::new(counts.map(|c| c * k));
        if h.n_total() > 0 {
            let f = fcr(&h).unwrap();
            let low = (counts[0] + counts[1] + counts[2]) as f64 / h.n_total() as f64;
            prop_assert!((f + low - 1.0).abs() < 1e-12);
            prop_assert!((fcr(&scaled).unwrap() - f).abs() < 1e-12);
        } else {
            prop_assert!(fcr(&h).is_err());
        }
        match (tmsr(&h), tmsr(&scaled)) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x));
            }
            (None, None) => prop_assert_eq!(counts[0] + counts[1] + counts[2], 0),
            _ => prop_assert!(false, "tmsr defined for only one of the histograms"),
        }
    }

    #[test]
    fn paired_t_is_symmetric_and_shift_invariant(
        pairs in prop::collection::vec((1.0f64..5.0, 1.0f64..5.0), 2..30),
        shift in -2.0f64..2.0,
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert_eq!(ab.is_some(), ba.is_some());
        if let (Some(x), Some(y)) = (ab, ba) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
            let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
            if let Some(z) = paired_t_test(&a2, &b2).unwrap() {
                prop_assert!((x - z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn guided_weight_is_symmetric_and_bounded(n in 0usize..40, t in 0usize..40, big_n in 1usize..40, big_t in 1usize..40, g in 0.05f64..1.0) {
        let w = guided_weight(n, t, big_n, big_t, g);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(w, guided_weight(t, n, big_t, big_n, g));
        prop_assert_eq!(guided_weight(n, n, big_n, big_n, g), 0.0);
    }

    #[test]
    fn lambda_decays_monotonically_to_its_floor(
        l0 in 0.0f64..200.0,
        decay in 0.0f64..5.0,
        floor_frac in 0.0f64..1.0,
        e in 0i64..5000,
    ) {
        let s = LambdaSchedule::new(l0, decay, l0 * floor_frac).unwrap();
        let a = s.lambda_at(e).unwrap();
        let b = s.lambda_at(e + 1).unwrap();
        prop_assert!(b <= a);
        prop_assert!(a >= s.lambda_min && a <= s.lambda0);
    }

    #[test]
    fn combined_loss_is_a_convex_blend(con in 0.0f64..100.0, per in 0.0f64..4.0, lambda in 0.0f64..1e4) {
        let l = combined_loss(con, per, lambda).unwrap();
        prop_assert!(l >= con.min(per) - 1e-12 && l <= con.max(per) + 1e-12);
        prop_assert!((combined_loss(con, con, lambda).unwrap() - con).abs() <= 1e-12 * con.max(1.0));
    }

    #[test]
    fn perceptual_loss_is_mean_distance_to_target(scores in prop::collection::vec(1.0f64..5.0, 1..20)) {
        let l = perceptual_loss(&scores, 5.0).unwrap();
        let expect = scores.iter().map(|s| 5.0 - s).sum::<f64>() / scores.len() as f64;
        prop_assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn distilled_durations_cover_every_frame(
        n in 1usize..8,
        t in 1usize..30,
        seed in prop::collection::vec(0.01f64..1.0, 240),
    ) {
        let mut w = seed[..n * t].to_vec();
        for frame in 0..t {
            let col: f64 = (0..n).map(|c| w[c * t + frame]).sum();
            for c in 0..n {
                w[c * t + frame] /= col;
            }
        }
        let a = AttentionAlignment::new(n, t, w).unwrap();
        let d = durations_from_alignment(&a);
        prop_assert_eq!(d.len(), n);
        prop_assert_eq!(d.iter().sum::<usize>(), t);
    }
}
