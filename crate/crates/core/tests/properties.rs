use proptest::prelude::*;

use tokengate::denoiser::{DenoiserConfig, DenoiserMode, DenoiserParams};
use tokengate::gate::{hard_topk_select, resize_mask, vp_mix, MaskRecord, SelectionMask, TokenSequence};
use tokengate::numcore::{Rng, Tensor};
use tokengate::scorer::BlockConfig;
use tokengate::softtopk::{soft_topk_forward, zscore};

fn scores_and_budget() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-5.0f64..5.0, 2..80).prop_flat_map(|s| {
        let n = s.len();
        (Just(s), 1..=n)
    })
}

proptest! {
    #[test]
    fn hard_selection_keeps_the_top_k_in_position_order((scores, k) in scores_and_budget()) {
        let n = scores.len();
        let seq = TokenSequence::from_grid(Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap()).unwrap();
        let (kept, mask) = hard_topk_select(&seq, &scores, k).unwrap();
        prop_assert_eq!(kept.len(), k);
        prop_assert!(kept.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&kept.positions, &mask.kept_indices);
        prop_assert_eq!(mask.binary_mask.iter().map(|&b| b as usize).sum::<usize>(), k);
        let worst_kept = kept.positions.iter().map(|&p| scores[p]).fold(f64::INFINITY, f64::min);
        for p in (0..n).filter(|p| mask.binary_mask[*p] == 0) {
            prop_assert!(scores[p] <= worst_kept);
        }
        for (r, &p) in kept.positions.iter().enumerate() {
            prop_assert_eq!(kept.tokens.row(r)[0], p as f64);
        }
    }

    #[test]
    fn soft_weights_respect_the_budget_and_the_score_order(
        (scores, k) in scores_and_budget(),
        tau in 0.01f64..3.0,
    ) {
        let s = zscore(&scores);
        let g = soft_topk_forward(&s, k, tau).unwrap();
        let n = s.len();
        prop_assert!((g.sum() - k as f64).abs() < 1e-6 * n as f64);
        prop_assert!(g.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        for i in 0..n {
            for j in 0..n {
                if s[i] > s[j] {
                    prop_assert!(g.alpha[i] >= g.alpha[j]);
                }
            }
        }
    }

    #[test]
    fn vp_mix_interpolates_between_signal_and_noise(seed in any::<u64>(), a in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(vec![3, 4], rng.normals(12)).unwrap();
        let e = Tensor::new(vec![3, 4], rng.normals(12)).unwrap();
        let out = vp_mix(&x, &[1.0, 0.0, a], &e).unwrap();
        prop_assert_eq!(out.row(0), x.row(0));
        prop_assert_eq!(out.row(1), e.row(1));
        for c in 0..4 {
            let want = a.sqrt() * x.get2(2, c) + (1.0 - a).sqrt() * e.get2(2, c);
            prop_assert!((out.get2(2, c) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn masks_survive_serialization_and_identity_resizing(
        kept in prop::collection::btree_set(0usize..48, 1..48),
    ) {
        let mask = SelectionMask::from_kept(kept.into_iter().collect(), 48).unwrap();
        prop_assert_eq!(&resize_mask(&mask, (6, 8), (6, 8)).unwrap(), &mask);
        let up = resize_mask(&mask, (6, 8), (12, 16)).unwrap();
        prop_assert_eq!(up.k(), 4 * mask.k());
        prop_assert_eq!(&resize_mask(&up, (12, 16), (6, 8)).unwrap(), &mask);
        let rec = MaskRecord::new(3, (6, 8), &mask);
        let line = serde_json::to_string(&rec).unwrap();
        prop_assert_eq!(serde_json::from_str::<MaskRecord>(&line).unwrap().to_mask().unwrap(), mask);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diagonal_denoiser_rows_depend_only_on_themselves(seed in any::<u64>(), row in 0usize..6, delta in -2.0f64..2.0) {
        let cfg = DenoiserConfig {
            block: BlockConfig { width: 8, heads: 2, ffn_mult: 2 },
            mode: DenoiserMode::Diagonal,
            zero_init: false,
        };
        let mut rng = Rng::new(seed);
        let den = DenoiserParams::init(cfg, &mut rng).unwrap();
        let x = Tensor::new(vec![6, 8], rng.normals(48)).unwrap();
        let mut y = x.clone();
        for (c, v) in y.row_mut(row).iter_mut().enumerate() {
            *v += delta * (c as f64 - 3.5);
        }
        let a = den.denoise(&TokenSequence::from_grid(x).unwrap()).unwrap().tokens;
        let b = den.denoise(&TokenSequence::from_grid(y).unwrap()).unwrap().tokens;
        for r in (0..6).filter(|&r| r != row) {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }
}
