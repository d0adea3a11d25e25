//! Property tests for structural invariants.

use proptest::prelude::*;

use hiba_core::attention::{AttentionMaskSpec, MaskKind};
use hiba_core::autodiff::Graph;
use hiba_core::heads::to_position_grids;
use hiba_core::series::{Frequency, Series};
use hiba_core::tensor::Tensor;
use hiba_core::tokenizer::{denormalize, instance_normalize, patch, SIGMA_EPS};

proptest! {
    /// Patching arithmetic: n = ⌈T/P⌉, pad on the left, mask marks exactly
    /// the padded and missing slots, and the last value lands in the last
    /// slot.
    #[test]
    fn patch_layout_invariants(
        values in prop::collection::vec(-100.0f64..100.0, 1..300),
        missing in prop::collection::vec(any::<bool>(), 1..300),
        p in 1usize..17,
    ) {
        let t = values.len();
        let observed: Vec<bool> = (0..t).map(|i| !missing[i % missing.len()]).collect();
        let norm: Vec<f64> = values.clone();
        let patched = patch(&norm, &observed, p, 0.0, 1.0).unwrap();

        prop_assert_eq!(patched.n, t.div_ceil(p));
        prop_assert_eq!(patched.pad_len, patched.n * p - t);
        let mask = patched.mask.data();
        for slot in 0..patched.n * p {
            let expect = if slot < patched.pad_len {
                1.0
            } else if observed[slot - patched.pad_len] {
                0.0
            } else {
                1.0
            };
            prop_assert_eq!(mask[slot], expect, "slot {}", slot);
        }
        // Position T maps to the final slot of the final patch.
        prop_assert_eq!(patched.patches.data()[patched.n * p - 1], norm[t - 1]);
    }

    /// Normalization is invariant to positive affine maps and inverts
    /// exactly for well-conditioned series.
    #[test]
    fn normalize_affine_and_round_trip(
        base in prop::collection::vec(-50.0f64..50.0, 8..120),
        a in 0.1f64..20.0,
        b in -100.0f64..100.0,
    ) {
        let series = Series::fully_observed("p", base.clone(), Frequency::None).unwrap();
        let (norm, mu, sigma) = instance_normalize::<f64>(&series).unwrap();
        prop_assume!(sigma > 10.0 * SIGMA_EPS);

        let scaled = Series::fully_observed(
            "q",
            base.iter().map(|v| a * v + b).collect(),
            Frequency::None,
        ).unwrap();
        let (norm_scaled, _, _) = instance_normalize::<f64>(&scaled).unwrap();
        for (x, y) in norm.iter().zip(&norm_scaled) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
        for (n, v) in norm.iter().zip(&base) {
            let back = denormalize(*n, mu, sigma);
            prop_assert!((back - v).abs() <= 1e-6 * v.abs().max(1.0));
        }
    }

    /// Mask structure: visible pairs of the non-causal intra pattern equal
    /// n·B; the inter lane pattern is the causal triangle per lane; the
    /// dense causal pattern is the global triangle.
    #[test]
    fn mask_visible_pair_counts(m in 1usize..12, b in 1usize..12) {
        let n = m * b;
        let intra = AttentionMaskSpec::new(MaskKind::IntraNonCausal, b).dense_mask(n).unwrap();
        prop_assert_eq!(intra.visible_pairs(), (n * b) as u64);
        let inter = AttentionMaskSpec::new(MaskKind::InterStridedCausal, b).dense_mask(n).unwrap();
        prop_assert_eq!(inter.visible_pairs(), (b * m * (m + 1) / 2) as u64);
        let dense = AttentionMaskSpec::new(MaskKind::DenseCausal, b).dense_mask(n).unwrap();
        prop_assert_eq!(dense.visible_pairs(), (n * (n + 1) / 2) as u64);
    }

    /// Softmax rows are probability vectors regardless of input scale.
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.01f64..30.0,
        seed in any::<u64>(),
    ) {
        let mut rng = hiba_core::rng::Prng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * scale).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x).unwrap();
        let out = g.value(s);
        for r in 0..rows {
            let row = &out.data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    /// Monotonicity repair: arbitrary raw quantile outputs come out
    /// non-decreasing, and denormalization is order-preserving.
    #[test]
    fn quantile_repair_sorts_rows(
        raw in prop::collection::vec(-1e3f64..1e3, 9),
        mu in -50.0f64..50.0,
        sigma in 0.1f64..40.0,
    ) {
        let t = Tensor::<f64>::new([1, 1, 1, 9], raw).unwrap();
        let grids = to_position_grids(&t, 1, 9, mu, sigma).unwrap();
        let row = &grids.values[0][0];
        prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
    }

    /// Checkpoint tensor tables survive a byte round trip exactly.
    #[test]
    fn checkpoint_round_trip(
        vals in prop::collection::vec(-1e6f64..1e6, 1..40),
        step in any::<u64>(),
    ) {
        use hiba_core::train::{checkpoint, AdamState, CheckpointState, TrainConfig};
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::new(vec![vals.len()], vals).unwrap());
        let state = CheckpointState {
            config: TrainConfig::default(),
            step,
            params,
            adam: AdamState::new(),
            rng: hiba_core::rng::Prng::seed_from_u64(step).state(),
        };
        let bytes = checkpoint::encode(&state).unwrap();
        let back = checkpoint::decode::<f64>(&bytes).unwrap();
        prop_assert_eq!(back.step, state.step);
        prop_assert_eq!(back.params["w"].data(), state.params["w"].data());
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    }
}
