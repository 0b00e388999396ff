mod common;

use common::*;
use graphten::graphmod::Affinity;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_stochastic(
        h in 1usize..6, w in 1usize..6, c in 1usize..6,
        gaussian in any::<bool>(), seed in any::<u64>(),
    ) {
        let aff = if gaussian { Affinity::Gaussian } else { Affinity::EmbeddedGaussian };
        prop_assert!(attention_row_error(h, w, c, aff, seed) <= 1e-12);
    }

    #[test]
    fn context_graph_commutes_with_pixel_permutations(
        h in 1usize..6, w in 1usize..6, c in 1usize..6, seed in any::<u64>(),
    ) {
        prop_assert!(cag_equivariance_error(h, w, c, seed) <= 1e-9);
    }

    #[test]
    fn dilated_context_preserves_constant_maps(
        h in 1usize..9, w in 1usize..9, c in 1usize..4,
        dilation in 1usize..4, half in 1usize..3, seed in any::<u64>(),
    ) {
        prop_assert!(dilated_constant_error(h, w, c, dilation, 2 * half + 1, seed) <= 1e-12);
    }

    #[test]
    fn assignment_rows_sum_to_one(
        n in 1usize..30, k in 1usize..6, dim in 1usize..6, seed in any::<u64>(),
    ) {
        prop_assert!(assignment_row_error(n, k, dim, seed) <= 1e-12);
    }

    #[test]
    fn patch_histogram_ignores_descriptor_order(
        d in 1usize..6, k in 1usize..5, dim in 1usize..5, seed in any::<u64>(),
    ) {
        prop_assert!(hist_permutation_error(d, k, dim, seed) <= 1e-9);
    }

    #[test]
    fn aggregate_ignores_patch_order_and_matches_per_patch_sum(
        h in 3usize..8, w in 3usize..8, c in 1usize..4,
        stride in 1usize..3, k in 1usize..5, embed in 1usize..4, seed in any::<u64>(),
    ) {
        let cfg = patch_config(vec![1, 2, 3], stride, embed);
        prop_assert!(aggregate_permutation_error(h, w, c, &cfg, k, seed) <= 1e-9);
    }
}

#[test]
fn patch_count_law_holds_for_every_small_configuration() {
    assert_eq!(patch_count_mismatches(16), vec![]);
}
