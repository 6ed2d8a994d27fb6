//! Randomized invariants across modules.

use proptest::prelude::*;

use sepseg_core::infer::{ensemble_fuse, entropy_map, vvc};
use sepseg_core::metrics::{assd, dsc_masks, hausdorff, hd95};
use sepseg_core::volgrid::Dims;
use sepseg_core::{LabelMap, ProbMap};

fn mask_strategy(dims: Dims) -> impl Strategy<Value = Vec<bool>> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(prop::bool::weighted(0.3), n)
        .prop_filter("non-empty", |m| m.iter().any(|&b| b))
}

/// Places `m` into a grid of `big` extents at `off`.
fn embed(m: &[bool], dims: Dims, big: Dims, off: Dims) -> Vec<bool> {
    let mut out = vec![false; big.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if m[(z * dims[1] + y) * dims[2] + x] {
                    out[((z + off[0]) * big[1] + y + off[1]) * big[2] + x + off[2]] = true;
                }
            }
        }
    }
    out
}

const DIMS: Dims = [3, 5, 6];
const SPACING: [f64; 3] = [3.0, 1.0, 1.0];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_symmetric(a in mask_strategy(DIMS), b in mask_strategy(DIMS)) {
        prop_assert_eq!(dsc_masks(&a, &b), dsc_masks(&b, &a));
        prop_assert_eq!(hd95(&a, &b, DIMS, SPACING).unwrap(), hd95(&b, &a, DIMS, SPACING).unwrap());
        let (x, y) = (assd(&a, &b, DIMS, SPACING).unwrap(), assd(&b, &a, DIMS, SPACING).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(hd95(&a, &b, DIMS, SPACING).unwrap() <= hausdorff(&a, &b, DIMS, SPACING).unwrap());
    }

    #[test]
    fn metrics_translation_invariant(a in mask_strategy(DIMS), b in mask_strategy(DIMS), dz in 0usize..3, dy in 0usize..3, dx in 0usize..3) {
        // a one-voxel margin keeps the volume border away from both placements
        let big = [DIMS[0] + 4, DIMS[1] + 4, DIMS[2] + 4];
        let (o0, o1) = ([1, 1, 1], [1 + dz, 1 + dy, 1 + dx]);
        let (a0, b0) = (embed(&a, DIMS, big, o0), embed(&b, DIMS, big, o0));
        let (a1, b1) = (embed(&a, DIMS, big, o1), embed(&b, DIMS, big, o1));
        prop_assert_eq!(dsc_masks(&a0, &b0), dsc_masks(&a1, &b1));
        prop_assert!((hd95(&a0, &b0, big, SPACING).unwrap() - hd95(&a1, &b1, big, SPACING).unwrap()).abs() < 1e-9);
        prop_assert!((assd(&a0, &b0, big, SPACING).unwrap() - assd(&a1, &b1, big, SPACING).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_a_convex_combination(
        raw in prop::collection::vec(0.0f32..=1.0, 3 * 2 * 4),
        w in prop::collection::vec(0.5f64..6.0, 3 * 2),
    ) {
        let maps: Vec<ProbMap> = raw
            .chunks(8)
            .map(|c| ProbMap::new([1, 2, 2], [1.0; 3], 2, c.to_vec()).unwrap())
            .collect();
        let weights: Vec<Vec<f64>> = w.chunks(2).map(|c| c.to_vec()).collect();
        let f = ensemble_fuse(&maps, &weights).unwrap();
        for i in 0..8 {
            let lo = maps.iter().map(|m| m.probs()[i]).fold(f32::INFINITY, f32::min);
            let hi = maps.iter().map(|m| m.probs()[i]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(f.probs()[i] >= lo && f.probs()[i] <= hi);
        }
    }

    #[test]
    fn entropy_permutation_invariant(labels in prop::collection::vec(0u8..4, 5 * 6), rot in 0usize..5) {
        let maps: Vec<LabelMap> = labels
            .chunks(6)
            .map(|c| LabelMap::new([1, 2, 3], [1.0; 3], 4, c.to_vec()).unwrap())
            .collect();
        let mut perm = maps.clone();
        perm.rotate_left(rot);
        perm.swap(0, 4);
        prop_assert_eq!(entropy_map(&maps).unwrap(), entropy_map(&perm).unwrap());
    }

    #[test]
    fn vvc_scale_invariant(counts in prop::collection::vec(1u64..10_000, 2..8), k in 1u64..50) {
        let scaled: Vec<u64> = counts.iter().map(|c| c * k).collect();
        let a = vvc(&counts, [3.0, 1.0, 1.0]).unwrap();
        let b = vvc(&scaled, [3.0, 1.0, 1.0]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let c = vvc(&counts, [2.0, 0.5, 0.5]).unwrap();
        prop_assert!((a - c).abs() < 1e-12);
    }
}
