mod common;

use common::{flood_fill, mask_from, oracle_count};
use fedia_core::{count_components, label_components, Connectivity, Dims, Grid, Mask};
use proptest::prelude::*;

fn conn() -> impl Strategy<Value = Connectivity> {
    prop_oneof![Just(Connectivity::Face), Just(Connectivity::Full)]
}

fn mask_3d() -> impl Strategy<Value = Mask> {
    (1usize..=6, 1usize..=8, 1usize..=8, 0.1f64..0.7).prop_flat_map(|(d, h, w, p)| {
        let dims = Dims::new(d, h, w);
        proptest::collection::vec(proptest::bool::weighted(p), dims.len()).prop_map(move |b| mask_from(dims, &b))
    })
}

fn mirror(mask: &Mask, axis: usize) -> Mask {
    let d = mask.dims();
    let mut out = Grid::zeros(d);
    for z in 0..d.depth {
        for y in 0..d.height {
            for x in 0..d.width {
                let (sz, sy, sx) = match axis {
                    0 => (d.depth - 1 - z, y, x),
                    1 => (z, d.height - 1 - y, x),
                    _ => (z, y, d.width - 1 - x),
                };
                out.set(z, y, x, mask.get(sz, sy, sx));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn labels_match_flood_fill(mask in mask_3d(), c in conn()) {
        let map = label_components(&mask, c);
        let (labels, n) = flood_fill(&mask, c);
        prop_assert_eq!(map.count, n);
        prop_assert_eq!(map.labels.as_slice(), &labels[..]);
        prop_assert_eq!(map.sizes.iter().sum::<usize>(), mask.count_ones());
    }

    #[test]
    fn size_filter_matches_oracle(mask in mask_3d(), c in conn(), min_size in 1usize..6) {
        prop_assert_eq!(count_components(&mask, c, min_size), oracle_count(&mask, c, min_size));
    }

    #[test]
    fn min_size_one_is_unfiltered(mask in mask_3d(), c in conn()) {
        prop_assert_eq!(count_components(&mask, c, 1), label_components(&mask, c).count);
    }

    #[test]
    fn count_invariant_under_flips(mask in mask_3d(), c in conn(), axis in 0usize..3) {
        prop_assert_eq!(
            label_components(&mirror(&mask, axis), c).count,
            label_components(&mask, c).count
        );
    }

    #[test]
    fn adding_voxels_raises_count_by_at_most_their_number(
        mask in mask_3d(),
        c in conn(),
        picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let before = label_components(&mask, c).count;
        let mut grown = mask.clone();
        let mut added = 0;
        for p in &picks {
            let i = p.index(mask.dims().len());
            if grown.as_slice()[i] == 0 {
                grown.as_mut_slice()[i] = 1;
                added += 1;
            }
        }
        let after = label_components(&grown, c).count;
        prop_assert!(after <= before + added);
    }

    #[test]
    fn removing_a_component_drops_count_by_one(mask in mask_3d(), c in conn(), pick in any::<prop::sample::Index>()) {
        let map = label_components(&mask, c);
        prop_assume!(map.count > 0);
        let victim = 1 + pick.index(map.count) as u32;
        let mut cut = mask.clone();
        for (v, &l) in cut.as_mut_slice().iter_mut().zip(map.labels.as_slice()) {
            if l == victim {
                *v = 0;
            }
        }
        prop_assert_eq!(label_components(&cut, c).count, map.count - 1);
    }
}

#[test]
fn labels_are_consecutive_and_adjacent_voxels_agree() {
    let mask = mask_from(
        Dims::plane(4, 5),
        &[
            true, true, false, false, true, //
            false, true, false, true, true, //
            false, false, false, false, false, //
            true, false, true, true, false,
        ],
    );
    let map = label_components(&mask, Connectivity::Face);
    assert_eq!(map.count, 4);
    assert_eq!(map.sizes, vec![3, 3, 1, 2]);
    let seen: std::collections::BTreeSet<u32> = map.labels.as_slice().iter().copied().filter(|&l| l > 0).collect();
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn fifty_random_volumes_agree_with_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let dims = Dims::new(8, 8, 8);
        let bits: Vec<bool> = (0..dims.len()).map(|_| rng.gen_bool(0.35)).collect();
        let mask = mask_from(dims, &bits);
        assert_eq!(label_components(&mask, Connectivity::Face).count, flood_fill(&mask, Connectivity::Face).1);
    }
}
