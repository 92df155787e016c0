//! Structure confinement and IoU against independent counting oracles.

mod common;

use common::{confinement_violations, packed, random_grid, small_config};
use proptest::prelude::*;
use voxdetail::detailizer::DetailizerModel;
use voxdetail::metrics::{loose_iou, strict_iou, voxelize_density, MetricError};
use voxdetail::OccupancyGrid;

#[test]
fn hundred_random_models_stay_confined() {
    let total: usize = (0..100).map(confinement_violations).sum();
    assert_eq!(total, 0);
}

#[test]
fn iou_matches_bit_counting_on_every_pair_of_2_cubed_grids() {
    let grids: Vec<OccupancyGrid> = (0..256u32)
        .map(|m| OccupancyGrid::from_cells([2; 3], (0..8).map(|i| m >> i & 1 == 1).collect()).unwrap())
        .collect();
    for a in &grids {
        let pa = packed(a);
        for b in &grids {
            let pb = packed(b);
            let (inter, union) = ((pa & pb).count_ones(), (pa | pb).count_ones());
            let strict = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert_eq!(strict_iou(a, b).unwrap(), strict);
            match loose_iou(a, b) {
                Ok(l) => assert_eq!(l, inter as f64 / pa.count_ones() as f64),
                Err(e) => assert!(pa == 0 && e == MetricError::EmptyReference),
            }
        }
    }
}

proptest! {
    #[test]
    fn loose_is_at_least_strict(sa in any::<u64>(), sb in any::<u64>()) {
        let a = random_grid(4, sa);
        let b = random_grid(4, sb);
        prop_assume!(!a.is_vacant());
        prop_assert!(loose_iou(&a, &b).unwrap() >= strict_iou(&a, &b).unwrap());
    }

    #[test]
    fn voxelized_output_never_leaves_the_dilated_input(seed in 0u64..10_000, t in 0.01f32..200.0) {
        let model = DetailizerModel::build(small_config(seed, 4, 8)).unwrap();
        let grid = random_grid(4, seed);
        let out = model.forward(&grid).unwrap();
        let mut d = out.density;
        d.data_mut().iter_mut().for_each(|v| *v *= t);
        let v = voxelize_density(&d, t, 4).unwrap();
        prop_assert!(v.is_subset_of(&grid.dilate(1).unwrap()).unwrap());
    }
}
