//! Full-network gradient checks against an independent f64 forward pass.

mod common;

use common::{detailizer_check, random_grid, reference};
use voxdetail::detailizer::{DetailizerConfig, DetailizerModel};
use voxdetail::nn::Tensor;

#[test]
fn reference_forward_matches_model() {
    let model = DetailizerModel::build(DetailizerConfig::with_resolution(4, 16)).unwrap();
    let coarse = random_grid(4, 2);
    let out = model.forward(&coarse).unwrap();
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    for (albedo, got) in [(false, &out.density), (true, &out.albedo)] {
        let want = reference(&model, &coarse, &params, albedo);
        let worst = got.data().iter().zip(&want).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "albedo={albedo}: {worst}");
    }
}

// Leaky-ReLU kinks inside the ±h interval spoil central differences at
// h = 1e-3 for a few deep parameters; 1e-5 against the f64 forward avoids
// them without f32 cancellation.
#[test]
fn detailizer_gradients_match_finite_differences() {
    for seed in [5, 6] {
        let r = detailizer_check(30, 1e-5, seed);
        assert_eq!(r.probes.len(), 30);
        assert_eq!(r.passed(1e-3), 30, "seed {seed}: max rel err {:e}", r.max_rel_err());
    }
}
