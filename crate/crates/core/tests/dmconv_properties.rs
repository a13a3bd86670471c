//! Properties of masked convolution and mask diffusion.

mod common;

use ndarray::{Array3, Array4};
use plume::dmconv::{diffuse_mask, masked_conv, MaskState, MaskedConvLayer};
use plume::nn::Kernel;
use plume::sim::GridSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer(mask_kernel: usize, sigma: f64) -> MaskedConvLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    MaskedConvLayer::new(2, 3, Kernel::new(3, 3, 3), mask_kernel, sigma, &mut rng).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = Array3<f64>> {
    (1usize..4, 3usize..10, 3usize..10).prop_flat_map(|(t, nx, ny)| {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], t * nx * ny)
            .prop_map(move |v| Array3::from_shape_vec((t, nx, ny), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diffused_mask_is_bounded_and_never_shrinks(
        m in mask_strategy(),
        k in prop_oneof![Just(3usize), Just(5), Just(9)],
        sigma in 0.3f64..3.0,
    ) {
        let l = layer(k, sigma);
        let out = diffuse_mask(&MaskState::new(m.clone()).unwrap(), &l);
        for (&a, &b) in out.values().iter().zip(&m) {
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn diffusion_acts_on_each_frame_independently(m in mask_strategy(), sigma in 0.3f64..3.0) {
        let l = layer(5, sigma);
        let whole = diffuse_mask(&MaskState::new(m.clone()).unwrap(), &l);
        for t in 0..m.dim().0 {
            let single = m.slice(ndarray::s![t..t + 1, .., ..]).to_owned();
            let alone = diffuse_mask(&MaskState::new(single).unwrap(), &l);
            prop_assert_eq!(alone.values().index_axis(ndarray::Axis(0), 0), whole.values().index_axis(ndarray::Axis(0), t));
        }
    }

    #[test]
    fn off_support_features_are_ignored(m in mask_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = layer(3, 1.0);
        let (t, nx, ny) = m.dim();
        let x = Array4::from_shape_fn((2, t, nx, ny), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let mut y = x.clone();
        for ((c, tt, i, j), v) in y.indexed_iter_mut() {
            if m[[tt, i, j]] == 0.0 {
                *v = 100.0 + c as f64;
            }
        }
        let a = masked_conv(&x, &m, &l).unwrap();
        let b = masked_conv(&y, &m, &l).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
        }
    }
}

#[test]
fn full_mask_stack_matches_plain_convolution() {
    let err = common::full_mask_equivalence(20);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn single_sensor_support_radius_grows_one_node_per_layer() {
    let n = 21;
    let l = layer(3, 1.0);
    let mut m0 = Array3::zeros((1, n, n));
    m0[[0, 10, 10]] = 1.0;
    let mut m = MaskState::new(m0).unwrap();
    for depth in 1..=8 {
        m = diffuse_mask(&m, &l);
        let radius = m
            .values()
            .indexed_iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|((_, i, j), _)| i.abs_diff(10).max(j.abs_diff(10)))
            .max()
            .unwrap();
        assert_eq!(radius, depth);
        assert_eq!(m.support_size(), (2 * depth + 1).pow(2));
    }
}

#[test]
fn default_depth_covers_the_default_grid() {
    let r = common::mask_stack(&GridSpec::default(), 100, 30, 8, 17);
    assert_eq!((r.bounds_violations, r.shrink_violations, r.uncovered), (0, 0, 0));
}

#[test]
fn depth_three_leaves_gaps() {
    // the same networks are not covered by a shallower stack
    let r = common::mask_stack(&GridSpec::default(), 20, 30, 3, 17);
    assert!(r.uncovered > 0);
}
