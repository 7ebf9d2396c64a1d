mod common;

use choicenet::autograd::GradCheckConfig;
use choicenet::checks::layer_targets;
use choicenet::kernels::{avg_pool2, conv2d, conv2d_backward, max_pool2};
use choicenet::Tensor;
use common::{conv_backward_oracle, conv_oracle, max_abs_diff, pool_oracle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 1usize..9, w in 1usize..9,
        k in prop::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..3, bias in any::<bool>(), seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![n, c, h, w], 1.0, &mut rng).unwrap();
        let wt = Tensor::randn(vec![o, c, k, k], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(vec![o], 1.0, &mut rng).unwrap();
        let b = bias.then_some(&b);
        let fast = conv2d(&x, &wt, b, stride, pad).unwrap();
        let slow = conv_oracle(&x, &wt, b, stride, pad);
        prop_assert_eq!(fast.dims(), slow.dims());
        prop_assert!(max_abs_diff(&fast, &slow) < 1e-12);

        let go = Tensor::randn(fast.dims().to_vec(), 1.0, &mut rng).unwrap();
        let grads = conv2d_backward(&go, &x, &wt, stride, pad).unwrap();
        let (gx, gw, gb) = conv_backward_oracle(&go, &x, &wt, stride, pad);
        prop_assert!(max_abs_diff(&grads.input, &gx) < 1e-12);
        prop_assert!(max_abs_diff(&grads.weight, &gw) < 1e-12);
        prop_assert!(max_abs_diff(&grads.bias, &gb) < 1e-12);
    }

    #[test]
    fn pooling_matches_window_scan(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![n, c, 2 * h, 2 * w], 1.0, &mut rng).unwrap();
        let (mx, av) = pool_oracle(&x);
        let (fast_max, argmax) = max_pool2(&x).unwrap();
        prop_assert!(max_abs_diff(&fast_max, &mx) < 1e-12);
        prop_assert!(argmax.iter().zip(fast_max.data()).all(|(&i, &v)| x.data()[i] == v));
        prop_assert!(max_abs_diff(&avg_pool2(&x).unwrap(), &av) < 1e-12);
    }
}

#[test]
fn odd_spatial_pooling_is_rejected() {
    let x = Tensor::zeros(vec![1, 1, 3, 4]).unwrap();
    assert!(max_pool2(&x).is_err());
    assert!(avg_pool2(&x).is_err());
}

#[test]
fn every_layer_passes_finite_difference_check_for_five_seeds() {
    let cfg = GradCheckConfig { tolerance: 1e-4, ..Default::default() };
    for seed in 0..5 {
        for mut target in layer_targets(seed).unwrap() {
            let report = (target.model)(&cfg, &target.input).unwrap();
            assert!(report.passed(), "{} seed {seed}: {}", target.name, report.to_csv());
            assert!(report.groups.iter().any(|g| g.checked > 0), "{} checked nothing", target.name);
        }
    }
}
