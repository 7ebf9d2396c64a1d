mod common;

use choicenet::arch::{
    count_parameters, module_input_channels, preset, preset_names, shape_trace, ChoiceBlock, ChoiceModule,
    ChoiceModuleConfig, ModelConfig, Network, SkipMode,
};
use choicenet::layers::{Builder, Dropout};
use choicenet::params::{Forward, Mode};
use choicenet::{Error, Tensor};
use common::random_model_config;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn module_cfg(in_c: usize, cb: usize, c: usize, mode: SkipMode, shared: bool, projection: bool) -> ChoiceModuleConfig {
    ChoiceModuleConfig {
        skip_mode: mode,
        share_branch_weights: shared,
        skip_projection: projection,
        ..ChoiceModuleConfig::new(in_c, cb, c)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn module_width_is_six_c_plus_cb_and_spatial_size_is_kept(
        in_c in 1usize..6, cb in 1usize..5, c in 1usize..5, h in 1usize..7, w in 1usize..7,
        per_conv in any::<bool>(), shared in any::<bool>(), seed in any::<u64>(),
    ) {
        let mode = if per_conv { SkipMode::PerConv } else { SkipMode::Chain };
        let cfg = module_cfg(in_c, cb, c, mode, shared, cb != c);
        prop_assert_eq!(cfg.output_channels(), 6 * c + cb);
        let mut b = Builder::new(seed);
        let module = ChoiceModule::new(&mut b, "m", cfg).unwrap();
        let (params, buffers) = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Forward::new(&params, &buffers, Mode::Train, 0);
        let x = f.input(Tensor::randn(vec![2, in_c, h, w], 1.0, &mut rng).unwrap());
        let y = module.forward(&mut f, x).unwrap();
        prop_assert_eq!(f.tape.value(y).dims(), &[2, 6 * c + cb, h, w]);
    }

    #[test]
    fn skip_minus_plain_output_is_the_bottleneck_output(
        in_c in 1usize..6, c in 1usize..5, h in 1usize..7, w in 1usize..7, eval in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut b = Builder::new(seed);
        let module = ChoiceModule::new(&mut b, "m", module_cfg(in_c, c, c, SkipMode::Chain, true, false)).unwrap();
        let (params, buffers) = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mode = if eval { Mode::Eval } else { Mode::Train };
        let mut f = Forward::new(&params, &buffers, mode, 0);
        let x = f.input(Tensor::randn(vec![2, in_c, h, w], 1.0, &mut rng).unwrap());
        let parts = module.forward_parts(&mut f, x).unwrap();
        let e = f.tape.value(parts.e).clone();
        for k in 0..3 {
            let (a, plain) = (f.tape.value(parts.a[k]), f.tape.value(parts.b[k]));
            for ((&av, &bv), &ev) in a.data().iter().zip(plain.data()).zip(e.data()) {
                // a is computed as b + e, so this holds bit for bit
                prop_assert_eq!(av, bv + ev);
                // and the difference recovers e up to one rounding of the sum
                prop_assert!((av - bv - ev).abs() <= 4.0 * f64::EPSILON * av.abs().max(bv.abs()).max(ev.abs()));
            }
        }
    }

    #[test]
    fn dense_wiring_widens_each_module_input(
        in_c in 1usize..8, cb in 1usize..4, n in 1usize..5, h in 1usize..5, seed in any::<u64>(),
    ) {
        let c = cb;
        let widths = module_input_channels(in_c, cb, c, n);
        for (i, &wi) in widths.iter().enumerate() {
            prop_assert_eq!(wi, in_c + i * (6 * c + cb));
        }
        let mut b = Builder::new(seed);
        let block = ChoiceBlock::new(&mut b, "block", ChoiceModuleConfig::new(in_c, cb, c), n, Dropout::new(0.0).unwrap()).unwrap();
        let got: Vec<usize> = block.modules.iter().map(ChoiceModule::in_channels).collect();
        prop_assert_eq!(got, widths);
        let (params, buffers) = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Forward::new(&params, &buffers, Mode::Train, 0);
        let x = f.input(Tensor::randn(vec![1, in_c, h, h], 1.0, &mut rng).unwrap());
        let y = block.forward(&mut f, x).unwrap();
        prop_assert_eq!(f.tape.value(y).dims(), &[1, 6 * c + cb, h, h]);
    }

    #[test]
    fn analytic_parameter_count_matches_enumeration(seed in any::<u64>()) {
        let cfg = random_model_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let net = Network::new(&cfg, seed).unwrap();
        let analytic = count_parameters(&cfg).unwrap();
        prop_assert_eq!(analytic.total, net.params.numel());
        prop_assert_eq!(analytic, net.enumerate_parameters());
    }

    #[test]
    fn random_networks_follow_their_shape_trace(seed in any::<u64>()) {
        let cfg = random_model_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let net = Network::new(&cfg, seed).unwrap();
        let trace = shape_trace(&cfg).unwrap();
        prop_assert_eq!(trace.last().unwrap().resolution, cfg.resolution / 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![2, cfg.in_channels, cfg.resolution, cfg.resolution], 1.0, &mut rng).unwrap();
        let logits = net.predict(&x).unwrap();
        prop_assert_eq!(logits.dims(), &[2, cfg.num_classes]);
        prop_assert!(logits.all_finite());
    }
}

#[test]
fn presets_have_exact_parameter_counts() {
    for name in preset_names() {
        let cfg = preset(name).unwrap();
        let net = Network::new(&cfg, 0).unwrap();
        assert_eq!(count_parameters(&cfg).unwrap(), net.enumerate_parameters(), "{name}");
    }
}

#[test]
fn projection_is_required_when_widths_differ() {
    let mut b = Builder::new(0);
    let err = ChoiceModule::new(&mut b, "m", module_cfg(4, 3, 5, SkipMode::Chain, true, false)).unwrap_err();
    assert!(matches!(err, Error::ChannelMismatch { .. }));
    assert!(ChoiceModule::new(&mut b, "p", module_cfg(4, 3, 5, SkipMode::Chain, true, true)).is_ok());
}

fn tiny() -> ModelConfig {
    preset("choicenet-tiny").unwrap()
}

#[test]
fn initialization_is_deterministic_per_seed() {
    assert_eq!(Network::new(&tiny(), 7).unwrap(), Network::new(&tiny(), 7).unwrap());
    assert_ne!(Network::new(&tiny(), 7).unwrap().params, Network::new(&tiny(), 8).unwrap().params);
}

#[test]
fn gradient_reaches_first_module_parameters() {
    let data = choicenet::data::generate_synthetic(8, 4, 8, 0).unwrap();
    let norm = choicenet::data::Normalization::fit(&data).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let (x, labels) = choicenet::data::collate(&refs, &norm).unwrap();
    for seed in 0..5 {
        let net = Network::new(&tiny(), seed).unwrap();
        let mut f = Forward::new(&net.params, &net.buffers, Mode::Train, 0);
        let xv = f.input(x.clone());
        let logits = net.forward(&mut f, xv).unwrap();
        let loss = f.tape.softmax_cross_entropy(logits, &labels).unwrap();
        let grads = f.tape.backward(loss).unwrap();
        let grads = f.param_grads(grads).unwrap();
        let mut first_module = net.params.iter().filter(|(_, name, _)| name.starts_with("block1.module1.")).peekable();
        assert!(first_module.peek().is_some());
        for (id, name, _) in first_module {
            assert!(grads[id.index()].l2_norm() > 0.0, "seed {seed}: no gradient reaches {name}");
        }
    }
}
