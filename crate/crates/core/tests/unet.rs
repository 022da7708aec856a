use fedseg::error::Error;
use fedseg::model::{attention_gate, AttentionUNet, GateParams, Segmenter, UNetConfig};
use fedseg::tensor::{gradcheck, DiceReduction, GradcheckOptions, Mode, Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .unwrap()
}

fn unet(seed: u64) -> AttentionUNet<f64> {
    AttentionUNet::new(UNetConfig::default(), seed).unwrap()
}

/// Trainable parameter count enumerated layer by layer.
fn expected_count(levels: usize, base: usize) -> usize {
    let ch = |i: usize| base * (1 << i);
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    for i in 0..levels {
        let cin = if i == 0 { 1 } else { ch(i - 1) };
        total += conv(ch(i), cin, 3) + bn(ch(i)) + conv(ch(i), ch(i), 3) + bn(ch(i));
    }
    for i in 0..levels - 1 {
        let c = ch(i);
        let mid = std::cmp::max(1, 2 * c / 8);
        total += conv(c, ch(i + 1), 1) + bn(c);
        total += conv(mid, 2 * c, 1) + mid + conv(c, mid, 1) + c;
        total += conv(c, 2 * c, 3) + bn(c) + conv(c, c, 3) + bn(c);
    }
    total + conv(1, base, 1) + 1
}

#[test]
fn parameter_count_matches_layer_enumeration() {
    assert_eq!(expected_count(3, 8), 27_855);
    assert_eq!(unet(0).params().trainable_count(), expected_count(3, 8));
    for (levels, base) in [(2, 8), (4, 8), (3, 16)] {
        let cfg = UNetConfig {
            levels,
            base_channels: base,
            ..Default::default()
        };
        let m = AttentionUNet::<f64>::new(cfg, 0).unwrap();
        assert_eq!(
            m.params().trainable_count(),
            expected_count(levels, base),
            "{levels} {base}"
        );
    }
}

#[test]
fn full_scale_configuration_is_expressible() {
    let cfg = UNetConfig {
        levels: 5,
        base_channels: 8,
        ..Default::default()
    };
    let m = AttentionUNet::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.params().trainable_count(), expected_count(5, 8));
    assert!(cfg.check_dims(512, 1088).is_ok());
}

#[test]
fn same_seed_gives_identical_parameters() {
    assert_eq!(
        unet(5).params().flat_values(),
        unet(5).params().flat_values()
    );
    assert_ne!(
        unet(5).params().flat_values(),
        unet(6).params().flat_values()
    );
}

#[test]
fn name_set_depends_only_on_config() {
    let a: Vec<String> = unet(1).params().names().map(String::from).collect();
    let b: Vec<String> = unet(2).params().names().map(String::from).collect();
    assert_eq!(a, b);
    assert!(a.contains(&"enc0.conv1.weight".to_string()));
    assert!(a.contains(&"dec0.gate.reduce.bias".to_string()));
    assert!(a.contains(&"enc2.bn2.running_var".to_string()));
}

#[test]
fn initialisation_scheme() {
    let m = unet(3);
    for p in m.params().iter() {
        let v = p.value.data();
        if p.name.ends_with(".bias")
            || p.name.ends_with(".beta")
            || p.name.ends_with("running_mean")
        {
            assert!(v.iter().all(|x| *x == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gamma") || p.name.ends_with("running_var") {
            assert!(v.iter().all(|x| *x == 1.0), "{}", p.name);
        } else {
            let s = p.value.shape();
            let bound = (6.0 / (s.c * s.h * s.w) as f64).sqrt();
            assert!(v.iter().all(|x| x.abs() <= bound), "{}", p.name);
            assert!(v.iter().any(|x| *x != 0.0));
        }
    }
}

#[test]
fn forward_on_zeros_has_input_shape_and_open_unit_range() {
    let m = unet(0);
    let out = m.predict(&Tensor::zeros(Shape::new(2, 1, 16, 32))).unwrap();
    assert_eq!(out.shape(), Shape::new(2, 1, 16, 32));
    assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn eval_forward_is_repeatable_and_pure() {
    let mut m = unet(0);
    let x = randn(Shape::new(2, 1, 16, 32), 1);
    let before = m.params().fingerprint();
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = m.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.params().fingerprint(), before);
}

#[test]
fn train_forward_updates_running_statistics() {
    let mut m = unet(0);
    let x = randn(Shape::new(2, 1, 16, 32), 2);
    let before = m
        .params()
        .by_name("enc0.bn1.running_mean")
        .unwrap()
        .value
        .clone();
    m.forward(&x, Mode::Train).unwrap();
    let after = &m.params().by_name("enc0.bn1.running_mean").unwrap().value;
    assert_ne!(&before, after);
    // trainable values are untouched by a forward pass
    assert_eq!(
        unet(0).params().by_name("enc0.conv1.weight").unwrap().value,
        m.params().by_name("enc0.conv1.weight").unwrap().value
    );
}

#[test]
fn indivisible_input_is_rejected() {
    let m = unet(0);
    assert!(matches!(
        m.predict(&Tensor::zeros(Shape::new(1, 1, 18, 32))),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        m.predict(&Tensor::zeros(Shape::new(1, 2, 16, 32))),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        UNetConfig {
            levels: 1,
            ..Default::default()
        },
        UNetConfig {
            base_channels: 4,
            ..Default::default()
        },
        UNetConfig {
            bn_eps: 0.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            AttentionUNet::<f64>::new(cfg, 0),
            Err(Error::Config(_))
        ));
    }
}

struct GateFixture {
    tape: Tape<f64>,
    skip: Var,
    gate: Var,
    params: GateParams,
}

use fedseg::tensor::Var;

fn gate_fixture(restore_bias: f64) -> GateFixture {
    let c = 8;
    let mid = 2;
    let mut tape = Tape::new();
    let skip = tape.constant(randn(Shape::new(2, c, 4, 6), 10));
    let gate = tape.constant(randn(Shape::new(2, c, 4, 6), 11));
    let params = GateParams {
        reduce_weight: tape.constant(Tensor::full(Shape::new(mid, 2 * c, 1, 1), 1.0)),
        reduce_bias: tape.constant(Tensor::zeros(Shape::channels(mid))),
        restore_weight: tape.constant(Tensor::full(Shape::new(c, mid, 1, 1), 1.0)),
        restore_bias: tape.constant(Tensor::full(Shape::channels(c), restore_bias)),
    };
    GateFixture {
        tape,
        skip,
        gate,
        params,
    }
}

#[test]
fn saturated_open_gate_passes_skip_through() {
    let mut f = gate_fixture(10.0);
    let (out, _) = attention_gate(&mut f.tape, f.skip, f.gate, f.params).unwrap();
    // weights are at least sigmoid(10)
    let (o, s) = (f.tape.value(out).data(), f.tape.value(f.skip).data());
    for (a, b) in o.iter().zip(s) {
        assert!((a - b).abs() <= 5e-5 * b.abs(), "{a} vs {b}");
    }
}

#[test]
fn saturated_closed_gate_blocks_skip() {
    let mut f = gate_fixture(-10.0);
    let (out, _) = attention_gate(&mut f.tape, f.skip, f.gate, f.params).unwrap();
    // weights are at most sigmoid(-10 + 2) and |skip| stays below ~4
    let worst = f
        .tape
        .value(out)
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 2e-3, "{worst}");
}

#[test]
fn gate_rejects_misaligned_inputs() {
    let mut tape = Tape::<f64>::new();
    let skip = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
    let gate = tape.constant(Tensor::zeros(Shape::new(1, 8, 2, 2)));
    let w = tape.constant(Tensor::zeros(Shape::new(2, 16, 1, 1)));
    let b = tape.constant(Tensor::zeros(Shape::channels(2)));
    let params = GateParams {
        reduce_weight: w,
        reduce_bias: b,
        restore_weight: w,
        restore_bias: b,
    };
    assert!(matches!(
        attention_gate(&mut tape, skip, gate, params),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn gate_gradients_match_finite_differences() {
    let c = 8;
    let inputs: Vec<Tensor<f64>> = [
        Shape::new(2, c, 3, 4),
        Shape::new(2, c, 3, 4),
        Shape::new(2, 2 * c, 1, 1),
        Shape::channels(2),
        Shape::new(c, 2, 1, 1),
        Shape::channels(c),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, s)| randn(s, 20 + i as u64).with_requires_grad(true))
    .collect();
    let probe = randn(Shape::new(2, c, 3, 4), 99).into_data();
    let report = gradcheck(
        &inputs,
        |t, v| {
            let p = GateParams {
                reduce_weight: v[2],
                reduce_bias: v[3],
                restore_weight: v[4],
                restore_bias: v[5],
            };
            let (out, _) = attention_gate(t, v[0], v[1], p)?;
            t.weighted_sum(out, &probe)
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn full_unet_gradients_match_finite_differences() {
    let model = unet(42);
    let x = randn(Shape::new(1, 1, 16, 32), 7).with_requires_grad(true);
    let target = Tensor::from_vec(
        Shape::new(1, 1, 16, 32),
        (0..512)
            .map(|i| if (i / 32 + i % 32) % 5 < 2 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let report = gradcheck(
        &inputs,
        |tape, vars| {
            let mut bound = model.clone();
            // route the model through the gradcheck leaves
            for (p, v) in bound.params_mut().iter_mut().zip(&vars[1..]) {
                p.value.data_mut().copy_from_slice(tape.value(*v).data());
            }
            let bind = fedseg::tensor::Binding::from_vars(vars[1..].to_vec());
            let fwd = bound.record(tape, &bind, vars[0], Mode::Train)?;
            tape.dice_loss(fwd.output, &target, 1.0, DiceReduction::Pooled)
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.checked > 9_000, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gate_weights_lie_in_open_unit_interval() {
    let m = unet(4);
    let maps = m.gate_maps(&randn(Shape::new(2, 1, 16, 32), 3)).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].shape(), Shape::new(2, 8, 16, 32));
    assert_eq!(maps[1].shape(), Shape::new(2, 16, 8, 16));
    for m in &maps {
        assert!(m.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_is_probability_with_input_shape(
        seed in any::<u64>(),
        n in 1usize..3,
        hq in 1usize..4,
        wq in 1usize..4,
        scale in 0.1f64..50.0,
    ) {
        let m = unet(seed % 4);
        let s = Shape::new(n, 1, 4 * hq, 4 * wq);
        let mut x = randn(s, seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let out = m.predict(&x).unwrap();
        prop_assert_eq!(out.shape(), s);
        prop_assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
