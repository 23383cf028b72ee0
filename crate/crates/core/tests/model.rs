use affect_core::dataset::generate_synthetic;
use affect_core::model::{DdamfnModel, ModelConfig};
use affect_core::nn::{BatchNorm, GdConv, Linear, Mode, Module};
use affect_core::tensor::{Tape, Tensor};
use affect_core::train::Adam;
use proptest::collection::vec;
use proptest::prelude::*;

fn stack(images: &[&Tensor]) -> Tensor {
    let mut shape = vec![images.len()];
    shape.extend(images[0].shape());
    Tensor::from_vec(&shape, images.iter().flat_map(|t| t.data().iter().copied()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_maps_lie_strictly_inside_unit_interval(
        pixels in vec(-20.0..20.0f64, 2 * 3 * 8 * 8),
        seed in 0u64..1000,
    ) {
        let mut model = DdamfnModel::new(ModelConfig::tiny(), seed).unwrap();
        let out = model.predict(&Tensor::from_vec(&[2, 3, 8, 8], pixels).unwrap()).unwrap();
        for map in &out.attention_maps {
            prop_assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn gdconv_with_averaging_kernel_is_spatial_mean(x in vec(-5.0..5.0f64, 2 * 3 * 4 * 4)) {
        let mut gd = GdConv::new("gd", 3, 4, 4);
        gd.weight.value.data_mut().fill(1.0 / 16.0);
        let x = Tensor::from_vec(&[2, 3, 4, 4], x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = gd.forward(&mut tape, xv).unwrap();
        for (i, chunk) in x.data().chunks(16).enumerate() {
            let mean = chunk.iter().sum::<f64>() / 16.0;
            prop_assert!((tape.data(y)[i] - mean).abs() <= 1e-12);
        }
    }

    /// Holds to 1e-6 when the per-channel input variance is at least ~10,
    /// since the normalized variance is `v / (v + eps)`.
    #[test]
    fn batchnorm_train_output_is_standardized(x in vec(-20.0..20.0f64, 4 * 3 * 5 * 5), shift in -50.0..50.0f64) {
        let x: Vec<f64> = x.into_iter().map(|v| v + shift).collect();
        let spread_ok = (0..3).all(|c| {
            let vals: Vec<f64> = (0..4).flat_map(|b| x[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64 >= 10.0
        });
        prop_assume!(spread_ok);
        let mut bn = BatchNorm::new("bn", 3);
        bn.init_params(0);
        prop_assert!(bn.gamma.value.data().iter().all(|&g| g == 1.0));
        let mut tape = Tape::new();
        let xv = tape.constant(&Tensor::from_vec(&[4, 3, 5, 5], x).unwrap());
        let y = bn.forward(&mut tape, xv).unwrap();
        let y = tape.data(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|u| (u - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() <= 1e-6, "mean {m}");
            prop_assert!((v - 1.0).abs() <= 1e-6, "var {v}");
        }
    }
}

#[test]
fn frozen_layer_survives_optimizer_step() {
    let mut fc = Linear::new("fc", 3, 2);
    fc.init_params(9);
    let before: Vec<u64> = fc.weight.value.data().iter().map(|v| v.to_bits()).collect();
    fc.freeze();
    fc.visit_params_mut(&mut |p| p.value.grad = Some(vec![1.0; p.value.numel()]));
    Adam::new(0.1).step(&mut fc);
    let after: Vec<u64> = fc.weight.value.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert!(fc.bias.value.data().iter().all(|&b| b == 0.0));
}

#[test]
fn heads_are_independent_given_features() {
    let data = generate_synthetic(4, 1, 32).unwrap();
    let images = stack(&data.iter().map(|s| &s.image).collect::<Vec<_>>());
    let mut model = DdamfnModel::new(ModelConfig::small(), 5).unwrap();
    model.set_mode(Mode::Eval);
    let before = model.predict(&images).unwrap();
    model.head_au.weight.value.data_mut().fill(0.0);
    let after = model.predict(&images).unwrap();
    assert_ne!(before.au_logits, after.au_logits);
    assert_eq!(before.va, after.va);
    assert_eq!(before.expr_logits, after.expr_logits);
}

#[test]
fn duplicating_the_batch_keeps_eval_outputs() {
    let data = generate_synthetic(3, 2, 32).unwrap();
    let single: Vec<&Tensor> = data.iter().map(|s| &s.image).collect();
    let doubled: Vec<&Tensor> = single.iter().flat_map(|&t| [t, t]).collect();
    let mut model = DdamfnModel::new(ModelConfig::small(), 6).unwrap();
    model.set_mode(Mode::Eval);
    let a = model.predict(&stack(&single)).unwrap();
    let b = model.predict(&stack(&doubled)).unwrap();
    for i in 0..3 {
        for k in 0..2 {
            let j = 2 * i + k;
            assert_eq!(a.va.data()[i * 2..i * 2 + 2], b.va.data()[j * 2..j * 2 + 2]);
            assert_eq!(
                a.expr_logits.data()[i * 8..i * 8 + 8],
                b.expr_logits.data()[j * 8..j * 8 + 8]
            );
            assert_eq!(
                a.au_logits.data()[i * 12..i * 12 + 12],
                b.au_logits.data()[j * 12..j * 12 + 12]
            );
        }
    }
}
