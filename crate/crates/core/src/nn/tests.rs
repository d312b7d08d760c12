use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn linear_layer(store: &mut ParamStore<f64>, input: usize, output: usize) -> Linear {
    let mut rng = Pcg64::seed_from_u64(0);
    Linear::new(store, "fc", input, output, &mut rng)
}

#[test]
fn linear_identity_and_constant() {
    let mut store = ParamStore::new();
    let fc = linear_layer(&mut store, 3, 3);
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    store.get_mut(fc.weight).data_mut().copy_from_slice(eye.data());
    let x = random(&[2, 3], 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = fc.forward(&store, &mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    store.get_mut(fc.weight).data_mut().fill(0.0);
    store.get_mut(fc.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = fc.forward(&store, &mut tape, xv).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn linear_shape_mismatch() {
    let mut store = ParamStore::new();
    let fc = linear_layer(&mut store, 3, 2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(vec![2, 4]));
    assert!(fc.forward(&store, &mut tape, x).is_err());
}

#[test]
fn linear_grad_check() {
    let err = grad_check(
        &[random(&[4, 5], 2), random(&[3, 5], 3), random(&[3], 4)],
        |tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_norm_train_output_statistics() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    store.get_mut(bn.gamma).data_mut().copy_from_slice(&[2.0, 0.5, 1.0]);
    store.get_mut(bn.beta).data_mut().copy_from_slice(&[1.0, -1.0, 0.0]);
    let x = random(&[16, 3], 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = bn.forward(&mut store, &mut tape, xv, Mode::Train).unwrap();
    let y = tape.value(y).data();
    for (c, (gamma, beta)) in [(2.0, 1.0), (0.5, -1.0), (1.0, 0.0)].into_iter().enumerate() {
        let col: Vec<f64> = (0..16).map(|r| y[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!((mean - beta).abs() < 1e-3);
        assert!((var - gamma * gamma).abs() < 1e-3 * gamma * gamma);
    }
}

#[test]
fn batch_norm_standardized_batch_is_unchanged() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 1);
    let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = bn.forward(&mut store, &mut tape, xv, Mode::Train).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
}

#[test]
fn batch_norm_running_statistics_update() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 1);
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    bn.forward(&mut store, &mut tape, xv, Mode::Train).unwrap();
    // batch mean 3, unbiased variance 14/3
    let mean = store.get(bn.running_mean).data()[0];
    let var = store.get(bn.running_var).data()[0];
    assert!((mean - 0.3).abs() < 1e-12);
    assert!((var - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_identity_configuration() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 4);
    let x = random(&[3, 4], 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = bn.forward(&mut store, &mut tape, xv, Mode::Eval).unwrap();
    let factor = 1.0 / (1.0 + DEFAULT_BN_EPS).sqrt();
    for (a, b) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - b * factor).abs() < 1e-15);
    }
    assert_eq!(store.get(bn.running_mean).data(), &[0.0; 4]);
}

#[test]
fn batch_norm_eval_is_affine() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 5);
    *store.get_mut(bn.gamma) = random(&[5], 7).with_requires_grad(true);
    *store.get_mut(bn.beta) = random(&[5], 8).with_requires_grad(true);
    store.get_mut(bn.running_mean).data_mut().copy_from_slice(random(&[5], 9).data());
    store.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.5, 1.0, 2.0, 3.0, 0.1]);
    let mut eval = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut store, &mut tape, xv, Mode::Eval).unwrap();
        tape.value(y).data().to_vec()
    };
    let x1 = random(&[2, 5], 10);
    let x2 = random(&[2, 5], 11);
    let sum = Tensor::from_fn(vec![2, 5], |i| x1.data()[i] + x2.data()[i]);
    let (f1, f2, f0, f12) = (eval(x1), eval(x2), eval(Tensor::zeros(vec![2, 5])), eval(sum));
    for i in 0..10 {
        assert!((f1[i] + f2[i] - f0[i] - f12[i]).abs() < 1e-10);
    }
}

#[test]
fn batch_norm_train_needs_two_samples() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2]));
    assert!(bn.forward(&mut store, &mut tape, x, Mode::Train).is_err());
    assert!(bn.forward(&mut store, &mut tape, x, Mode::Eval).is_ok());
    let wide = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(bn.forward(&mut store, &mut tape, wide, Mode::Train).is_err());
}

#[test]
fn batch_norm_train_grad_check() {
    let eps = DEFAULT_BN_EPS;
    for shape in [vec![6, 3], vec![3, 2, 3, 2]] {
        let c = shape[1];
        let err = grad_check(
            &[random(&shape, 12), random(&[c], 13), random(&[c], 14), random(&shape, 15)],
            |tape, v| {
                let (y, _) = tape.batch_norm(v[0], v[1], v[2], eps, crate::autodiff::BatchNormMode::Train)?;
                let y = tape.mul(y, v[3])?;
                Ok(tape.sum(y))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "{shape:?}: {err}");
    }
}

#[test]
fn batch_norm_eval_grad_check() {
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    let err = grad_check(
        &[random(&[4, 3], 16), random(&[3], 17), random(&[3], 18)],
        |tape, v| {
            let mode = crate::autodiff::BatchNormMode::Eval { running_mean: &mean, running_var: &var };
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1e-5, mode)?;
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_grad_check() {
    let err = grad_check(
        &[random(&[2, 3, 5, 5], 19), random(&[4, 3, 3, 3], 20), random(&[4], 21), random(&[2, 4, 3, 3], 22)],
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let y = tape.mul(y, v[3])?;
            Ok(tape.sum(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn conv_identity_and_averaging() {
    let x = random(&[1, 1, 4, 4], 23);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let c = tape.constant(Tensor::full(vec![1, 1, 5, 5], 0.7));
    let avg = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0));
    let y = tape.conv2d(c, avg, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
    let out = tape.value(y).data();
    for r in 1..4 {
        for col in 1..4 {
            assert!((out[r * 5 + col] - 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_geometry_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(vec![1, 2, 3, 3]));
    let wrong_channels = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(tape.conv2d(x, wrong_channels, None, 1, 0).is_err());
    let too_big = tape.constant(Tensor::zeros(vec![1, 2, 5, 5]));
    assert!(tape.conv2d(x, too_big, None, 1, 0).is_err());
    let geometry = ConvGeometry { in_channels: 2, out_channels: 1, kernel_h: 3, kernel_w: 3, stride: 2, padding: 1 };
    assert_eq!(geometry.output_hw(7, 8), Some((4, 4)));
}

#[test]
fn pooling() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2, 3, 4, 4], 1.25).with_requires_grad(true));
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(g), &[2, 3]);
    assert!(tape.value(g).data().iter().all(|&v| v == 1.25));
    let s = tape.sum(g);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&v| v == 1.0 / 16.0));

    let single = tape.constant(Tensor::from_fn(vec![2, 3, 1, 1], |i| i as f64));
    let g = tape.global_avg_pool(single).unwrap();
    assert_eq!(tape.value(g).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

    let m = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 3.0, 2.0]).unwrap().with_requires_grad(true));
    let p = tape.max_pool2d(m, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0]);
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(m).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_grad_check() {
    let err = grad_check(
        &[random(&[2, 2, 4, 6], 24), random(&[2, 2, 2, 3], 25)],
        |tape, v| {
            let y = tape.max_pool2d(v[0], 2)?;
            let y = tape.mul(y, v[1])?;
            Ok(tape.sum(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
