use rand::{Rng, SeedableRng};

use super::*;
use crate::data::{synthetic_gaussians, Split};
use crate::model::{BackboneSpec, HeadSpec, ModelSpec};
use crate::param::ParamStore;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig { base_lr: 0.05, batch_size: 16, epochs, milestones: vec![], ..TrainConfig::desk() }
}

fn mlp(widths: Vec<usize>, heads: usize, classes: usize, size: usize) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec::Mlp { widths },
        head: HeadSpec::Ssm { num_heads: heads, bn_relu_on_last: true },
        num_classes: classes,
        input: [1, size, size],
    }
}

#[test]
fn lr_schedule() {
    let config = TrainConfig::imagenet_recipe();
    assert_eq!(lr_at(0, &config), 0.1);
    assert!((lr_at(29, &config) - 0.1).abs() < 1e-15);
    assert!((lr_at(30, &config) - 0.01).abs() < 1e-15);
    assert!((lr_at(60, &config) - 0.001).abs() < 1e-15);
    for e in 1..90 {
        assert!(lr_at(e, &config) <= lr_at(e - 1, &config));
    }
    let flat = TrainConfig { milestones: vec![], ..config };
    assert!((0..90).all(|e| lr_at(e, &flat) == 0.1));
}

#[test]
fn config_invariants() {
    let mut c = TrainConfig::desk();
    assert!(c.validate().is_ok());
    c.milestones = vec![12, 8];
    assert!(c.validate().is_err());
    c.milestones = vec![8, 15];
    assert!(c.validate().is_err());
    c = TrainConfig { weight_decay: -1.0, ..TrainConfig::desk() };
    assert!(c.validate().is_err());
    c = TrainConfig { batch_size: 0, ..TrainConfig::desk() };
    assert!(c.validate().is_err());
}

fn single_param_store(w: f64) -> (ParamStore<f64>, crate::param::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("w", ParamKind::Trainable, Tensor::new(vec![1], vec![w]).unwrap());
    (store, id)
}

fn quadratic_grad(store: &mut ParamStore<f64>, id: crate::param::ParamId) {
    let w = store.get(id).data()[0];
    store.get_mut(id).accumulate_grad(&[w]).unwrap();
}

#[test]
fn sgd_plain_step() {
    let (mut store, id) = single_param_store(2.0);
    let mut state = SgdState::new(&store);
    store.get_mut(id).accumulate_grad(&[0.5]).unwrap();
    sgd_step(&mut store, &mut state, 0.1, 0.0, 0.0).unwrap();
    assert_eq!(store.get(id).data(), &[2.0 - 0.1 * 0.5]);
    assert!(store.get(id).grad().is_none());
}

#[test]
fn sgd_zero_gradient_decays_velocity() {
    let (mut store, id) = single_param_store(1.0);
    let mut state = SgdState::new(&store);
    state.velocity[0] = Some(Tensor::new(vec![1], vec![1.0]).unwrap());
    for step in 1..=3 {
        store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let before = store.get(id).data()[0];
        sgd_step(&mut store, &mut state, 0.1, 0.5, 0.0).unwrap();
        let v = state.velocity[0].as_ref().unwrap().data()[0];
        assert_eq!(v, 0.5f64.powi(step));
        assert!((before - store.get(id).data()[0] - 0.1 * v).abs() < 1e-15);
    }
}

#[test]
fn sgd_two_momentum_steps_on_quadratic() {
    // f(w) = w^2 / 2, so grad = w
    let (mut store, id) = single_param_store(1.0);
    let mut state = SgdState::new(&store);
    quadratic_grad(&mut store, id);
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0).unwrap();
    let w1 = store.get(id).data()[0];
    assert!((w1 - 0.9).abs() < 1e-15);
    quadratic_grad(&mut store, id);
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0).unwrap();
    // v2 = 0.9 * 1.0 + 0.9 = 1.8, w2 = 0.9 - 0.1 * 1.8
    assert!((store.get(id).data()[0] - 0.72).abs() < 1e-15);
}

#[test]
fn sgd_weight_decay_skips_buffers() {
    let (mut store, id) = single_param_store(1.0);
    let buf = store.add("running_var", ParamKind::Buffer, Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
    let mut state = SgdState::new(&store);
    store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
    sgd_step(&mut store, &mut state, 0.1, 0.9, 0.5).unwrap();
    assert_eq!(store.get(buf).data()[0].to_bits(), 0.3f64.to_bits());
    assert_eq!(store.get(buf).data()[1].to_bits(), 0.7f64.to_bits());
    assert!((store.get(id).data()[0] - 0.95).abs() < 1e-15);
    assert!(state.velocity[1].is_none());
}

#[test]
fn sgd_missing_gradient_is_contract_error() {
    let (mut store, _) = single_param_store(1.0);
    let mut state = SgdState::new(&store);
    assert!(matches!(sgd_step(&mut store, &mut state, 0.1, 0.9, 0.0), Err(Error::Contract(_))));
}

fn ssm_output(tape: &mut Tape<f64>, heads: &[Tensor<f64>]) -> SsmOutput {
    let head_logits: Vec<Var> = heads.iter().map(|h| tape.constant(h.clone())).collect();
    let combined = tape.mean_of(&head_logits).unwrap();
    SsmOutput { head_logits, combined }
}

#[test]
fn loss_schemes() {
    let labels = [1, 0, 2];
    let mut tape = Tape::new();

    let one = ssm_output(&mut tape, &[random(&[3, 3], 1)]);
    let j = ssm_loss(&mut tape, &one, &labels, LossScheme::Joint).unwrap();
    let i = ssm_loss(&mut tape, &one, &labels, LossScheme::Individual).unwrap();
    assert_eq!(tape.value(j).data(), tape.value(i).data());

    let same = random(&[3, 3], 2);
    let out = ssm_output(&mut tape, &[same.clone(), same.clone(), same]);
    let j = ssm_loss(&mut tape, &out, &labels, LossScheme::Joint).unwrap();
    let i = ssm_loss(&mut tape, &out, &labels, LossScheme::Individual).unwrap();
    assert!((tape.value(j).data()[0] - tape.value(i).data()[0]).abs() < 1e-15);

    let (a, b) = (random(&[3, 3], 3), random(&[3, 3], 4));
    let out = ssm_output(&mut tape, &[a.clone(), b.clone()]);
    let i = ssm_loss(&mut tape, &out, &labels, LossScheme::Individual).unwrap();
    let ce = |m: &Tensor<f64>| {
        m.data()
            .chunks(3)
            .zip(labels)
            .map(|(row, l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
            .sum::<f64>()
            / 3.0
    };
    assert!((tape.value(i).data()[0] - (ce(&a) + ce(&b)) / 2.0).abs() < 1e-12);
}

#[test]
fn joint_step_reaches_every_head() {
    let spec = mlp(vec![8], 4, 3, 4);
    let train = synthetic_gaussians(3, 4, 4, 0, Split::Train).unwrap();
    let mut model: Model<f64> = Model::new(spec, 1).unwrap();
    let batch = train.batch(&(0..12).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let x = model.input_var(&mut tape, &batch.images).unwrap();
    let out = model.forward(&mut tape, x, Mode::Train).unwrap();
    let loss = ssm_loss(&mut tape, &out.heads, &batch.labels, LossScheme::Joint).unwrap();
    tape.backward(loss).unwrap();
    model.store.accumulate_grads(&tape).unwrap();
    for i in 1..=4 {
        let id = model.store.find(&format!("head.fc{i}.weight")).unwrap();
        assert!(model.store.get(id).grad().unwrap().iter().any(|&g| g != 0.0), "fc{i}");
    }
}

#[test]
fn learns_separable_toy_problem() {
    let train = synthetic_gaussians(2, 32, 6, 3, Split::Train).unwrap();
    let model: Model<f64> = Model::new(mlp(vec![16], 2, 2, 6), 5).unwrap();
    let (_, log) = fit(model, &train, Some(&train), &quick_config(20)).unwrap();
    assert_eq!(log.len(), 20);
    let last = log.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0);
    assert_eq!(last.eval.as_ref().unwrap().head_accuracies.len(), 2);
}

#[test]
fn individual_scheme_trains() {
    let train = synthetic_gaussians(3, 16, 6, 4, Split::Train).unwrap();
    let model: Model<f64> = Model::new(mlp(vec![12], 3, 3, 6), 6).unwrap();
    let config = TrainConfig { scheme: LossScheme::Individual, ..quick_config(10) };
    let (_, log) = fit(model, &train, Some(&train), &config).unwrap();
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let train = synthetic_gaussians(2, 8, 6, 0, Split::Train).unwrap();
    let model: Model<f64> = Model::new(mlp(vec![8], 2, 2, 6), 1).unwrap();
    let (after, log) = fit(model.clone(), &train, None, &quick_config(0)).unwrap();
    assert!(log.is_empty());
    assert_eq!(after, model);
}

#[test]
fn same_seed_same_parameters() {
    let train = synthetic_gaussians(2, 12, 6, 0, Split::Train).unwrap();
    let config = TrainConfig { augment: Augment { pad: 1, flip_prob: 0.5, fill: 0.0 }, ..quick_config(3) };
    let run = || {
        let model: Model<f32> = Model::new(mlp(vec![8], 2, 2, 6), 9).unwrap();
        fit(model, &train, None, &config).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        assert!(pa.tensor.data().iter().zip(pb.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let train = synthetic_gaussians(2, 12, 6, 0, Split::Train).unwrap();
    let config = TrainConfig { milestones: vec![2], ..quick_config(4) };
    let model: Model<f64> = Model::new(mlp(vec![8], 2, 2, 6), 2).unwrap();

    let mut full = Trainer::new(model.clone(), config.clone()).unwrap();
    fit_with(&mut full, &train, None, |_, _| Ok(ControlFlow::Continue(()))).unwrap();

    let mut first = Trainer::new(model, config.clone()).unwrap();
    fit_with(&mut first, &train, None, |r, _| Ok(if r.epoch == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }))
        .unwrap();
    assert_eq!(first.next_epoch, 2);
    let mut resumed = Trainer { model: first.model.clone(), sgd: first.sgd.clone(), config, next_epoch: 2 };
    fit_with(&mut resumed, &train, None, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    assert_eq!(resumed.model, full.model);
}
