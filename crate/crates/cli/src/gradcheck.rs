//! Finite-difference checks of every layer type and of the full model.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::Serialize;
use ssm_core::autodiff::{grad_check, BatchNormMode, GradCheckOptions};
use ssm_core::{Mode, Model, ModelSpec, ParamKind, Result, SsmConfig, SsmHead, ParamStore, Tape, Tensor, Var};

/// Largest relative error accepted by [`GradCheckReport::passed`].
pub const THRESHOLD: f64 = 1e-4;

/// Relative-error denominator floor for the composite model.
pub const COMPOSITE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

pub type CaseFn = Box<dyn Fn() -> Result<f64>>;

pub struct Case {
    pub name: String,
    pub run: CaseFn,
}

impl Case {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<f64> + 'static) -> Self {
        Case { name: name.into(), run: Box::new(run) }
    }
}

pub fn run_cases(cases: &[Case]) -> Result<GradCheckReport> {
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        let err = (case.run)()?;
        results.push(CaseResult { name: case.name.clone(), max_rel_error: err, passed: err < THRESHOLD });
    }
    Ok(GradCheckReport { cases: results })
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Away from the ReLU kink by at least 0.1.
fn off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Random linear functional of `y`, so no coordinate's gradient cancels by symmetry.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(random(tape.shape(y), seed));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn options() -> GradCheckOptions {
    GradCheckOptions::default()
}

/// Checks every parameter of `store` plus `input`; `forward` maps the input to a scalar.
fn check_store<F>(store: &ParamStore<f64>, input: Tensor<f64>, max_coords: Option<usize>, forward: F) -> Result<f64>
where
    F: Fn(&mut ParamStore<f64>, &mut Tape<f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.trainable_ids();
    let mut params = vec![input];
    params.extend(ids.iter().map(|&id| store.get(id).clone()));
    grad_check(
        &params,
        |tape, vars| {
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                tape.bind_param(id, v);
            }
            let mut local = store.clone();
            forward(&mut local, tape, vars[0])
        },
        GradCheckOptions { max_coords, ..options() },
    )
}

pub fn linear_case() -> Result<f64> {
    grad_check(
        &[random(&[3, 5], 1), random(&[4, 5], 2), random(&[4], 3)],
        |tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            project(tape, y, 4)
        },
        options(),
    )
}

pub fn conv_case() -> Result<f64> {
    let mut worst = 0.0f64;
    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let err = grad_check(
            &[random(&[2, 2, 5, 5], 5), random(&[3, 2, 3, 3], 6), random(&[3], 7)],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
                project(tape, y, 8)
            },
            options(),
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn batch_norm_train_case() -> Result<f64> {
    let mut worst = 0.0f64;
    for shape in [vec![4, 3], vec![3, 2, 3, 3]] {
        let c = shape[1];
        let err = grad_check(
            &[random(&shape, 9), random(&[c], 10), random(&[c], 11)],
            |tape, v| {
                let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?;
                project(tape, y, 12)
            },
            options(),
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn batch_norm_eval_case() -> Result<f64> {
    let mean = [0.2, -0.1, 0.05];
    let var = [0.5, 1.5, 0.9];
    grad_check(
        &[random(&[4, 3], 13), random(&[3], 14), random(&[3], 15)],
        |tape, v| {
            let mode = BatchNormMode::Eval { running_mean: &mean, running_var: &var };
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1e-5, mode)?;
            project(tape, y, 16)
        },
        options(),
    )
}

pub fn relu_case() -> Result<f64> {
    grad_check(
        &[off_kink(&[4, 6], 17)],
        |tape, v| {
            let y = tape.relu(v[0]);
            project(tape, y, 18)
        },
        options(),
    )
}

pub fn max_pool_case() -> Result<f64> {
    grad_check(
        &[random(&[2, 2, 4, 4], 19)],
        |tape, v| {
            let y = tape.max_pool2d(v[0], 2)?;
            project(tape, y, 20)
        },
        options(),
    )
}

pub fn global_avg_pool_case() -> Result<f64> {
    grad_check(
        &[random(&[2, 3, 3, 4], 21)],
        |tape, v| {
            let y = tape.global_avg_pool(v[0])?;
            project(tape, y, 22)
        },
        options(),
    )
}

pub fn cross_entropy_case() -> Result<f64> {
    grad_check(&[random(&[5, 4], 23)], |tape, v| tape.cross_entropy(v[0], &[0, 3, 1, 1, 2]), options())
}

pub fn ssm_head_case() -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = Pcg64::seed_from_u64(24);
    let head = SsmHead::new(&mut store, "head", SsmConfig::new(8, 4, 3)?, &mut rng)?;
    // move gamma and beta off their initial values
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let fresh = random(store.get(id).shape(), 100 + k as u64);
        store.get_mut(id).data_mut().copy_from_slice(fresh.data());
    }
    check_store(&store, random(&[6, 8], 25), None, |store, tape, x| {
        let out = head.forward(store, tape, x, Mode::Train)?;
        tape.cross_entropy(out.combined, &[0, 1, 2, 2, 1, 0])
    })
}

/// The configured backbone and head at `input`, in train mode, with `coords`
/// sampled coordinates per tensor.
///
/// One ulp of the loss over `2h` is about 1e-11, so derivatives below
/// [`COMPOSITE_FLOOR`] are held to an absolute error of `THRESHOLD * COMPOSITE_FLOOR`.
pub fn full_model_case(spec: ModelSpec, seed: u64, coords: usize) -> Result<f64> {
    let model: Model<f64> = Model::new(spec.clone(), seed)?;
    let [c, h, w] = spec.input;
    let batch = 4;
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.num_classes).collect();
    let ids = model.store.trainable_ids();
    let mut params = vec![random(&[batch, c, h, w], seed + 1)];
    params.extend(ids.iter().map(|&id| model.store.get(id).clone()));
    grad_check(
        &params,
        |tape, vars| {
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                tape.bind_param(id, v);
            }
            let mut local = model.clone();
            let out = local.forward(tape, vars[0], Mode::Train)?;
            tape.cross_entropy(out.heads.combined, &labels)
        },
        GradCheckOptions { max_coords: Some(coords), floor: COMPOSITE_FLOOR, ..options() },
    )
}

/// Every registered layer type plus the full model built from `spec`.
pub fn standard_cases(spec: ModelSpec, seed: u64) -> Vec<Case> {
    vec![
        Case::new("linear", linear_case),
        Case::new("conv2d", conv_case),
        Case::new("batch_norm_train", batch_norm_train_case),
        Case::new("batch_norm_eval", batch_norm_eval_case),
        Case::new("relu", relu_case),
        Case::new("max_pool2d", max_pool_case),
        Case::new("global_avg_pool", global_avg_pool_case),
        Case::new("cross_entropy", cross_entropy_case),
        Case::new("ssm_head", ssm_head_case),
        Case::new("full_model", move || full_model_case(spec.clone(), seed, 12)),
    ]
}

/// `y = x^2` whose backward rule returns `x` instead of `2x`.
pub fn corrupted_case() -> Case {
    Case::new("corrupted_square", || {
        grad_check(
            &[random(&[5], 26)],
            |tape, v| {
                let x = tape.value(v[0]).clone();
                let value = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * x.data()[i]);
                let y = tape.custom(
                    &[v[0]],
                    value,
                    Box::new(|inputs, _, d| vec![Some(inputs[0].data().iter().zip(d).map(|(x, g)| x * g).collect())]),
                );
                Ok(tape.sum(y))
            },
            options(),
        )
    })
}
