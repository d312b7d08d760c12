//! Parameterized layers. Layers are lightweight descriptors holding
//! [`ParamId`]s; the tensors themselves live in a [`ParamStore`].

mod init;

pub use init::{he_init, he_init_with};

use rand::Rng;

use crate::autodiff::{BatchNormMode, ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode. Batch norm uses batch statistics (and updates its
/// running statistics) only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// He-initialized weight `[out, in]`, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            he_init_with(&[out_features, in_features], in_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(vec![out_features]));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// `gamma = 1`, `beta = 0`, `running_mean = 0`, `running_var = 1`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(vec![channels], T::one()));
        let beta = store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(vec![channels]));
        let running_mean = store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![channels]));
        let running_var =
            store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(vec![channels], T::one()));
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Normalizes `[B, C]` or `[B, C, H, W]`. In train mode the running
    /// statistics are blended towards the batch statistics, using the
    /// unbiased variance estimate.
    pub fn forward<T: Scalar>(&self, store: &mut ParamStore<T>, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::invalid(
                "batch_norm",
                format!("layer has {} channels, input shape is {:?}", self.channels, shape),
            ));
        }
        let gamma = store.var(tape, self.gamma);
        let beta = store.var(tape, self.beta);
        let eps = T::from_f64_lossy(self.eps);
        match mode {
            Mode::Eval => {
                let (y, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    eps,
                    BatchNormMode::Eval {
                        running_mean: store.get(self.running_mean).data(),
                        running_var: store.get(self.running_var).data(),
                    },
                )?;
                Ok(y)
            }
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, eps, BatchNormMode::Train)?;
                let stats = stats.expect("train mode yields statistics");
                let m = T::from_f64_lossy(self.momentum);
                let keep = T::one() - m;
                let count = T::from_usize(stats.count).expect("count");
                let unbias = count / (count - T::one());
                store
                    .get_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.mean)
                    .for_each(|(r, &b)| *r = keep * *r + m * b);
                store
                    .get_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.var)
                    .for_each(|(r, &b)| *r = keep * *r + m * b * unbias);
                Ok(y)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    /// Square kernel, He-initialized with `fan_in = in_channels * k * k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            he_init_with(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            geometry: ConvGeometry { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding },
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = self.bias.map(|b| store.var(tape, b));
        tape.conv2d(x, w, b, self.geometry.stride, self.geometry.padding)
    }

    pub fn param_count(&self) -> usize {
        let g = &self.geometry;
        g.out_channels * g.in_channels * g.kernel_h * g.kernel_w + if self.bias.is_some() { g.out_channels } else { 0 }
    }
}

#[cfg(test)]
mod tests;
