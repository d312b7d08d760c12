//! Split-and-share classifier head.
//!
//! The feature vector of width `C` is viewed as `H` nested channel prefixes of
//! widths `n, 2n, ..., Hn` (`n = C / H`). Prefix `i` goes through its own
//! batch norm and ReLU and then its own linear sub-classifier; the logits of
//! all sub-classifiers are averaged. The first `n` channels therefore feed
//! every sub-classifier while the last `n` feed only the widest one.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Mode};
use crate::param::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the classification loss is applied during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossScheme {
    /// Loss on the averaged output only.
    #[default]
    Joint,
    /// Mean of per-head losses.
    Individual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmConfig {
    pub num_channels: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Apply batch norm and ReLU to the widest prefix too.
    pub bn_relu_on_last: bool,
    pub scheme: LossScheme,
}

impl SsmConfig {
    pub fn new(num_channels: usize, num_heads: usize, num_classes: usize) -> Result<Self> {
        let config = SsmConfig { num_channels, num_heads, num_classes, bn_relu_on_last: true, scheme: LossScheme::Joint };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        if self.num_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("num_channels and num_classes must be positive".into()));
        }
        if self.num_channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "feature width {} is not divisible by num_heads {}; each head must add an equal channel split",
                self.num_channels, self.num_heads
            )));
        }
        Ok(())
    }

    /// Channels added by each successive head (`n = C / H`).
    pub fn split_width(&self) -> usize {
        self.num_channels / self.num_heads
    }

    /// Input width of head `i` (0-based).
    pub fn head_width(&self, i: usize) -> usize {
        (i + 1) * self.split_width()
    }

    pub fn head_has_bn(&self, i: usize) -> bool {
        i + 1 < self.num_heads || self.bn_relu_on_last
    }
}

/// Logits of every head plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmOutput {
    pub head_logits: Vec<Var>,
    pub combined: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmHead {
    pub config: SsmConfig,
    /// `bn[i]` normalizes the input of head `i`; absent for the last head when `bn_relu_on_last` is off.
    pub bn: Vec<BatchNorm>,
    pub fc: Vec<Linear>,
    /// Skip the ReLU after batch norm. Only meant for checking the linear-collapse property.
    pub bypass_relu: bool,
}

impl SsmHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SsmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut bn = Vec::new();
        let mut fc = Vec::new();
        for i in 0..config.num_heads {
            let width = config.head_width(i);
            if config.head_has_bn(i) {
                bn.push(BatchNorm::new(store, &format!("{name}.bn{}", i + 1), width));
            }
            fc.push(Linear::new(store, &format!("{name}.fc{}", i + 1), width, config.num_classes, rng));
        }
        Ok(SsmHead { config, bn, fc, bypass_relu: false })
    }

    /// Runs every head on its channel prefix and averages the logits.
    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        features: Var,
        mode: Mode,
    ) -> Result<SsmOutput> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.config.num_channels {
            return Err(Error::invalid(
                "ssm_forward",
                format!("expected features [B, {}], got {:?}", self.config.num_channels, shape),
            ));
        }
        let mut head_logits = Vec::with_capacity(self.config.num_heads);
        for (i, fc) in self.fc.iter().enumerate() {
            let mut out = tape.slice_channels(features, self.config.head_width(i))?;
            if let Some(bn) = self.bn.get(i) {
                out = bn.forward(store, tape, out, mode)?;
                if !self.bypass_relu {
                    out = tape.relu(out);
                }
            }
            head_logits.push(fc.forward(store, tape, out)?);
        }
        let combined = tape.mean_of(&head_logits)?;
        Ok(SsmOutput { head_logits, combined })
    }

    /// Single linear map equal to the eval-mode head when ReLU is bypassed.
    ///
    /// Each present batch norm is folded into its head's weights using the
    /// running statistics; each head's weight is zero-padded to the full width,
    /// and weights and biases are averaged over heads.
    pub fn collapse_to_linear<T: Scalar>(&self, store: &ParamStore<T>) -> CollapsedLinear<T> {
        let c = self.config.num_channels;
        let k = self.config.num_classes;
        let mut weight = vec![T::zero(); k * c];
        let mut bias = vec![T::zero(); k];
        for (i, fc) in self.fc.iter().enumerate() {
            let width = self.config.head_width(i);
            let w = store.get(fc.weight).data();
            let b = store.get(fc.bias).data();
            let (scale, shift) = match self.bn.get(i) {
                Some(bn) => {
                    let gamma = store.get(bn.gamma).data();
                    let beta = store.get(bn.beta).data();
                    let mean = store.get(bn.running_mean).data();
                    let var = store.get(bn.running_var).data();
                    let eps = T::from_f64_lossy(bn.eps);
                    let scale: Vec<T> = (0..width).map(|j| gamma[j] / (var[j] + eps).sqrt()).collect();
                    let shift: Vec<T> = (0..width).map(|j| beta[j] - mean[j] * scale[j]).collect();
                    (scale, shift)
                }
                None => (vec![T::one(); width], vec![T::zero(); width]),
            };
            for row in 0..k {
                let mut folded_bias = b[row];
                for j in 0..width {
                    let wij = w[row * width + j];
                    weight[row * c + j] = weight[row * c + j] + wij * scale[j];
                    folded_bias = folded_bias + wij * shift[j];
                }
                bias[row] = bias[row] + folded_bias;
            }
        }
        let heads = T::from_usize(self.config.num_heads).expect("heads");
        weight.iter_mut().for_each(|v| *v = *v / heads);
        bias.iter_mut().for_each(|v| *v = *v / heads);

        let mut collapsed = ParamStore::new();
        let w = collapsed.add("collapsed.weight", ParamKind::Trainable, Tensor::new(vec![k, c], weight).expect("shape"));
        let b = collapsed.add("collapsed.bias", ParamKind::Trainable, Tensor::new(vec![k], bias).expect("shape"));
        CollapsedLinear {
            store: collapsed,
            layer: Linear { weight: w, bias: b, in_features: c, out_features: k },
        }
    }
}

/// A linear layer together with its own parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedLinear<T: Scalar> {
    pub store: ParamStore<T>,
    pub layer: Linear,
}

impl<T: Scalar> CollapsedLinear<T> {
    pub fn weight(&self) -> &Tensor<T> {
        self.store.get(self.layer.weight)
    }

    pub fn bias(&self) -> &Tensor<T> {
        self.store.get(self.layer.bias)
    }

    /// `x * W^T + b` without recording gradients.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(self.weight().clone());
        let b = tape.constant(self.bias().clone());
        let y = tape.linear(xv, w, Some(b))?;
        Ok(tape.value(y).clone())
    }
}

/// Trainable scalars in the head: each sub-classifier's weight and bias, plus
/// `gamma`/`beta` of every batch norm when `include_bn`.
pub fn ssm_param_count(config: &SsmConfig, include_bn: bool) -> usize {
    (0..config.num_heads)
        .map(|i| {
            let width = config.head_width(i);
            let fc = width * config.num_classes + config.num_classes;
            let bn = if include_bn && config.head_has_bn(i) { 2 * width } else { 0 };
            fc + bn
        })
        .sum()
}
