use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

/// Per-channel statistics of a training batch. `var` is the biased estimate (divisor `count`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub(crate) struct BatchNormNode<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

/// `(batch, channels, spatial)` for `[B, C]` or `[B, C, H, W]`.
fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [b, c] => Some((*b, *c, 1)),
        [b, c, h, w] => Some((*b, *c, h * w)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over every axis except the channel axis (axis 1).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, spatial) = layout(&shape)
            .ok_or_else(|| Error::invalid("batch_norm", format!("expected [B, C] or [B, C, H, W], got {shape:?}")))?;
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::shape("batch_norm", self.shape(p), &[channels]));
            }
        }
        let data = self.value(x).data();
        let per_channel = batch * spatial;
        let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("training mode needs a batch of at least 2, got {batch}"),
                    ));
                }
                let count = T::from_usize(per_channel).expect("count");
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut sum = T::zero();
                    for b in 0..batch {
                        for s in 0..spatial {
                            sum = sum + data[index(b, c, s)];
                        }
                    }
                    let mu = sum / count;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for s in 0..spatial {
                            let d = data[index(b, c, s)] - mu;
                            sq = sq + d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = sq / count;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(Error::shape("batch_norm running stats", &[running_mean.len()], &[channels]));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    let i = index(b, c, s);
                    let h = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let node = BatchNormNode { x, gamma, beta, xhat, inv_std, train };
        let var_out = self.push(value, Op::BatchNorm(node), rg);
        let stats = train.then(|| BatchStats { mean, var, count: per_channel });
        Ok((var_out, stats))
    }
}

pub(super) fn backward<T: Scalar>(tape: &Tape<T>, node: &BatchNormNode<T>, dout: &[T]) -> Vec<(Var, Vec<T>)> {
    let (batch, channels, spatial) = layout(tape.shape(node.x)).expect("validated in forward");
    let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;
    let gamma = tape.value(node.gamma).data();
    let count = T::from_usize(batch * spatial).expect("count");

    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut dx = vec![T::zero(); dout.len()];
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                sum_dy = sum_dy + dout[i];
                sum_dy_xhat = sum_dy_xhat + dout[i] * node.xhat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * node.inv_std[c];
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                dx[i] = if node.train {
                    // d/dx of gamma * (x - mean) / std with mean and std depending on x
                    scale * (dout[i] - sum_dy / count - node.xhat[i] * sum_dy_xhat / count)
                } else {
                    scale * dout[i]
                };
            }
        }
    }
    vec![(node.x, dx), (node.gamma, dgamma), (node.beta, dbeta)]
}
