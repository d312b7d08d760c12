//! Per-head Grad-CAM, oracle head selection, ensembling and gradient-structure diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax, predict, softmax, MetricsReport, Predictions};
use crate::model::Model;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heatmap for one head, restricted to the channels that head adds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamMap {
    /// Row-major `height x width`, values in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Spatial size of the conv activations the map was computed on.
    pub source_dims: (usize, usize),
    /// 1-based.
    pub head_index: usize,
    /// Half-open channel range `[lo, hi)` of the last conv layer.
    pub channel_range: (usize, usize),
}

impl GradCamMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.values)
    }
}

/// Output of the last conv block for a single image, shape `[1, C, h, w]`, eval mode.
pub fn last_conv_activations<T: Scalar>(model: &Model<T>, image: &Tensor<f64>) -> Result<Tensor<T>> {
    let image = as_batch_of_one(image)?;
    let mut model = model.clone();
    let mut tape = Tape::new();
    let x = model.input_var(&mut tape, &image)?;
    let (activations, _) = model.forward_features(&mut tape, x, Mode::Eval)?;
    let activations = activations.ok_or_else(|| Error::Incompatible("grad-cam needs a convolutional backbone".into()))?;
    Ok(tape.value(activations).clone())
}

/// Grad-CAM of `head_index` (1-based) for `target_class`, upsampled to the input size.
pub fn grad_cam_split<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<f64>,
    target_class: usize,
    head_index: usize,
) -> Result<GradCamMap> {
    let dims = model.spec.input;
    let activations = last_conv_activations(model, image)?;
    grad_cam_from_activations(model, &activations, target_class, head_index, (dims[1], dims[2]))
}

/// Grad-CAM computed from given last-conv activations `[1, C, h, w]`.
///
/// Channel weights are the spatial mean of the logit gradient; the map is
/// `ReLU(sum_k w_k A_k)` over the head's own channel block, bilinearly
/// upsampled to `out_dims` and divided by its maximum.
pub fn grad_cam_from_activations<T: Scalar>(
    model: &Model<T>,
    activations: &Tensor<T>,
    target_class: usize,
    head_index: usize,
    out_dims: (usize, usize),
) -> Result<GradCamMap> {
    let heads = model.num_heads();
    if head_index == 0 || head_index > heads {
        return Err(Error::range("grad_cam", format!("head {head_index} not in 1..={heads}")));
    }
    let k = model.num_classes();
    if target_class >= k {
        return Err(Error::range("grad_cam", format!("class {target_class} not in 0..{k}")));
    }
    let s = activations.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != model.feature_width() {
        return Err(Error::invalid(
            "grad_cam",
            format!("expected activations [1, {}, h, w], got {:?}", model.feature_width(), s),
        ));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let split = c / heads;
    let (lo, hi) = ((head_index - 1) * split, head_index * split);

    let mut model = model.clone();
    let mut tape = Tape::new();
    let a = tape.leaf(activations.clone().with_requires_grad(true));
    let out = model.forward_from_activations(&mut tape, a, Mode::Eval)?;
    let logit = out.head_logits[head_index - 1];
    let mut seed = vec![T::zero(); k];
    seed[target_class] = T::one();
    tape.backward_seeded(logit, &seed)?;
    let act = activations.to_f64_vec();
    let grad: Vec<f64> = match tape.grad(a) {
        Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; act.len()],
    };

    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ch in lo..hi {
        let g = &grad[ch * hw..(ch + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        for (m, &v) in cam.iter_mut().zip(&act[ch * hw..(ch + 1) * hw]) {
            *m += weight * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = bilinear_resize(&cam, h, w, out_dims.0, out_dims.1);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(GradCamMap {
        values,
        height: out_dims.0,
        width: out_dims.1,
        source_dims: (h, w),
        head_index,
        channel_range: (lo, hi),
    })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, in_len: usize, out_len: usize| {
        let x = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Binary PGM (P5), 8-bit, `round(255 * v)` with `v` clamped to `[0, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    bytes
}

/// Single-channel image rescaled so its minimum maps to 0 and maximum to 255.
pub fn image_to_pgm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => return Err(Error::invalid("image_to_pgm", format!("expected a single-channel image, got {s:?}"))),
    };
    let data = image.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let values: Vec<f64> = data.iter().map(|v| (v - lo) / span).collect();
    Ok(encode_pgm(w, h, &values))
}

pub fn write_pgm(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn as_batch_of_one(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    match image.shape().len() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.clone().reshape(shape)
        }
        4 if image.shape()[0] == 1 => Ok(image.clone()),
        _ => Err(Error::invalid("grad_cam", format!("expected one image, got {:?}", image.shape()))),
    }
}

/// Fraction of samples where any of head 1..H or the combined output is right.
pub fn oracle_from_predictions(p: &Predictions) -> f64 {
    let correct = (0..p.len())
        .filter(|&i| {
            let label = p.labels[i];
            argmax(p.combined_row(i)) == label || (0..p.head_logits.len()).any(|h| argmax(p.head_row(h, i)) == label)
        })
        .count();
    correct as f64 / p.len() as f64
}

pub fn oracle_accuracy<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(oracle_from_predictions(&predict(model, dataset, batch_size)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    #[default]
    MeanSoftmax,
    MeanLogits,
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec<T: Scalar> {
    pub members: Vec<Model<T>>,
    pub rule: EnsembleRule,
}

impl<T: Scalar> EnsembleSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::Config(format!("an ensemble needs at least 2 members, got {}", self.members.len())));
        }
        let k = self.members[0].num_classes();
        for (i, m) in self.members.iter().enumerate() {
            if m.num_classes() != k {
                return Err(Error::Incompatible(format!(
                    "member {} predicts {} classes, member 0 predicts {k}",
                    i,
                    m.num_classes()
                )));
            }
            if m.spec.input != self.members[0].spec.input {
                return Err(Error::Incompatible(format!(
                    "member {} expects input {:?}, member 0 expects {:?}",
                    i, m.spec.input, self.members[0].spec.input
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub rule: EnsembleRule,
    pub samples: usize,
    pub accuracy: f64,
    pub members: Vec<MetricsReport>,
}

/// Combines per-member combined outputs; returns `[N * K]` scores.
pub fn combine_members(members: &[Predictions], rule: EnsembleRule) -> Vec<f64> {
    let n = members[0].len();
    let k = members[0].num_classes;
    let mut scores = vec![0.0; n * k];
    for p in members {
        for i in 0..n {
            let row = p.combined_row(i);
            let contribution = match rule {
                EnsembleRule::MeanSoftmax => softmax(row),
                EnsembleRule::MeanLogits => row.to_vec(),
            };
            for (s, c) in scores[i * k..(i + 1) * k].iter_mut().zip(contribution) {
                *s += c;
            }
        }
    }
    let m = members.len() as f64;
    scores.iter_mut().for_each(|s| *s /= m);
    scores
}

pub fn ensemble_eval<T: Scalar>(spec: &EnsembleSpec<T>, dataset: &Dataset, batch_size: usize) -> Result<EnsembleReport> {
    spec.validate()?;
    let preds = spec
        .members
        .iter()
        .map(|m| predict(m, dataset, batch_size))
        .collect::<Result<Vec<_>>>()?;
    let scores = combine_members(&preds, spec.rule);
    let k = preds[0].num_classes;
    let correct = (0..dataset.len())
        .filter(|&i| argmax(&scores[i * k..(i + 1) * k]) == dataset.labels[i])
        .count();
    Ok(EnsembleReport {
        rule: spec.rule,
        samples: dataset.len(),
        accuracy: correct as f64 / dataset.len() as f64,
        members: preds.iter().map(MetricsReport::from_predictions).collect(),
    })
}

/// Feature gradients under each head's loss alone.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMaskReport {
    pub split_width: usize,
    /// `feature_grads[i]` is `[B * C]`: gradient of head `i + 1`'s loss w.r.t. the pooled features.
    pub feature_grads: Vec<Vec<f64>>,
    /// `block_norms[i][j]`: L2 norm of that gradient over channel block `j`.
    pub block_norms: Vec<Vec<f64>>,
}

impl GradientMaskReport {
    /// Whether every gradient entry for channels at or beyond `(i + 1) * n` is exactly `+0.0` under head `i`.
    pub fn structure_holds(&self) -> bool {
        let n = self.split_width;
        let heads = self.feature_grads.len();
        let c = n * heads;
        self.feature_grads.iter().enumerate().all(|(i, g)| {
            g.chunks(c).all(|row| row[(i + 1) * n..].iter().all(|v| v.to_bits() == 0))
        })
    }
}

/// Backpropagates each head's cross-entropy separately to the pooled features.
pub fn gradient_mask_report<T: Scalar>(model: &Model<T>, batch: &Batch, mode: Mode) -> Result<GradientMaskReport> {
    let mut model = model.clone();
    let mut tape = Tape::new();
    let x = model.input_var(&mut tape, &batch.images)?;
    let (_, features) = model.forward_features(&mut tape, x, mode)?;
    let features = tape.value(features).clone();
    let c = model.feature_width();
    let heads = model.num_heads();
    let n = c / heads;
    let mut feature_grads = Vec::with_capacity(heads);
    let mut block_norms = Vec::with_capacity(heads);
    for head in 0..heads {
        let mut model = model.clone();
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone().with_requires_grad(true));
        let out = model.forward_head(&mut tape, f, mode)?;
        let loss = tape.cross_entropy(out.head_logits[head], &batch.labels)?;
        tape.backward(loss)?;
        let grad: Vec<f64> = match tape.grad(f) {
            Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; features.numel()],
        };
        let norms = (0..heads)
            .map(|j| {
                grad.chunks(c)
                    .map(|row| row[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        feature_grads.push(grad);
        block_norms.push(norms);
    }
    Ok(GradientMaskReport { split_width: n, feature_grads, block_norms })
}
