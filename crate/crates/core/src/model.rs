//! Backbone + multi-head classifier.

use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Mode};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::ssm::{ssm_param_count, SsmConfig, SsmHead, SsmOutput};
use crate::tensor::Tensor;

/// Widths of the reference convolutional backbone.
pub const REFERENCE_CNN_WIDTHS: [usize; 3] = [32, 64, 256];

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSpec {
    /// `conv3x3(pad 1) -> BN -> ReLU` blocks with a 2x2 max pool after every
    /// block but the last, followed by global average pooling. The feature
    /// width is the last block's width.
    Cnn { widths: Vec<usize> },
    /// Flatten, then `linear -> BN -> ReLU` blocks.
    Mlp { widths: Vec<usize> },
}

impl BackboneSpec {
    pub fn reference_cnn() -> Self {
        BackboneSpec::Cnn { widths: REFERENCE_CNN_WIDTHS.to_vec() }
    }

    pub fn widths(&self) -> &[usize] {
        match self {
            BackboneSpec::Cnn { widths } | BackboneSpec::Mlp { widths } => widths,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.widths().last().copied().unwrap_or(0)
    }

    /// Trainable scalars for an input of `in_channels x height x width`.
    pub fn param_count(&self, input: [usize; 3]) -> usize {
        match self {
            BackboneSpec::Cnn { widths } => {
                let mut prev = input[0];
                widths
                    .iter()
                    .map(|&w| {
                        let n = prev * w * 9 + 2 * w;
                        prev = w;
                        n
                    })
                    .sum()
            }
            BackboneSpec::Mlp { widths } => {
                let mut prev = input.iter().product::<usize>();
                widths
                    .iter()
                    .map(|&w| {
                        let n = prev * w + w + 2 * w;
                        prev = w;
                        n
                    })
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadSpec {
    Ssm { num_heads: usize, bn_relu_on_last: bool },
    /// `count` independent full-width linear classifiers whose logits are averaged.
    ParallelFc { count: usize },
}

impl HeadSpec {
    pub fn num_heads(&self) -> usize {
        match self {
            HeadSpec::Ssm { num_heads, .. } => *num_heads,
            HeadSpec::ParallelFc { count } => *count,
        }
    }

    pub fn param_count(&self, feature_width: usize, num_classes: usize) -> Result<usize> {
        Ok(match self {
            HeadSpec::Ssm { num_heads, bn_relu_on_last } => {
                let mut config = SsmConfig::new(feature_width, *num_heads, num_classes)?;
                config.bn_relu_on_last = *bn_relu_on_last;
                ssm_param_count(&config, true)
            }
            HeadSpec::ParallelFc { count } => count * (feature_width * num_classes + num_classes),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = self.backbone.widths();
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("backbone widths must be a non-empty list of positive sizes".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input dims must be positive, got {:?}", self.input)));
        }
        if let BackboneSpec::Cnn { widths } = &self.backbone {
            let pools = widths.len() - 1;
            let shrink = 1usize << pools;
            if self.input[1] < shrink || self.input[2] < shrink {
                return Err(Error::Config(format!(
                    "input {}x{} is too small for {} pooling stages",
                    self.input[1], self.input[2], pools
                )));
            }
        }
        match &self.head {
            HeadSpec::Ssm { num_heads, bn_relu_on_last } => {
                let mut c = SsmConfig {
                    num_channels: self.backbone.feature_width(),
                    num_heads: *num_heads,
                    num_classes: self.num_classes,
                    bn_relu_on_last: *bn_relu_on_last,
                    scheme: Default::default(),
                };
                c.bn_relu_on_last = *bn_relu_on_last;
                c.validate()
            }
            HeadSpec::ParallelFc { count } if *count == 0 => {
                Err(Error::Config("parallel classifier count must be at least 1".into()))
            }
            HeadSpec::ParallelFc { .. } if self.num_classes == 0 => {
                Err(Error::Config("num_classes must be positive".into()))
            }
            HeadSpec::ParallelFc { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Backbone {
    Cnn { convs: Vec<Conv2d>, norms: Vec<BatchNorm> },
    Mlp { linears: Vec<Linear>, norms: Vec<BatchNorm> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Ssm(SsmHead),
    Parallel(Vec<Linear>),
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Output of the last convolutional block (after BN and ReLU) for CNN backbones.
    pub activations: Option<Var>,
    pub features: Var,
    pub heads: SsmOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    backbone: Backbone,
    classifier: Classifier,
}

impl<T: Scalar> Model<T> {
    /// Builds and He-initializes a model; all randomness comes from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = match &spec.backbone {
            BackboneSpec::Cnn { widths } => {
                let mut prev = spec.input[0];
                let mut convs = Vec::new();
                let mut norms = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    convs.push(Conv2d::new(&mut store, &format!("backbone.conv{}", i + 1), prev, w, 3, 1, 1, false, &mut rng));
                    norms.push(BatchNorm::new(&mut store, &format!("backbone.bn{}", i + 1), w));
                    prev = w;
                }
                Backbone::Cnn { convs, norms }
            }
            BackboneSpec::Mlp { widths } => {
                let mut prev = spec.input.iter().product();
                let mut linears = Vec::new();
                let mut norms = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    linears.push(Linear::new(&mut store, &format!("backbone.fc{}", i + 1), prev, w, &mut rng));
                    norms.push(BatchNorm::new(&mut store, &format!("backbone.bn{}", i + 1), w));
                    prev = w;
                }
                Backbone::Mlp { linears, norms }
            }
        };
        let feature_width = spec.backbone.feature_width();
        let classifier = match &spec.head {
            HeadSpec::Ssm { num_heads, bn_relu_on_last } => {
                let mut config = SsmConfig::new(feature_width, *num_heads, spec.num_classes)?;
                config.bn_relu_on_last = *bn_relu_on_last;
                Classifier::Ssm(SsmHead::new(&mut store, "head", config, &mut rng)?)
            }
            HeadSpec::ParallelFc { count } => Classifier::Parallel(
                (0..*count)
                    .map(|i| Linear::new(&mut store, &format!("head.fc{}", i + 1), feature_width, spec.num_classes, &mut rng))
                    .collect(),
            ),
        };
        Ok(Model { spec, store, backbone, classifier })
    }

    pub fn num_heads(&self) -> usize {
        self.spec.head.num_heads()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_width(&self) -> usize {
        self.spec.backbone.feature_width()
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.classifier
    }

    pub fn ssm_head(&self) -> Option<&SsmHead> {
        match &self.classifier {
            Classifier::Ssm(h) => Some(h),
            Classifier::Parallel(_) => None,
        }
    }

    /// Casts `[B, C, H, W]` images to the model precision and records them as a constant.
    pub fn input_var(&self, tape: &mut Tape<T>, images: &Tensor<f64>) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::invalid(
                "model input",
                format!("expected [B, {}, {}, {}], got {:?}", self.spec.input[0], self.spec.input[1], self.spec.input[2], s),
            ));
        }
        Ok(tape.constant(images.cast()))
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<ModelOutput> {
        let (activations, features) = self.forward_features(tape, images, mode)?;
        let heads = self.forward_head(tape, features, mode)?;
        Ok(ModelOutput { activations, features, heads })
    }

    /// Backbone only: `(last conv activations, pooled feature [B, C])`.
    pub fn forward_features(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<(Option<Var>, Var)> {
        let store = &mut self.store;
        match &self.backbone {
            Backbone::Cnn { convs, norms } => {
                let mut x = images;
                let last = convs.len() - 1;
                for (i, (conv, bn)) in convs.iter().zip(norms).enumerate() {
                    x = conv.forward(store, tape, x)?;
                    x = bn.forward(store, tape, x, mode)?;
                    x = tape.relu(x);
                    if i < last {
                        x = tape.max_pool2d(x, 2)?;
                    }
                }
                let features = tape.global_avg_pool(x)?;
                Ok((Some(x), features))
            }
            Backbone::Mlp { linears, norms } => {
                let s = tape.shape(images).to_vec();
                let mut x = tape.reshape(images, &[s[0], s[1..].iter().product()])?;
                for (fc, bn) in linears.iter().zip(norms) {
                    x = fc.forward(store, tape, x)?;
                    x = bn.forward(store, tape, x, mode)?;
                    x = tape.relu(x);
                }
                Ok((None, x))
            }
        }
    }

    /// Global average pooling of conv activations followed by the classifier.
    pub fn forward_from_activations(&mut self, tape: &mut Tape<T>, activations: Var, mode: Mode) -> Result<SsmOutput> {
        let features = tape.global_avg_pool(activations)?;
        self.forward_head(tape, features, mode)
    }

    pub fn forward_head(&mut self, tape: &mut Tape<T>, features: Var, mode: Mode) -> Result<SsmOutput> {
        match &self.classifier {
            Classifier::Ssm(head) => head.forward(&mut self.store, tape, features, mode),
            Classifier::Parallel(fcs) => {
                let head_logits = fcs
                    .iter()
                    .map(|fc| fc.forward(&self.store, tape, features))
                    .collect::<Result<Vec<_>>>()?;
                let combined = tape.mean_of(&head_logits)?;
                Ok(SsmOutput { head_logits, combined })
            }
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        self.spec.backbone.param_count(self.spec.input)
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(head: HeadSpec) -> ModelSpec {
        ModelSpec { backbone: BackboneSpec::Cnn { widths: vec![4, 8] }, head, num_classes: 3, input: [1, 8, 8] }
    }

    #[test]
    fn store_param_count_matches_arithmetic() {
        for head in [
            HeadSpec::Ssm { num_heads: 4, bn_relu_on_last: true },
            HeadSpec::Ssm { num_heads: 2, bn_relu_on_last: false },
            HeadSpec::ParallelFc { count: 3 },
        ] {
            let spec = small_spec(head.clone());
            let model = Model::<f64>::new(spec.clone(), 0).unwrap();
            let expect = spec.backbone.param_count(spec.input) + head.param_count(8, 3).unwrap();
            assert_eq!(model.store.trainable_count(), expect, "{head:?}");
        }
        let mlp = ModelSpec {
            backbone: BackboneSpec::Mlp { widths: vec![6, 4] },
            head: HeadSpec::ParallelFc { count: 1 },
            num_classes: 2,
            input: [1, 3, 3],
        };
        let model = Model::<f64>::new(mlp.clone(), 0).unwrap();
        assert_eq!(model.store.trainable_count(), mlp.backbone.param_count(mlp.input) + 4 * 2 + 2);
    }

    #[test]
    fn indivisible_feature_width_is_rejected() {
        let spec = ModelSpec {
            backbone: BackboneSpec::Cnn { widths: vec![4, 10] },
            head: HeadSpec::Ssm { num_heads: 4, bn_relu_on_last: true },
            num_classes: 3,
            input: [1, 8, 8],
        };
        let err = Model::<f64>::new(spec, 0).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn forward_shapes() {
        let mut model = Model::<f64>::new(small_spec(HeadSpec::Ssm { num_heads: 4, bn_relu_on_last: true }), 1).unwrap();
        let mut tape = Tape::new();
        let images = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i as f64 * 0.3).sin());
        let x = model.input_var(&mut tape, &images).unwrap();
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.activations.unwrap()), &[2, 8, 4, 4]);
        assert_eq!(tape.shape(out.features), &[2, 8]);
        assert_eq!(out.heads.head_logits.len(), 4);
        assert_eq!(tape.shape(out.heads.combined), &[2, 3]);
    }

    #[test]
    fn same_seed_same_model() {
        let spec = small_spec(HeadSpec::ParallelFc { count: 2 });
        assert_eq!(Model::<f32>::new(spec.clone(), 5).unwrap(), Model::<f32>::new(spec.clone(), 5).unwrap());
        assert_ne!(Model::<f32>::new(spec.clone(), 5).unwrap(), Model::<f32>::new(spec, 6).unwrap());
    }
}
