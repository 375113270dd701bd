//! Sequential classifiers: layer specs, runtime layers with weights, plain
//! and taped forward passes, and prediction helpers.
//!
//! Models take raw `[C, H, W]` pixels in `[0, 255]`; each model's own input
//! normalization runs inside `forward`, so attacks and defenses all operate
//! in pixel space.

mod io;
mod train;
mod zoo;

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION};
pub use train::{
    adversarial_train, train, AdversarialTrainConfig, TrainConfig, Trainer, TrainReport,
};
pub use zoo::{build_zoo, zoo_architectures, Architecture, ZooConfig};

use crate::data::Dataset;
use crate::error::NetworkError;
use crate::kernels;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Architecture description of one layer, without weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    Softmax,
}

/// A layer with its weights, where applicable.
#[derive(Clone, Debug)]
pub enum Layer {
    /// `w: [units, in]`, `b: [units]`.
    Dense { w: Tensor, b: Tensor },
    /// `k: [channels, in_channels, kernel, kernel]`, `b: [channels]`.
    Conv2d { k: Tensor, b: Tensor, stride: usize, pad: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    Softmax,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { w, .. } => LayerSpec::Dense { units: w.shape()[0] },
            Layer::Conv2d { k, stride, pad, .. } => LayerSpec::Conv2d {
                channels: k.shape()[0],
                kernel: k.shape()[2],
                stride: *stride,
                pad: *pad,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size, stride } => LayerSpec::MaxPool {
                size: *size,
                stride: *stride,
            },
            Layer::AvgPool { size, stride } => LayerSpec::AvgPool {
                size: *size,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }
}

/// Shape produced by a spec for a given input shape.
fn spec_output_shape(
    spec: &LayerSpec,
    input: &[usize],
    index: usize,
) -> Result<Vec<usize>, NetworkError> {
    let arch_err = |kind: &'static str, reason: String| NetworkError::Architecture {
        index,
        kind,
        reason,
    };
    match spec {
        LayerSpec::Dense { units } => match input {
            [_] => Ok(vec![*units]),
            other => Err(arch_err(
                "dense",
                format!("expects a flat input, got {other:?}"),
            )),
        },
        LayerSpec::Conv2d { channels, kernel, stride, pad } => match input {
            [_, h, w] => {
                if *stride == 0 || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(arch_err(
                        "conv2d",
                        format!("kernel {kernel} stride {stride} pad {pad} does not fit {input:?}"),
                    ));
                }
                Ok(vec![
                    *channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            other => Err(arch_err(
                "conv2d",
                format!("expects [C, H, W], got {other:?}"),
            )),
        },
        LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => match input {
            [c, h, w] => {
                if *size == 0 || *stride == 0 || h < size || w < size {
                    return Err(arch_err(
                        "pool",
                        format!("window {size} stride {stride} does not fit {input:?}"),
                    ));
                }
                Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            other => Err(arch_err("pool", format!("expects [C, H, W], got {other:?}"))),
        },
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::Softmax => match input {
            [_] => Ok(input.to_vec()),
            other => Err(arch_err(
                "softmax",
                format!("expects a flat input, got {other:?}"),
            )),
        },
    }
}

/// Per-channel input normalization applied inside `forward`:
/// `normalized[c] = pixel[c] * scale[c] + shift[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub scale: Vec<Real>,
    pub shift: Vec<Real>,
}

impl Preprocess {
    /// Maps `[0, 255]` to `[0, 1]`.
    pub fn unit(channels: usize) -> Self {
        Preprocess {
            scale: vec![1.0 / 255.0; channels],
            shift: vec![0.0; channels],
        }
    }

    /// Maps `[0, 255]` to `[-1, 1]`.
    pub fn centered(channels: usize) -> Self {
        Preprocess {
            scale: vec![1.0 / 127.5; channels],
            shift: vec![-1.0; channels],
        }
    }
}

/// A sequential classifier ending in a softmax layer.
#[derive(Clone, Debug)]
pub struct Model {
    pub label: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub preprocess: Preprocess,
    layers: Vec<Layer>,
}

/// Plain (untaped) forward pass output.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Taped forward pass: node ids for the input, every layer boundary, the
/// logits, and the probabilities. `layer_io[i]` is (input, output) of layer
/// `i`, which is exactly the activation cache relevance propagation needs.
pub struct TapedForward {
    pub input: NodeId,
    pub normalized: NodeId,
    pub layer_io: Vec<(NodeId, NodeId)>,
    /// Per-layer weight leaves `(w, b)` for trainable layers.
    pub params: Vec<Option<(NodeId, NodeId)>>,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl Model {
    /// Builds a model from specs with freshly initialized weights
    /// (He-scaled normals for weights, zeros for biases).
    pub fn from_specs(
        label: &str,
        input_shape: &[usize],
        class_count: usize,
        preprocess: Preprocess,
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Model, NetworkError> {
        let mut rng = Rng::seed(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out_shape = spec_output_shape(spec, &shape, i)?;
            let layer = match spec {
                LayerSpec::Dense { units } => {
                    let fan_in = shape[0];
                    let std = (2.0 / fan_in as Real).sqrt();
                    let w = Tensor::raw(
                        vec![*units, fan_in],
                        (0..units * fan_in).map(|_| rng.normal(0.0, std)).collect(),
                    );
                    Layer::Dense {
                        w,
                        b: Tensor::zeros(&[*units]),
                    }
                }
                LayerSpec::Conv2d { channels, kernel, stride, pad } => {
                    let fan_in = shape[0] * kernel * kernel;
                    let std = (2.0 / fan_in as Real).sqrt();
                    let k = Tensor::raw(
                        vec![*channels, shape[0], *kernel, *kernel],
                        (0..channels * shape[0] * kernel * kernel)
                            .map(|_| rng.normal(0.0, std))
                            .collect(),
                    );
                    Layer::Conv2d {
                        k,
                        b: Tensor::zeros(&[*channels]),
                        stride: *stride,
                        pad: *pad,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool {
                    size: *size,
                    stride: *stride,
                },
                LayerSpec::AvgPool { size, stride } => Layer::AvgPool {
                    size: *size,
                    stride: *stride,
                },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Softmax => Layer::Softmax,
            };
            layers.push(layer);
            shape = out_shape;
        }
        Model::assemble(label, input_shape, class_count, preprocess, layers)
    }

    /// Builds a model from explicit layers (weights included), validating
    /// them against the input shape and class count.
    pub fn assemble(
        label: &str,
        input_shape: &[usize],
        class_count: usize,
        preprocess: Preprocess,
        layers: Vec<Layer>,
    ) -> Result<Model, NetworkError> {
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(NetworkError::MissingSoftmaxHead);
        }
        if input_shape.len() != 3 || preprocess.scale.len() != input_shape[0] {
            return Err(NetworkError::InputShape {
                expected: vec![preprocess.scale.len(), 0, 0],
                found: input_shape.to_vec(),
            });
        }
        // Walk the shapes; also validates embedded weight shapes.
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            let out = spec_output_shape(&layer.spec(), &shape, i)?;
            match layer {
                Layer::Dense { w, b } => {
                    if w.shape()[1] != shape[0] || b.shape() != [w.shape()[0]] {
                        return Err(NetworkError::Architecture {
                            index: i,
                            kind: layer.kind(),
                            reason: format!(
                                "weights {:?}/{:?} do not fit input {shape:?}",
                                w.shape(),
                                b.shape()
                            ),
                        });
                    }
                }
                Layer::Conv2d { k, b, .. } => {
                    if k.shape()[1] != shape[0]
                        || k.shape()[2] != k.shape()[3]
                        || b.shape() != [k.shape()[0]]
                    {
                        return Err(NetworkError::Architecture {
                            index: i,
                            kind: layer.kind(),
                            reason: format!(
                                "weights {:?}/{:?} do not fit input {shape:?}",
                                k.shape(),
                                b.shape()
                            ),
                        });
                    }
                }
                _ => {}
            }
            shape = out;
            if matches!(layer, Layer::Softmax) && i + 1 != layers.len() {
                return Err(NetworkError::Architecture {
                    index: i,
                    kind: "softmax",
                    reason: "softmax must be the final layer".to_string(),
                });
            }
        }
        if shape != [class_count] {
            return Err(NetworkError::Architecture {
                index: layers.len() - 1,
                kind: "softmax",
                reason: format!("output shape {shape:?}, expected [{class_count}]"),
            });
        }
        Ok(Model {
            label: label.to_string(),
            input_shape: input_shape.to_vec(),
            class_count,
            preprocess,
            layers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetworkError> {
        if x.shape() != self.input_shape {
            return Err(NetworkError::InputShape {
                expected: self.input_shape.clone(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Untaped forward pass. Numerically identical to the taped one: both
    /// route through the same kernels.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass, NetworkError> {
        self.check_input(x)?;
        let mut a = kernels::channel_affine(x, &self.preprocess.scale, &self.preprocess.shift)?;
        let mut logits = None;
        for layer in &self.layers {
            a = match layer {
                Layer::Dense { w, b } => {
                    kernels::binary(kernels::BinOp::Add, &kernels::matmul(w, &a)?, b)?
                }
                Layer::Conv2d { k, b, stride, pad } => {
                    kernels::chan_bias(&kernels::conv2d(&a, k, *stride, *pad)?, b)?
                }
                Layer::Relu => kernels::relu(&a),
                Layer::MaxPool { size, stride } => kernels::maxpool(&a, *size, *stride)?.0,
                Layer::AvgPool { size, stride } => kernels::avgpool(&a, *size, *stride)?,
                Layer::Flatten => a.reshaped(vec![a.len()])?,
                Layer::Softmax => {
                    logits = Some(a.clone());
                    kernels::softmax(&a)?
                }
            };
        }
        if !a.data().iter().all(|v| v.is_finite()) {
            return Err(crate::error::TensorError::NonFinite {
                context: "forward pass",
            }
            .into());
        }
        Ok(ForwardPass {
            logits: logits.expect("softmax head guaranteed by constructor"),
            probs: a,
        })
    }

    /// Forward pass recorded on a tape, starting from an existing input node.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        input: NodeId,
    ) -> Result<TapedForward, NetworkError> {
        self.check_input(tape.value(input))?;
        let normalized =
            tape.channel_affine(input, &self.preprocess.scale, &self.preprocess.shift)?;
        let mut a = normalized;
        let mut layer_io = Vec::with_capacity(self.layers.len());
        let mut params = Vec::with_capacity(self.layers.len());
        let mut logits = None;
        for layer in &self.layers {
            let layer_in = a;
            a = match layer {
                Layer::Dense { w, b } => {
                    let wl = tape.leaf(w.clone());
                    let bl = tape.leaf(b.clone());
                    params.push(Some((wl, bl)));
                    let z = tape.matmul(wl, a)?;
                    tape.add(z, bl)?
                }
                Layer::Conv2d { k, b, stride, pad } => {
                    let kl = tape.leaf(k.clone());
                    let bl = tape.leaf(b.clone());
                    params.push(Some((kl, bl)));
                    let z = tape.conv2d(a, kl, *stride, *pad)?;
                    tape.chan_bias(z, bl)?
                }
                other => {
                    params.push(None);
                    match other {
                        Layer::Relu => tape.relu(a)?,
                        Layer::MaxPool { size, stride } => tape.maxpool(a, *size, *stride)?,
                        Layer::AvgPool { size, stride } => tape.avgpool(a, *size, *stride)?,
                        Layer::Flatten => {
                            let len = tape.value(a).len();
                            tape.reshape(a, vec![len])?
                        }
                        Layer::Softmax => {
                            logits = Some(a);
                            tape.softmax(a)?
                        }
                        _ => unreachable!("weight layers handled above"),
                    }
                }
            };
            layer_io.push((layer_in, a));
        }
        Ok(TapedForward {
            input,
            normalized,
            layer_io,
            params,
            logits: logits.expect("softmax head guaranteed by constructor"),
            probs: a,
        })
    }

    /// Top-1 class (lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<usize, NetworkError> {
        Ok(self.forward(x)?.probs.max_element()?.0)
    }

    /// Top-k classes with probabilities, sorted by probability descending,
    /// index ascending on ties.
    pub fn predict_topk(&self, x: &Tensor, k: usize) -> Result<Vec<(usize, Real)>, NetworkError> {
        let probs = self.forward(x)?.probs;
        let mut ranked: Vec<(usize, Real)> = probs.data().iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Fraction of dataset samples classified correctly.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<Real, NetworkError> {
        use rayon::prelude::*;
        let correct = dataset
            .images
            .par_iter()
            .zip(dataset.labels.par_iter())
            .map(|(x, &y)| Ok(usize::from(self.predict(x)? == y)))
            .collect::<Result<Vec<_>, NetworkError>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as Real / dataset.len() as Real)
    }

    /// Hash of the active piecewise-linear region at `x`: relu masks and
    /// pooling argmax choices. Finite-difference checks skip coordinates
    /// whose signature differs between probe points.
    pub fn kink_signature(&self, x: &Tensor) -> Result<u64, NetworkError> {
        self.check_input(x)?;
        let mut hash = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        let mut feed = |v: u64| {
            hash ^= v;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        };
        let mut a = kernels::channel_affine(x, &self.preprocess.scale, &self.preprocess.shift)?;
        for layer in &self.layers {
            a = match layer {
                Layer::Dense { w, b } => {
                    kernels::binary(kernels::BinOp::Add, &kernels::matmul(w, &a)?, b)?
                }
                Layer::Conv2d { k, b, stride, pad } => {
                    kernels::chan_bias(&kernels::conv2d(&a, k, *stride, *pad)?, b)?
                }
                Layer::Relu => {
                    for (i, &v) in a.data().iter().enumerate() {
                        if v > 0.0 {
                            feed(i as u64 + 1);
                        }
                    }
                    kernels::relu(&a)
                }
                Layer::MaxPool { size, stride } => {
                    let (pooled, argmax) = kernels::maxpool(&a, *size, *stride)?;
                    for &idx in &argmax {
                        feed(idx as u64 + 0x9e37);
                    }
                    pooled
                }
                Layer::AvgPool { size, stride } => kernels::avgpool(&a, *size, *stride)?,
                Layer::Flatten => a.reshaped(vec![a.len()])?,
                Layer::Softmax => kernels::softmax(&a)?,
            };
        }
        Ok(hash)
    }
}

/// Cross-entropy `-ln p[target]` built from logits via the log-sum-exp
/// identity, so its gradient through the tape is exactly `softmax - onehot`.
pub fn tape_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    target: usize,
) -> Result<NodeId, crate::error::TapeError> {
    let m = tape.max_all(logits)?;
    let shifted = tape.sub(logits, m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e)?;
    let lse = tape.ln(s)?;
    let lse = tape.add(lse, m)?;
    let zy = tape.select(logits, target)?;
    tape.sub(lse, zy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        // 1x2x2 input, flatten, dense to 2 classes, softmax; known weights.
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                w: Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.0, 0.4]).unwrap(),
                b: Tensor::new(vec![2], vec![0.05, -0.05]).unwrap(),
            },
            Layer::Softmax,
        ];
        Model::assemble(
            "tiny",
            &[1, 2, 2],
            2,
            Preprocess::unit(1),
            layers,
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_hand_computation() {
        let m = tiny_model();
        let x = Tensor::new(vec![1, 2, 2], vec![255.0, 0.0, 127.5, 51.0]).unwrap();
        let f = m.forward(&x).unwrap();
        // Normalized input: [1.0, 0.0, 0.5, 0.2].
        let z0 = 0.1 * 1.0 + (-0.2) * 0.0 + 0.3 * 0.5 + 0.0 * 0.2 + 0.05;
        let z1 = -0.1 * 1.0 + 0.2 * 0.0 + 0.0 * 0.5 + 0.4 * 0.2 - 0.05;
        assert!((f.logits.data()[0] - z0).abs() < 1e-12);
        assert!((f.logits.data()[1] - z1).abs() < 1e-12);
        let sum: Real = f.probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taped_forward_is_bit_identical_to_plain() {
        let m = tiny_model();
        let x = Tensor::new(vec![1, 2, 2], vec![10.0, 250.0, 33.0, 128.0]).unwrap();
        let plain = m.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let fwd = m.forward_taped(&mut tape, xi).unwrap();
        assert_eq!(tape.value(fwd.probs), &plain.probs);
        assert_eq!(tape.value(fwd.logits), &plain.logits);
    }

    #[test]
    fn predict_topk_orders_and_breaks_ties_low() {
        let m = tiny_model();
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        // Logits become the biases [0.05, -0.05] -> class 0 wins.
        assert_eq!(m.predict(&x).unwrap(), 0);
        let topk = m.predict_topk(&x, 2).unwrap();
        assert_eq!(topk[0].0, 0);
        assert_eq!(topk[1].0, 1);
        assert!(topk[0].1 >= topk[1].1);
    }

    #[test]
    fn constructor_rejects_missing_softmax_and_bad_shapes() {
        let layers = vec![Layer::Flatten];
        assert!(matches!(
            Model::assemble("m", &[1, 2, 2], 4, Preprocess::unit(1), layers),
            Err(NetworkError::MissingSoftmaxHead)
        ));
        // Dense weights not matching the flattened input.
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                w: Tensor::zeros(&[2, 5]),
                b: Tensor::zeros(&[2]),
            },
            Layer::Softmax,
        ];
        assert!(matches!(
            Model::assemble("m", &[1, 2, 2], 2, Preprocess::unit(1), layers),
            Err(NetworkError::Architecture { .. })
        ));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = tiny_model();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 3, 3])),
            Err(NetworkError::InputShape { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap());
        let ce = tape_cross_entropy(&mut tape, logits, 2).unwrap();
        let p = kernels::softmax(tape.value(logits)).unwrap();
        // Value: -ln p[2].
        assert!((tape.value(ce).item() + p.data()[2].ln()).abs() < 1e-12);
        let g = tape.gradient(ce, logits).unwrap().grad;
        for j in 0..3 {
            let expect = p.data()[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.data()[j] - expect).abs() < 1e-12, "class {j}");
        }
    }

    #[test]
    fn from_specs_builds_conv_stack_with_expected_shapes() {
        let specs = vec![
            LayerSpec::Conv2d { channels: 4, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
            LayerSpec::Softmax,
        ];
        let m = Model::from_specs("cnn", &[1, 8, 8], 3, Preprocess::centered(1), &specs, 9).unwrap();
        let x = Tensor::filled(&[1, 8, 8], 100.0);
        let f = m.forward(&x).unwrap();
        assert_eq!(f.probs.shape(), &[3]);
        // Same seed, same weights.
        let m2 = Model::from_specs("cnn", &[1, 8, 8], 3, Preprocess::centered(1), &specs, 9).unwrap();
        assert_eq!(m2.forward(&x).unwrap().probs, f.probs);
    }
}
