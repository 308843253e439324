//! Small CNN binary classifier: architecture, initialization, training with
//! the augmentation recipe, inference, and checkpointing.

mod augment;
mod checkpoint;
mod train;

pub use augment::{augment, mixup_pair, rotate_quarters, AugmentFlags};
pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use train::{train, train_traced, TrainConfig, TrainLog};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{kernels, NodeId, Tape, Tensor};

/// One layer of the architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dense {
        out: usize,
    },
}

/// Layer list with input geometry; serializable as a one-line text
/// descriptor (see [`Architecture::descriptor`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// The default desk-scale net: three conv/relu/pool blocks (8, 16, 32
    /// channels, 3x3 kernels, same padding) followed by dense(64) + dense(2).
    pub fn small_cnn(input: (usize, usize, usize)) -> Self {
        let mut layers = Vec::new();
        for ch in [8usize, 16, 32] {
            layers.push(LayerSpec::Conv {
                out_channels: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { out: 64 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { out: 2 });
        Architecture { input, layers }
    }

    pub fn descriptor(&self) -> String {
        let mut parts = vec![format!(
            "input {}x{}x{}",
            self.input.0, self.input.1, self.input.2
        )];
        for layer in &self.layers {
            parts.push(match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => format!("conv {out_channels} {kernel} {stride} {padding}"),
                LayerSpec::Relu => "relu".into(),
                LayerSpec::MaxPool2 => "pool".into(),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Dense { out } => format!("dense {out}"),
            });
        }
        parts.join("; ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for part in text.split(';') {
            let tokens: Vec<&str> = part.split_whitespace().collect();
            let bad = || Error::MalformedContainer(format!("bad descriptor part {part:?}"));
            match tokens.as_slice() {
                ["input", dims] => {
                    let d: Vec<usize> = dims
                        .split('x')
                        .map(|t| t.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(bad());
                    }
                    input = Some((d[0], d[1], d[2]));
                }
                ["conv", ch, k, s, p] => layers.push(LayerSpec::Conv {
                    out_channels: ch.parse().map_err(|_| bad())?,
                    kernel: k.parse().map_err(|_| bad())?,
                    stride: s.parse().map_err(|_| bad())?,
                    padding: p.parse().map_err(|_| bad())?,
                }),
                ["relu"] => layers.push(LayerSpec::Relu),
                ["pool"] => layers.push(LayerSpec::MaxPool2),
                ["flatten"] => layers.push(LayerSpec::Flatten),
                ["dense", out] => layers.push(LayerSpec::Dense {
                    out: out.parse().map_err(|_| bad())?,
                }),
                [] => {}
                _ => return Err(bad()),
            }
        }
        let input = input.ok_or_else(|| {
            Error::MalformedContainer("descriptor missing input geometry".into())
        })?;
        Ok(Architecture { input, layers })
    }

    /// Shapes of all parameter tensors in layer order (conv: kernel then
    /// bias, dense: weight then bias), validating the layer geometry.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        let (mut c, mut h, mut w) = self.input;
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if flat.is_some() {
                        return Err(Error::shape("architecture", format!("conv after flatten at layer {i}")));
                    }
                    let (out_shape, _) = kernels::conv2d_out_shape(
                        &[1, c, h, w],
                        &[*out_channels, c, *kernel, *kernel],
                        *stride,
                        *padding,
                    )?;
                    shapes.push(vec![*out_channels, c, *kernel, *kernel]);
                    shapes.push(vec![*out_channels]);
                    c = *out_channels;
                    h = out_shape[2];
                    w = out_shape[3];
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool2 => {
                    if flat.is_some() {
                        return Err(Error::shape("architecture", format!("pool after flatten at layer {i}")));
                    }
                    h /= 2;
                    w /= 2;
                    if h == 0 || w == 0 {
                        return Err(Error::shape("architecture", format!("pool at layer {i} empties the feature map")));
                    }
                }
                LayerSpec::Flatten => {
                    if flat.is_some() {
                        return Err(Error::shape("architecture", "second flatten".to_string()));
                    }
                    flat = Some(c * h * w);
                }
                LayerSpec::Dense { out } => {
                    let fan_in = flat.ok_or_else(|| {
                        Error::shape("architecture", format!("dense before flatten at layer {i}"))
                    })?;
                    shapes.push(vec![fan_in, *out]);
                    shapes.push(vec![*out]);
                    flat = Some(*out);
                }
            }
        }
        Ok(shapes)
    }

    /// Width of the final dense layer (the class count).
    pub fn output_width(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Dense { out } => Some(*out),
            _ => None,
        })
    }
}

/// Forward trace of a batch through the model on a tape.
pub struct TapedForward<S> {
    pub tape: Tape<S>,
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

/// Gradient set from one loss evaluation.
#[derive(Debug)]
pub struct ModelGradients<S> {
    /// Aligned with [`ClassifierModel::params`].
    pub params: Vec<Tensor<S>>,
    /// Present when gradients with respect to the input were requested.
    pub input: Option<Tensor<S>>,
}

/// Batch labels: hard binary labels or soft rows (mixup).
#[derive(Clone, Debug)]
pub enum Labels<S> {
    Hard(Vec<u8>),
    Soft(Vec<[S; 2]>),
}

impl<S: Scalar> Labels<S> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Soft rows, validating hard labels against the binary range.
    pub fn to_rows(&self) -> Result<Vec<S>> {
        let mut rows = Vec::with_capacity(self.len() * 2);
        match self {
            Labels::Hard(v) => {
                for &y in v {
                    if y > 1 {
                        return Err(Error::LabelOutOfRange(y as i64));
                    }
                    rows.push(if y == 0 { S::one() } else { S::zero() });
                    rows.push(if y == 1 { S::one() } else { S::zero() });
                }
            }
            Labels::Soft(v) => {
                for row in v {
                    rows.push(row[0]);
                    rows.push(row[1]);
                }
            }
        }
        Ok(rows)
    }
}

/// Parameter set of the small CNN, with its geometry and training seed.
#[derive(Clone, Debug)]
pub struct ClassifierModel<S> {
    pub arch: Architecture,
    pub params: Vec<Tensor<S>>,
    pub input_spec: (usize, usize, usize),
    pub class_count: usize,
    pub training_seed: u64,
}

impl<S: Scalar> ClassifierModel<S> {
    /// Initializes parameters uniformly in +-sqrt(6 / (fan_in + fan_out))
    /// from the seed's "init" stream; biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        if arch.output_width() != Some(2) {
            return Err(Error::InvalidConfig(format!(
                "final dense layer must have 2 outputs, descriptor {:?}",
                arch.descriptor()
            )));
        }
        let mut rng = SplitMix64::keyed(seed, "init");
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let t = match shape.len() {
                1 => Tensor::zeros(shape),
                2 => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    init_uniform(&shape, bound, &mut rng)
                }
                4 => {
                    let receptive = shape[2] * shape[3];
                    let fan_in = shape[1] * receptive;
                    let fan_out = shape[0] * receptive;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    init_uniform(&shape, bound, &mut rng)
                }
                _ => unreachable!("param_shapes yields rank 1, 2, or 4"),
            };
            params.push(t);
        }
        Ok(ClassifierModel {
            input_spec: arch.input,
            class_count: 2,
            training_seed: seed,
            arch,
            params,
        })
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = x.shape();
        let (c, h, w) = self.input_spec;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "forward",
                format!("input {s:?}, model expects [N, {c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    /// Tape-free forward pass to logits [N, 2].
    pub fn forward_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut cur = x.clone();
        let mut pi = 0usize;
        for layer in &self.arch.layers {
            cur = match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let kernel = &self.params[pi];
                    let bias = &self.params[pi + 1];
                    pi += 2;
                    let conv = crate::tensor::conv2d(&cur, kernel, *stride, *padding)?;
                    let mut out = Tensor::zeros(conv.shape().to_vec());
                    kernels::bias_add_forward(conv.data(), conv.shape(), bias.data(), out.data_mut());
                    out
                }
                LayerSpec::Relu => {
                    let mut out = Tensor::zeros(cur.shape().to_vec());
                    kernels::relu_forward(cur.data(), out.data_mut());
                    out
                }
                LayerSpec::MaxPool2 => {
                    let s = cur.shape();
                    let out_shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
                    let numel = out_shape.iter().product();
                    let mut out = Tensor::zeros(out_shape);
                    let mut argmax = vec![0u32; numel];
                    kernels::maxpool2_forward(cur.data(), s, out.data_mut(), &mut argmax);
                    out
                }
                LayerSpec::Flatten => {
                    let numel = cur.numel() / n;
                    cur.reshape(vec![n, numel])?
                }
                LayerSpec::Dense { out } => {
                    let weight = &self.params[pi];
                    let bias = &self.params[pi + 1];
                    pi += 2;
                    let (m, k) = (cur.shape()[0], cur.shape()[1]);
                    let mut z = Tensor::zeros(vec![m, *out]);
                    kernels::matmul(cur.data(), weight.data(), m, k, *out, z.data_mut());
                    let mut zb = Tensor::zeros(vec![m, *out]);
                    kernels::bias_add_forward(z.data(), z.shape(), bias.data(), zb.data_mut());
                    zb
                }
            };
        }
        Ok(cur)
    }

    /// Forward pass recorded on a fresh tape, for gradient work.
    pub fn forward_taped(&self, x: &Tensor<S>, input_requires_grad: bool) -> Result<TapedForward<S>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut tape = Tape::new();
        let mut xt = x.clone();
        xt.requires_grad = input_requires_grad;
        let input = tape.leaf(&xt);

        let mut param_ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut p = p.clone();
            p.requires_grad = true;
            param_ids.push(tape.leaf(&p));
        }

        let mut cur = input;
        let mut pi = 0usize;
        for layer in &self.arch.layers {
            cur = match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let conv = tape.conv2d(cur, param_ids[pi], *stride, *padding)?;
                    let out = tape.bias_add(conv, param_ids[pi + 1])?;
                    pi += 2;
                    out
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::MaxPool2 => tape.maxpool2(cur)?,
                LayerSpec::Flatten => {
                    let numel = tape.value(cur).len() / n;
                    tape.reshape(cur, vec![n, numel])?
                }
                LayerSpec::Dense { .. } => {
                    let z = tape.matmul(cur, param_ids[pi])?;
                    let out = tape.bias_add(z, param_ids[pi + 1])?;
                    pi += 2;
                    out
                }
            };
        }
        Ok(TapedForward {
            tape,
            input,
            logits: cur,
            params: param_ids,
        })
    }

    /// Softmax probabilities [N, 2]; inference mode, no tape.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let logits = self.forward_logits(images)?;
        crate::tensor::softmax_rows(&logits)
    }

    /// Like [`predict`](Self::predict) but also rejects out-of-range pixels.
    pub fn predict_strict(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        for &p in images.data() {
            if !(p >= S::zero() && p <= S::one()) {
                return Err(Error::PixelOutOfRange(format!("{p}")));
            }
        }
        self.predict(images)
    }

    /// Mean cross-entropy of the batch and its gradients: always with respect
    /// to every parameter, and to the input when `wrt_input` is set. Each
    /// call records and consumes a fresh tape.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor<S>,
        labels: &Labels<S>,
        wrt_input: bool,
    ) -> Result<(S, ModelGradients<S>)> {
        if labels.len() != x.shape()[0] {
            return Err(Error::shape(
                "loss_and_gradients",
                format!("{} labels for batch of {}", labels.len(), x.shape()[0]),
            ));
        }
        let fwd = self.forward_taped(x, wrt_input)?;
        let TapedForward {
            mut tape,
            input,
            logits,
            params,
        } = fwd;
        let loss_id = tape.softmax_cross_entropy(logits, labels.to_rows()?)?;
        let loss = tape.value(loss_id)[0];
        let grads = tape.backward(loss_id)?;
        let param_grads = params
            .iter()
            .map(|&id| grads.wrt(id))
            .collect::<Result<Vec<_>>>()?;
        let input_grad = if wrt_input { Some(grads.wrt(input)?) } else { None };
        Ok((
            loss,
            ModelGradients {
                params: param_grads,
                input: input_grad,
            },
        ))
    }
}

fn init_uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut SplitMix64) -> Tensor<S> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(rng.next_range(-bound, bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_roundtrips() {
        let arch = Architecture::small_cnn((1, 32, 32));
        let text = arch.descriptor();
        assert_eq!(Architecture::parse(&text).unwrap(), arch);
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let arch = Architecture::small_cnn((1, 32, 32));
        let mut model: ClassifierModel<f64> = ClassifierModel::init(arch, 0).unwrap();
        for p in &mut model.params {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::full(vec![2, 1, 32, 32], 0.7);
        let logits = model.forward_logits(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let probs = model.predict(&x).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn duplicated_inputs_produce_identical_rows() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 3).unwrap();
        let mut rng = crate::rng::SplitMix64::keyed(1, "dup");
        let one: Vec<f64> = (0..1024).map(|_| rng.next_f64()).collect();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        let x = Tensor::from_vec(vec![2, 1, 32, 32], data).unwrap();
        let probs = model.predict(&x).unwrap();
        assert_eq!(probs.data()[..2], probs.data()[2..4]);
        let row_sum = probs.data()[0] + probs.data()[1];
        assert!((row_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taped_and_inference_forward_agree_bitwise() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 9).unwrap();
        let mut rng = crate::rng::SplitMix64::keyed(2, "agree");
        let x = Tensor::from_vec(
            vec![3, 1, 32, 32],
            (0..3 * 1024).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let inference = model.forward_logits(&x).unwrap();
        let taped = model.forward_taped(&x, false).unwrap();
        assert_eq!(inference.data(), taped.tape.value(taped.logits));
    }

    #[test]
    fn input_shape_errors_are_reported() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(model.forward_logits(&x).is_err());
    }

    #[test]
    fn hard_label_out_of_range_is_rejected() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 32, 32]);
        let err = model
            .loss_and_gradients(&x, &Labels::Hard(vec![2]), false)
            .unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange(2)));
    }
}
