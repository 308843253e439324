//! Single-use reverse-mode tape.
//!
//! A forward pass records one node per primitive operation, in topological
//! order by construction. `backward` consumes the tape, walks the nodes once
//! in reverse, and returns the gradients of every leaf that asked for them.
//! An attack loop that needs fresh gradients re-runs the forward pass.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Reshape {
        input: NodeId,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
    },
    /// out = ca * a + cb * b, elementwise.
    AffineCombine {
        a: NodeId,
        b: NodeId,
        ca: S,
        cb: S,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<S>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of primitive operations from one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward will produce a gradient for it.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_vec(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("tape node shapes are consistent")
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (out_shape, _) =
            kernels::conv2d_out_shape(self.shape(input), self.shape(kernel), stride, padding)?;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        kernels::conv2d_forward(
            self.value(input),
            self.shape(input),
            self.value(kernel),
            self.shape(kernel),
            stride,
            padding,
            &mut out,
        );
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(out, out_shape, Op::Conv2d { input, kernel, stride, padding }, needs))
    }

    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape(
                "bias_add",
                format!("input {:?} vs bias {:?}", shape, self.shape(bias)),
            ));
        }
        let mut out = vec![S::zero(); self.value(input).len()];
        kernels::bias_add_forward(self.value(input), &shape, self.value(bias), &mut out);
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(out, shape, Op::BiasAdd { input, bias }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = vec![S::zero(); self.value(input).len()];
        kernels::relu_forward(self.value(input), &mut out);
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(out, shape, Op::Relu { input }, needs)
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(Error::shape(
                "maxpool2",
                format!("expected [N,C,H,W], got {shape:?}"),
            ));
        }
        let out_shape = vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        let numel = out_shape.iter().product();
        let mut out = vec![S::zero(); numel];
        let mut argmax = vec![0u32; numel];
        kernels::maxpool2_forward(self.value(input), shape, &mut out, &mut argmax);
        let needs = self.needs(input);
        Ok(self.push(out, out_shape, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let data = self.value(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(data, shape, Op::Reshape { input }, needs))
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::shape(
                "matmul",
                format!("{ls:?} x {rs:?}"),
            ));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.value(lhs), self.value(rhs), m, k, n, &mut out);
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, vec![m, n], Op::MatMul { lhs, rhs }, needs))
    }

    /// Elementwise `ca * a + cb * b`; shapes must match.
    pub fn affine_combine(&mut self, a: NodeId, b: NodeId, ca: S, cb: S) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "affine_combine",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::AffineCombine { a, b, ca, cb }, needs))
    }

    /// Mean softmax cross-entropy of [n, classes] logits against soft target
    /// rows (one-hot rows for hard labels). Produces a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<S>) -> Result<NodeId> {
        let shape = self.shape(logits);
        if shape.len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [n, classes] logits, got {shape:?}"),
            ));
        }
        let classes = shape[1];
        if targets.len() != self.value(logits).len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "targets length {} vs logits length {}",
                    targets.len(),
                    self.value(logits).len()
                ),
            ));
        }
        let mut probs = vec![S::zero(); self.value(logits).len()];
        let loss =
            kernels::softmax_cross_entropy_forward(self.value(logits), &targets, classes, &mut probs);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            needs,
        ))
    }

    /// Consumes the tape and returns gradients of `root` (a scalar node) with
    /// respect to every leaf registered with `requires_grad`.
    pub fn backward(self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![S::one()]);
        }

        // Helper to lazily materialize a gradient buffer.
        fn buf<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
            slot.get_or_insert_with(|| vec![S::zero(); len])
        }

        for idx in (0..n).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::Conv2d { input, kernel, stride, padding } => {
                    let (input, kernel, stride, padding) = (*input, *kernel, *stride, *padding);
                    let in_shape = self.shape(input).to_vec();
                    let k_shape = self.shape(kernel).to_vec();
                    if self.needs(input) {
                        let kdata = self.value(kernel);
                        let g = buf(&mut grads[input.0], in_shape.iter().product());
                        kernels::conv2d_backward_input(&upstream, &in_shape, kdata, &k_shape, stride, padding, g);
                    }
                    if self.needs(kernel) {
                        let idata = self.value(input);
                        let g = buf(&mut grads[kernel.0], k_shape.iter().product());
                        kernels::conv2d_backward_kernel(&upstream, idata, &in_shape, &k_shape, stride, padding, g);
                    }
                }
                Op::BiasAdd { input, bias } => {
                    let (input, bias) = (*input, *bias);
                    let shape = self.shape(input).to_vec();
                    if self.needs(input) {
                        let g = buf(&mut grads[input.0], upstream.len());
                        for (gi, u) in g.iter_mut().zip(&upstream) {
                            *gi = *gi + *u;
                        }
                    }
                    if self.needs(bias) {
                        let g = buf(&mut grads[bias.0], shape[1]);
                        kernels::bias_add_backward(&upstream, &shape, g);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.needs(input) {
                        let idata = self.value(input);
                        let g = buf(&mut grads[input.0], idata.len());
                        kernels::relu_backward(&upstream, idata, g);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    if self.needs(input) {
                        let len = self.value(input).len();
                        let g = buf(&mut grads[input.0], len);
                        kernels::maxpool2_backward(&upstream, argmax, g);
                    }
                }
                Op::Reshape { input } => {
                    let input = *input;
                    if self.needs(input) {
                        let g = buf(&mut grads[input.0], upstream.len());
                        for (gi, u) in g.iter_mut().zip(&upstream) {
                            *gi = *gi + *u;
                        }
                    }
                }
                Op::MatMul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let (m, k) = (self.shape(lhs)[0], self.shape(lhs)[1]);
                    let n2 = self.shape(rhs)[1];
                    if self.needs(lhs) {
                        let bdata = self.value(rhs);
                        let g = buf(&mut grads[lhs.0], m * k);
                        kernels::matmul_backward_lhs(&upstream, bdata, m, k, n2, g);
                    }
                    if self.needs(rhs) {
                        let adata = self.value(lhs);
                        let g = buf(&mut grads[rhs.0], k * n2);
                        kernels::matmul_backward_rhs(&upstream, adata, m, k, n2, g);
                    }
                }
                Op::AffineCombine { a, b, ca, cb } => {
                    let (a, b, ca, cb) = (*a, *b, *ca, *cb);
                    if self.needs(a) {
                        let g = buf(&mut grads[a.0], upstream.len());
                        for (gi, u) in g.iter_mut().zip(&upstream) {
                            *gi = *gi + ca * *u;
                        }
                    }
                    if self.needs(b) {
                        let g = buf(&mut grads[b.0], upstream.len());
                        for (gi, u) in g.iter_mut().zip(&upstream) {
                            *gi = *gi + cb * *u;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let classes = self.shape(logits)[1];
                        let g = buf(&mut grads[logits.0], probs.len());
                        kernels::softmax_cross_entropy_backward(upstream[0], probs, targets, classes, g);
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients harvested from a consumed tape, indexed by [`NodeId`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the backward root with respect to the given node, if that
    /// node required one.
    pub fn get(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::from_vec(self.shapes[id.0].clone(), g.clone())
                .expect("gradient buffers match node shapes")
        })
    }

    /// Like [`Gradients::get`] but errors when the node has no gradient.
    pub fn wrt(&self, id: NodeId) -> Result<Tensor<S>> {
        self.get(id)
            .ok_or_else(|| Error::InvalidConfig("node did not require gradients".into()))
    }

    /// Writes the gradient into the tensor's `grad` buffer.
    pub fn attach(&self, id: NodeId, tensor: &mut Tensor<S>) -> Result<()> {
        let g = self
            .grads[id.0]
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("node did not require gradients".into()))?;
        tensor.set_grad(g.clone())
    }
}
