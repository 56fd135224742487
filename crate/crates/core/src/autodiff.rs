//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; inputs of a
//! node always precede it, so walking the list in reverse creation order is
//! a valid topological backward sweep. Parameter leaves reference slots in a
//! [`ParamStore`]; their gradients accumulate across backward calls until
//! explicitly zeroed, which is what a standard SGD loop expects.

use crate::error::{Error, Result};
use crate::nn;
use crate::nn::{BatchNormState, BnCache, Mode};
use crate::smoothing::{depthwise_blur, depthwise_blur_backward, GaussianKernel};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat store of all trainable parameters of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        let grad = value.zeros_like();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalar values.
    pub fn count_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

enum Op {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    WeightedSum(NodeId, Tensor),
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
    },
    Blur {
        x: NodeId,
        kernel: GaussianKernel,
    },
    Flatten(NodeId),
    GlobalAvgPool(NodeId),
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    op: Op,
    out: Tensor,
    grad: Tensor,
}

/// Records one forward pass and computes gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward output of a node.
    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    /// Gradient accumulated at a node (valid after [`Tape::backward`]).
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, out: Tensor) -> NodeId {
        let grad = out.zeros_like();
        self.nodes.push(Node { op, out, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Parameter leaf bound to slot `index` of the model's store. The value
    /// is snapshotted onto the tape; after backward, the computed gradient is
    /// added into the store's accumulator for that slot.
    pub fn param(&mut self, index: usize, store: &ParamStore) -> NodeId {
        let value = store.get(index).value.clone();
        self.push(Op::Leaf { param: Some(index) }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::add(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::sub(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::mul(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = crate::tensor::scale(&self.nodes[x.0].out, c);
        self.push(Op::Scale(x, c), out)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].out.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::from_vec(&[1], vec![total as f32]).expect("scalar");
        self.push(Op::Sum(x), out)
    }

    /// Scalar dot product with fixed coefficients (handy as a test loss).
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Tensor) -> Result<NodeId> {
        if coeffs.shape() != self.nodes[x.0].out.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum coeffs {:?} vs value {:?}",
                coeffs.shape(),
                self.nodes[x.0].out.shape()
            )));
        }
        let total: f64 = self.nodes[x.0]
            .out
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&v, &c)| v as f64 * c as f64)
            .sum();
        let out = Tensor::from_vec(&[1], vec![total as f32]).expect("scalar");
        Ok(self.push(Op::WeightedSum(x, coeffs), out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = nn::relu(&self.nodes[x.0].out);
        self.push(Op::Relu(x), out)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = nn::conv2d_raw(
            &self.nodes[x.0].out,
            &self.nodes[w.0].out,
            &self.nodes[b.0].out,
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            out,
        ))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = nn::linear(
            &self.nodes[x.0].out,
            &self.nodes[w.0].out,
            &self.nodes[b.0].out,
        )?;
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = nn::maxpool2d(&self.nodes[x.0].out, window, stride)?;
        Ok(self.push(Op::MaxPool { x, argmax }, out))
    }

    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<NodeId> {
        let (out, cache) = nn::batchnorm2d(
            &self.nodes[x.0].out,
            &self.nodes[gamma.0].out,
            &self.nodes[beta.0].out,
            state,
            mode,
        )?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            out,
        ))
    }

    /// Fixed depthwise Gaussian blur; contributes no trainable parameters,
    /// gradient flows through to the input.
    pub fn blur(&mut self, x: NodeId, kernel: &GaussianKernel) -> Result<NodeId> {
        let out = depthwise_blur(&self.nodes[x.0].out, kernel)?;
        Ok(self.push(
            Op::Blur {
                x,
                kernel: kernel.clone(),
            },
            out,
        ))
    }

    /// Collapses `[N, C, H, W]` to `[N, C*H*W]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].out.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("flatten needs NCHW, got {shape:?}")));
        }
        let (n, rest) = (shape[0], shape[1] * shape[2] * shape[3]);
        let out = self.nodes[x.0].out.reshape(&[n, rest])?;
        Ok(self.push(Op::Flatten(x), out))
    }

    /// Spatial mean per channel: `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].out.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "global_avg_pool needs NCHW, got {shape:?}"
            )));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut out = Tensor::zeros(&[n, c])?;
        for i in 0..n * c {
            let base = i * plane;
            let mut acc = 0.0f64;
            for &v in &self.nodes[x.0].out.data()[base..base + plane] {
                acc += v as f64;
            }
            out.data_mut()[i] = (acc / plane as f64) as f32;
        }
        Ok(self.push(Op::GlobalAvgPool(x), out))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = nn::softmax_cross_entropy(&self.nodes[logits.0].out, labels)?;
        let out = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Backpropagates from a scalar loss node, adding each parameter leaf's
    /// gradient into the store. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        if self.nodes[loss.0].out.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].out.shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pi) = param {
                        let acc = &mut params.get_mut(*pi).grad;
                        for (a, &g) in acc.data_mut().iter_mut().zip(node.grad.data()) {
                            *a += g;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut before[a.0].grad, node.grad.data());
                    accumulate(&mut before[b.0].grad, node.grad.data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut before[a.0].grad, node.grad.data());
                    for (acc, &g) in before[b.0].grad.data_mut().iter_mut().zip(node.grad.data()) {
                        *acc -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    // d(a*b) = g*b into a, g*a into b.
                    for j in 0..node.grad.numel() {
                        let g = node.grad.data()[j];
                        let av = before[ai].out.data()[j];
                        let bv = before[bi].out.data()[j];
                        before[ai].grad.data_mut()[j] += g * bv;
                        before[bi].grad.data_mut()[j] += g * av;
                    }
                }
                Op::Scale(x, c) => {
                    for (acc, &g) in before[x.0].grad.data_mut().iter_mut().zip(node.grad.data()) {
                        *acc += g * c;
                    }
                }
                Op::Sum(x) => {
                    let g = node.grad.data()[0];
                    for acc in before[x.0].grad.data_mut() {
                        *acc += g;
                    }
                }
                Op::WeightedSum(x, coeffs) => {
                    let g = node.grad.data()[0];
                    for (acc, &c) in before[x.0].grad.data_mut().iter_mut().zip(coeffs.data()) {
                        *acc += g * c;
                    }
                }
                Op::Relu(x) => {
                    let dx = nn::relu_backward(&before[x.0].out, &node.grad);
                    accumulate(&mut before[x.0].grad, dx.data());
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = nn::conv2d_backward(
                        &before[x.0].out,
                        &before[w.0].out,
                        *stride,
                        *padding,
                        &node.grad,
                    )?;
                    accumulate(&mut before[x.0].grad, dx.data());
                    accumulate(&mut before[w.0].grad, dw.data());
                    accumulate(&mut before[b.0].grad, db.data());
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        nn::linear_backward(&before[x.0].out, &before[w.0].out, &node.grad)?;
                    accumulate(&mut before[x.0].grad, dx.data());
                    accumulate(&mut before[w.0].grad, dw.data());
                    accumulate(&mut before[b.0].grad, db.data());
                }
                Op::MaxPool { x, argmax } => {
                    let dx =
                        nn::maxpool2d_backward(before[x.0].out.shape(), argmax, &node.grad)?;
                    accumulate(&mut before[x.0].grad, dx.data());
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) =
                        nn::batchnorm2d_backward(&before[gamma.0].out, cache, &node.grad)?;
                    accumulate(&mut before[x.0].grad, dx.data());
                    accumulate(&mut before[gamma.0].grad, dgamma.data());
                    accumulate(&mut before[beta.0].grad, dbeta.data());
                }
                Op::Blur { x, kernel } => {
                    let dx = depthwise_blur_backward(&node.grad, kernel)?;
                    accumulate(&mut before[x.0].grad, dx.data());
                }
                Op::Flatten(x) => {
                    accumulate(&mut before[x.0].grad, node.grad.data());
                }
                Op::GlobalAvgPool(x) => {
                    let shape = before[x.0].out.shape();
                    let plane = shape[2] * shape[3];
                    let inv = 1.0 / plane as f32;
                    for i in 0..shape[0] * shape[1] {
                        let g = node.grad.data()[i] * inv;
                        for acc in &mut before[x.0].grad.data_mut()[i * plane..(i + 1) * plane] {
                            *acc += g;
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let d =
                        nn::softmax_cross_entropy_backward(probs, labels, node.grad.data()[0]);
                    accumulate(&mut before[logits.0].grad, d.data());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(acc: &mut Tensor, grad: &[f32]) {
    debug_assert_eq!(acc.numel(), grad.len());
    for (a, &g) in acc.data_mut().iter_mut().zip(grad) {
        *a += g;
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest error over all checked values (relative to `max(1, |a|, |n|)`).
    pub max_err: f64,
    /// Name and flat index of the worst element.
    pub worst: (String, usize),
    pub values_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_err < self.tol
    }
}

pub(crate) fn fd_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the gradient of `loss` w.r.t. every element of `values` against
/// central differences with absolute step `eps`. `analytic` holds the
/// precomputed analytic gradient. Errors are measured relative to
/// `max(1, |analytic|, |numeric|)`, i.e. tiny gradients are held to an
/// absolute tolerance.
pub fn fd_check_values<F>(
    values: &mut Tensor,
    analytic: &Tensor,
    mut loss: F,
    eps: f64,
    name: &str,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert_eq!(values.shape(), analytic.shape());
    let mut max_err = 0.0f64;
    let mut worst = (name.to_string(), 0);
    for j in 0..values.numel() {
        let orig = values.data()[j];
        values.data_mut()[j] = (orig as f64 + eps) as f32;
        let lp = loss(values)?;
        values.data_mut()[j] = (orig as f64 - eps) as f32;
        let lm = loss(values)?;
        values.data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let err = fd_error(analytic.data()[j] as f64, numeric);
        if err > max_err {
            max_err = err;
            worst = (name.to_string(), j);
        }
    }
    Ok(GradCheckReport {
        max_err,
        worst,
        values_checked: values.numel(),
        tol: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::build_kernel;
    use crate::tensor::{max_abs_diff, randn, Rng};

    #[test]
    fn relu_backward_masks_gradient() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let xi = store.add(
            "x",
            Tensor::from_vec(&[4], vec![-1.0, 0.0, 2.0, -3.0]).unwrap(),
        );
        let x = tape.param(xi, &store);
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(xi).grad.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn product_rule_composes() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let xi = store.add("x", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let x = tape.param(xi, &store);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        // d(sum x^2)/dx = 2x
        assert_eq!(store.get(xi).grad.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_half_sq_norm_gradient_is_x() {
        let mut store = ParamStore::new();
        let xi = store.add("x", Tensor::from_vec(&[3], vec![0.3, -1.2, 4.0]).unwrap());

        let mut tape = Tape::new();
        let x = tape.param(xi, &store);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(xi).grad.data(), &[1.0, 1.0, 1.0]);

        store.zero_grads();
        let mut tape = Tape::new();
        let x = tape.param(xi, &store);
        let sq = tape.mul(x, x).unwrap();
        let total = tape.sum(sq);
        let loss = tape.scale(total, 0.5);
        tape.backward(loss, &mut store).unwrap();
        let want = store.get(xi).value.clone();
        assert!(max_abs_diff(&store.get(xi).grad, &want) < 1e-6);
    }

    #[test]
    fn three_op_chain_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let x0 = randn(&[2, 3], &mut rng, 0.0, 1.0).unwrap();
        let coeffs = randn(&[2, 3], &mut rng, 0.0, 1.0).unwrap();

        let mut store = ParamStore::new();
        let xi = store.add("x", x0);

        // relu(x) * x, then a weighted scalar readout.
        let run = |store: &ParamStore, tape: &mut Tape| -> Result<NodeId> {
            let x = tape.param(xi, store);
            let r = tape.relu(x);
            let m = tape.mul(r, x)?;
            tape.weighted_sum(m, coeffs.clone())
        };

        let mut tape = Tape::new();
        let loss = run(&store, &mut tape).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let analytic = store.get(xi).grad.clone();

        let mut values = store.get(xi).value.clone();
        let report = fd_check_values(
            &mut values,
            &analytic,
            |v| {
                let mut s = ParamStore::new();
                s.add("x", v.clone());
                let mut t = Tape::new();
                let x = t.param(0, &s);
                let r = t.relu(x);
                let m = t.mul(r, x)?;
                let l = t.weighted_sum(m, coeffs.clone())?;
                Ok(t.output(l).scalar()? as f64)
            },
            1e-3,
            "x",
        )
        .unwrap();
        assert!(report.max_err < 1e-3, "max err {}", report.max_err);
    }

    #[test]
    fn gradients_accumulate_across_tapes() {
        let mut rng = Rng::new(22);
        let mut store = ParamStore::new();
        let xi = store.add("x", randn(&[5], &mut rng, 0.0, 1.0).unwrap());

        let run_once = |store: &mut ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(xi, store);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss, store).unwrap();
        };

        store.zero_grads();
        run_once(&mut store);
        let once = store.get(xi).grad.clone();
        run_once(&mut store);
        let twice = store.get(xi).grad.clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let xi = store.add("x", Tensor::zeros(&[2, 2]).unwrap());
        let x = tape.param(xi, &store);
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_runs_once_per_tape() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let xi = store.add("x", Tensor::zeros(&[2]).unwrap());
        let x = tape.param(xi, &store);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn blur_node_has_no_params_and_passes_gradient_through_kernel() {
        let mut rng = Rng::new(23);
        let kernel = build_kernel(1.0).unwrap();
        let mut store = ParamStore::new();
        let xi = store.add("x", randn(&[1, 2, 6, 6], &mut rng, 0.0, 1.0).unwrap());
        let coeffs = randn(&[1, 2, 6, 6], &mut rng, 0.0, 1.0).unwrap();

        let mut tape = Tape::new();
        let x = tape.param(xi, &store);
        let blurred = tape.blur(x, &kernel).unwrap();
        let loss = tape.weighted_sum(blurred, coeffs.clone()).unwrap();
        tape.backward(loss, &mut store).unwrap();

        // Backward through the fixed symmetric kernel equals blurring the
        // upstream gradient.
        let want = depthwise_blur(&coeffs, &kernel).unwrap();
        assert!(max_abs_diff(&store.get(xi).grad, &want) < 1e-6);
    }
}
