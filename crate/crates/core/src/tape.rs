//! Reverse-mode automatic differentiation over a linear op record.

use crate::error::{Error, Result};
use crate::kernels::{self, ChannelStats, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, bias: Var, geo: ConvGeometry },
    Deconv2d { input: Var, kernel: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    FullyConnected { input: Var, weights: Var, bias: Var },
    GlobalMeanPool(Var),
    Add(Var, Var),
    ChannelScale { features: Var, weights: Var },
    Stack(Vec<Var>),
    Mse { pred: Var, target: Var },
    Project { input: Var, direction: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Every recorded op keeps its output
/// value; backward replays the chain rule in exact reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias), geo)?;
        Ok(self.record(y, Op::Conv2d { input, kernel, bias, geo }, &[input, kernel, bias]))
    }

    pub fn deconv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = kernels::deconv2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.record(y, Op::Deconv2d { input, kernel, bias }, &[input, kernel, bias]))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d(self.value(input), window, stride)?;
        Ok(self.record(y, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Training-mode batch norm; returns the batch statistics for the caller
    /// to fold into running buffers.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, ChannelStats)> {
        let bn = kernels::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat: bn.xhat, inv_std: bn.inv_std, train: true };
        Ok((self.record(bn.output, op, &[input, gamma, beta]), bn.stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (y, xhat, inv_std) = kernels::batchnorm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: false };
        Ok(self.record(y, op, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = kernels::relu(self.value(input));
        self.record(y, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = kernels::sigmoid(self.value(input));
        self.record(y, Op::Sigmoid(input), &[input])
    }

    pub fn fully_connected(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let y = kernels::fully_connected(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.record(y, Op::FullyConnected { input, weights, bias }, &[input, weights, bias]))
    }

    pub fn global_mean_pool(&mut self, input: Var) -> Result<Var> {
        let y = kernels::global_mean_pool(self.value(input))?;
        Ok(self.record(y, Op::GlobalMeanPool(input), &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.record(y, Op::Add(a, b), &[a, b]))
    }

    pub fn channel_scale(&mut self, features: Var, weights: Var) -> Result<Var> {
        let y = kernels::channel_scale(self.value(features), self.value(weights))?;
        Ok(self.record(y, Op::ChannelScale { features, weights }, &[features, weights]))
    }

    pub fn stack_channels(&mut self, frames: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = frames.iter().map(|&v| self.value(v)).collect();
        let y = kernels::stack_channels(&values)?;
        Ok(self.record(y, Op::Stack(frames.to_vec()), frames))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let y = kernels::mse_loss(self.value(pred), self.value(target))?;
        Ok(self.record(y, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Scalar `⟨input, direction⟩` for a fixed direction.
    pub fn project(&mut self, input: Var, direction: Tensor<T>) -> Result<Var> {
        if direction.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "project",
                format!("{:?} vs {:?}", self.value(input).shape(), direction.shape()),
            ));
        }
        let y = Tensor::scalar(T::of(self.value(input).dot_f64(&direction)));
        Ok(self.record(y, Op::Project { input, direction }, &[input]))
    }

    /// Propagates `d loss / d ·` back through every recorded op. Gradients of
    /// parameter leaves are added into `store`.
    pub fn backward(&self, loss: Var, store: Option<&mut ParamStore<T>>) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single value, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut store = store;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    if let Some(s) = store.as_deref_mut() {
                        s.accumulate_grad(*id, &g);
                    }
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias, geo } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        *geo,
                        &g,
                        needs(input),
                    )?;
                    if let Some(gi) = cg.input {
                        acc(*input, gi);
                    }
                    if needs(kernel) {
                        acc(*kernel, cg.kernel);
                    }
                    if needs(bias) {
                        acc(*bias, cg.bias);
                    }
                }
                Op::Deconv2d { input, kernel, bias } => {
                    let cg = kernels::deconv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        &g,
                        needs(input),
                    )?;
                    if let Some(gi) = cg.input {
                        acc(*input, gi);
                    }
                    if needs(kernel) {
                        acc(*kernel, cg.kernel);
                    }
                    if needs(bias) {
                        acc(*bias, cg.bias);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    acc(*input, kernels::maxpool2d_backward(self.value(*input).shape(), argmax, &g));
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let bg = if *train {
                        kernels::batchnorm_train_backward(xhat, inv_std, self.value(*gamma), &g)?
                    } else {
                        kernels::batchnorm_eval_backward(xhat, inv_std, self.value(*gamma), &g)?
                    };
                    if needs(input) {
                        acc(*input, bg.input);
                    }
                    if needs(gamma) {
                        acc(*gamma, bg.gamma);
                    }
                    if needs(beta) {
                        acc(*beta, bg.beta);
                    }
                }
                Op::Relu(input) => acc(*input, kernels::relu_backward(self.value(*input), &g)),
                Op::Sigmoid(input) => acc(*input, kernels::sigmoid_backward(&node.value, &g)),
                Op::FullyConnected { input, weights, bias } => {
                    let fg = kernels::fully_connected_backward(
                        self.value(*input),
                        self.value(*weights),
                        self.value(*bias),
                        &g,
                    )?;
                    if needs(input) {
                        acc(*input, fg.input);
                    }
                    if needs(weights) {
                        acc(*weights, fg.weights);
                    }
                    if needs(bias) {
                        acc(*bias, fg.bias);
                    }
                }
                Op::GlobalMeanPool(input) => {
                    acc(*input, kernels::global_mean_pool_backward(self.value(*input).shape(), &g));
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        acc(*a, g.clone());
                    }
                    if needs(b) {
                        acc(*b, g);
                    }
                }
                Op::ChannelScale { features, weights } => {
                    let (gf, gw) = kernels::channel_scale_backward(self.value(*features), self.value(*weights), &g);
                    if needs(features) {
                        acc(*features, gf);
                    }
                    if needs(weights) {
                        acc(*weights, gw);
                    }
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let n = self.value(*p).len();
                        if needs(p) {
                            let t = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                            acc(*p, t);
                        }
                        offset += n;
                    }
                }
                Op::Mse { pred, target } => {
                    let gp = kernels::mse_loss_backward(self.value(*pred), self.value(*target), g.data()[0]);
                    if needs(target) {
                        acc(*target, gp.map(|v| -v));
                    }
                    if needs(pred) {
                        acc(*pred, gp);
                    }
                }
                Op::Project { input, direction } => {
                    let s = g.data()[0];
                    acc(*input, direction.map(|v| v * s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf values after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (`input` or `param`); `None` if nothing flowed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
