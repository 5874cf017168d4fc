use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, BnSaved, ConvGeometry};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Subgradient 0 at exactly 0.
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch moments.
    Train,
    /// Normalize with running moments.
    Eval,
}

/// Arithmetic cost of one recorded operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCost {
    pub scope: String,
    pub op: &'static str,
    pub macs: u64,
    pub elementwise: u64,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    Depthwise { x: Var, w: Var, geo: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, train: bool, saved: Option<BnSaved<T>> },
    Act { x: Var, kind: Activation },
    MaxPool { x: Var, argmax: Vec<usize> },
    Gap { x: Var },
    Concat { a: Var, b: Var },
    Upsample { x: Var },
    Crop { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Lerp { w: Var, a: Var, b: Var },
    MulChannel { x: Var, s: Var },
    Affine { x: Var, scale: T },
    Sum { x: Var },
    Mean { x: Var },
    Ohkm { pred: Var, target: Var, weights: Tensor<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    bn_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Ordered record of executed operations.
///
/// Every op appends one node whose inputs are earlier nodes, so the node
/// order is a topological order and [`Graph::backward`] visits each op once in
/// reverse. Values may borrow from the caller (`'a`), which lets model
/// parameters enter the graph without copies.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    record: bool,
    scope: Vec<String>,
    costs: Vec<OpCost>,
    pieces: Option<DefaultHasher>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph that keeps what `backward` needs.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true, scope: Vec::new(), costs: Vec::new(), pieces: None }
    }

    /// A graph for forward evaluation only; nothing requires grad.
    pub fn inference() -> Self {
        Graph { record: false, ..Self::new() }
    }

    /// An inference graph that also fingerprints which smooth piece of the
    /// computed function the input falls on: the sign of every relu/abs
    /// input, every max-pool argmax and every hard-example selection.
    /// Two inputs with equal [`Graph::piece`] lie on the same piece.
    pub fn tracking_pieces() -> Self {
        Graph { pieces: Some(DefaultHasher::new()), ..Self::inference() }
    }

    pub fn piece(&self) -> Option<u64> {
        self.pieces.as_ref().map(|h| h.finish())
    }

    fn note_piece<H: Hash>(&mut self, v: H) {
        if let Some(h) = &mut self.pieces {
            v.hash(h);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.record, bn_stats: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance computed by a train-mode batchnorm node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        self.nodes[v.0].bn_stats.as_ref().map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Per-op costs in execution order, tagged with the scope path active
    /// when each op ran.
    pub fn costs(&self) -> &[OpCost] {
        &self.costs
    }

    fn cost(&mut self, op: &'static str, macs: u64, elementwise: u64) {
        self.costs.push(OpCost { scope: self.scope.join("/"), op, macs, elementwise });
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad, bn_stats: None });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(stride, padding);
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let ws = self.shape(w);
        let macs = (y.len() * ws[1] * ws[2] * ws[3]) as u64;
        let bias_ops = if b.is_some() { y.len() as u64 } else { 0 };
        self.cost("conv2d", macs, bias_ops);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(stride, padding);
        let y = kernels::depthwise_conv2d(self.value(x), self.value(w), geo)?;
        let ws = self.shape(w);
        self.cost("depthwise_conv2d", (y.len() * ws[2] * ws[3]) as u64, 0);
        Ok(self.push(y, Op::Depthwise { x, w, geo }, &[x, w]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        let train = mode == BnMode::Train;
        let (y, saved) = if train {
            kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?
        } else {
            kernels::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var, eps)?
        };
        self.cost("batchnorm", 0, y.len() as u64);
        let stats = train.then(|| (saved.batch_mean.clone(), saved.batch_var.clone()));
        let keep = self.record.then_some(saved);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, train, saved: keep }, &[x, gamma, beta]);
        self.nodes[v.0].bn_stats = stats;
        Ok(v)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if self.pieces.is_some() && kind != Activation::Sigmoid {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
            self.note_piece(signs);
        }
        let y = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(|v| T::one() / (T::one() + (-v).exp())),
            Activation::Abs => self.value(x).map(|v| v.abs()),
        };
        self.cost("activation", 0, y.len() as u64);
        self.push(y, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Abs)
    }

    /// 3×3, stride 2, padding 1 max pooling.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::max_pool3x3s2(self.value(x))?;
        self.note_piece(&argmax);
        self.cost("max_pool", 0, self.value(x).len() as u64);
        let argmax = if self.record { argmax } else { Vec::new() };
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        self.cost("global_avg_pool", 0, self.value(x).len() as u64);
        Ok(self.push(y, Op::Gap { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }, &[a, b]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample { x }, &[x]))
    }

    /// Top-left `h × w` window of each plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = kernels::crop(self.value(x), h, w)?;
        Ok(self.push(y, Op::Crop { x }, &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let ws = self.shape(w);
        self.cost("fully_connected", (y.len() * ws[1]) as u64, y.len() as u64);
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.cost("add", 0, y.len() as u64);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// `w·a + (1 − w)·b` elementwise, for weights in `[0, 1]`.
    ///
    /// The result is clamped into the interval spanned by `a` and `b`, which
    /// only ever moves it by rounding error, so a convex combination stays
    /// convex in floating point. The backward pass uses the exact formula.
    pub fn lerp(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("lerp", w, a)?;
        self.same_shape("lerp", a, b)?;
        let (wv, av, bv) = (self.value(w).data(), self.value(a).data(), self.value(b).data());
        let data = wv
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&t, (&p, &q))| {
                let v = q + t * (p - q);
                v.max(p.min(q)).min(p.max(q))
            })
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        self.cost("lerp", 0, 3 * y.len() as u64);
        Ok(self.push(y, Op::Lerp { w, a, b }, &[w, a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.cost("sub", 0, y.len() as u64);
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.cost("mul", 0, y.len() as u64);
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// `x · s` with `s` of shape `[N,C,1,1]` broadcast over H, W.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = kernels::mul_channel(self.value(x), self.value(s))?;
        self.cost("mul_channel", 0, y.len() as u64);
        Ok(self.push(y, Op::MulChannel { x, s }, &[x, s]))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.cost("affine", 0, y.len() as u64);
        self.push(y, Op::Affine { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::Mean { x }, &[x])
    }

    /// Online hard keypoint mining over per-keypoint heatmap MSE.
    ///
    /// For each sample the visible keypoints' mean squared errors are ranked
    /// and the `k` largest averaged; samples without visible keypoints are
    /// skipped and the rest averaged.
    pub fn ohkm_mse(&mut self, pred: Var, target: Var, visible: &[bool], k: usize) -> Result<Var> {
        self.same_shape("ohkm_loss", pred, target)?;
        let (n, kp, h, w) = self.value(pred).dims4()?;
        if visible.len() != n * kp {
            return Err(Error::shape("ohkm_loss", format!("{} visibility flags for {n}x{kp} keypoints", visible.len())));
        }
        let (loss, weights) = ohkm_select(self.value(pred), self.value(target), visible, k, h * w)?;
        let selected: Vec<bool> = weights.iter().map(|&w| w > T::zero()).collect();
        self.note_piece(selected);
        let weights = Tensor::new(&[n, kp], weights)?;
        Ok(self.push(Tensor::scalar(loss), Op::Ohkm { pred, target, weights }, &[pred, target]))
    }

    /// Reverse pass from a single-element root.
    ///
    /// Gradients accumulate across fan-out. Leaves that do not reach the root
    /// get no entry (see [`Gradients::wrt`]).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geo,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, geo } => {
                let (dx, dw) = kernels::depthwise_conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geo,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, train, saved } => {
                let saved = saved.as_ref().expect("recording graph keeps batchnorm state");
                let (dx, dg, db) = kernels::batchnorm_backward(g, self.value(*gamma), saved, *train)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let dx = match kind {
                    Activation::Relu => xv.zip_map(g, |v, gg| if v > T::zero() { gg } else { T::zero() })?,
                    Activation::Sigmoid => node.value.zip_map(g, |y, gg| gg * y * (T::one() - y))?,
                    Activation::Abs => xv.zip_map(g, |v, gg| {
                        if v > T::zero() {
                            gg
                        } else if v < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })?,
                };
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let dx = kernels::max_pool_backward(self.shape(*x), argmax, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Gap { x } => {
                let dx = kernels::global_avg_pool_backward(self.shape(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a)[1];
                let c = g.shape()[1];
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.slice_channels(0, ca)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.slice_channels(ca, c)?);
                }
            }
            Op::Upsample { x } => {
                let dx = kernels::upsample2x_backward(self.shape(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Crop { x } => {
                let dx = kernels::crop_backward(self.shape(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Lerp { w, a, b } => {
                let (wv, av, bv) = (self.value(*w), self.value(*a), self.value(*b));
                if self.needs(*w) {
                    let d = av.zip_map(bv, |p, q| p - q)?;
                    self.accumulate(grads, *w, g.zip_map(&d, |gg, dd| gg * dd)?);
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(wv, |gg, t| gg * t)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(wv, |gg, t| gg * (T::one() - t))?);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gg, bv| gg * bv)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gg, av| gg * av)?);
                }
            }
            Op::MulChannel { x, s } => {
                let (dx, ds) = kernels::mul_channel_backward(self.value(*x), self.value(*s), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *s, ds);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean { x } => {
                let n = T::from_count(self.value(*x).len().max(1));
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::Ohkm { pred, target, weights } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let (_, _, h, w) = p.dims4()?;
                let plane = h * w;
                let gv = g.item();
                let mut dp = vec![T::zero(); p.len()];
                for (slot, &wt) in weights.data().iter().enumerate() {
                    if wt == T::zero() {
                        continue;
                    }
                    let k = gv * wt * T::from_f64_lossy(2.0);
                    for i in slot * plane..(slot + 1) * plane {
                        dp[i] = k * (p.data()[i] - t.data()[i]);
                    }
                }
                let dp = Tensor::new(p.shape(), dp)?;
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.map(|v| -v));
                }
                self.accumulate(grads, *pred, dp);
            }
        }
        Ok(())
    }
}

/// Loss value and the per-(sample, keypoint) weight `∂loss/∂mse_i` used by
/// backward: `1 / (k_eff · n_used · plane)` for selected keypoints, else 0.
fn ohkm_select<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    visible: &[bool],
    k: usize,
    plane: usize,
) -> Result<(T, Vec<T>)> {
    if k < 1 {
        return Err(Error::invalid("ohkm_loss", "k must be at least 1"));
    }
    let kp = pred.shape()[1];
    let n = pred.shape()[0];
    let mut weights = vec![T::zero(); n * kp];
    let mut per_sample = Vec::new();
    let mut selections: Vec<(usize, Vec<usize>)> = Vec::new();
    for s in 0..n {
        let mut losses: Vec<(usize, f64)> = (0..kp)
            .filter(|&j| visible[s * kp + j])
            .map(|j| {
                let off = (s * kp + j) * plane;
                let se: f64 = pred.data()[off..off + plane]
                    .iter()
                    .zip(&target.data()[off..off + plane])
                    .map(|(&a, &b)| {
                        let d = (a - b).to_f64_lossy();
                        d * d
                    })
                    .sum();
                (j, se / plane as f64)
            })
            .collect();
        if losses.is_empty() {
            continue;
        }
        // descending loss; ties keep the lower keypoint index first
        losses.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let take = k.min(losses.len());
        per_sample.push(losses[..take].iter().map(|l| l.1).sum::<f64>() / take as f64);
        selections.push((s, losses[..take].iter().map(|l| l.0).collect()));
    }
    if per_sample.is_empty() {
        return Ok((T::zero(), weights));
    }
    let used = per_sample.len();
    for (s, sel) in &selections {
        let wt = T::from_f64_lossy(1.0 / (sel.len() * used * plane) as f64);
        for &j in sel {
            weights[s * kp + j] = wt;
        }
    }
    Ok((T::from_f64_lossy(per_sample.iter().sum::<f64>() / used as f64), weights))
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `v` if no path reaches the root.
    pub fn wrt(&self, graph: &Graph<'_, T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
