//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so the tape is a
//! topological order by construction. [`Graph::backward`] walks it in reverse.
//! Gradients of leaves accumulate across `backward` calls; intermediate
//! gradients are recomputed on every call.

mod adam;
pub mod kernels;
mod loss;
mod real;

pub use adam::{AdamConfig, AdamState};
pub use loss::LossConfig;
pub use real::Real;

use kernels::Shape4;

use crate::error::{Error, Result};
use crate::volume::center_origin;

/// Dense row-major tensor. Activations are `(C, D, H, W)`, conv weights
/// `(O, C, k, k, k)`, transposed-conv weights `(C, O, 2, 2, 2)`, biases `(O)`,
/// scalars `()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("tensor shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    fn shape4(&self, what: &str) -> Result<Shape4> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::shape(format!("{what}: expected (C,D,H,W) tensor, got shape {:?}", self.shape))),
        }
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from(x).expect("finite cast")).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv3d { input: Var, weight: Var, bias: Var, k: usize },
    ConvTransposeX2 { input: Var, weight: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<u32> },
    ConcatCrop { a: Var, b: Var, a_origin: [usize; 3], b_origin: [usize; 3] },
    Relu(Var),
    Sigmoid(Var),
    /// Per-voxel derivative of the loss w.r.t. the prediction, fixed at forward time.
    Bce { pred: Var, dpred: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every stored gradient, including accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv3d_valid(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape4("conv3d input")?;
        let ws = self.value(weight).shape().to_vec();
        let [o, c, k, k2, k3] = ws[..] else {
            return Err(Error::shape(format!("conv3d weight must be (O,C,k,k,k), got {ws:?}")));
        };
        if k != k2 || k != k3 || k == 0 {
            return Err(Error::shape(format!("conv3d kernel must be cubic, got {ws:?}")));
        }
        if c != xs[0] {
            return Err(Error::shape(format!("channel mismatch: input has {} channels, weight expects {c}", xs[0])));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(format!("conv3d bias must be ({o}), got {:?}", self.value(bias).shape())));
        }
        if xs[1..].iter().any(|&s| s < k) {
            return Err(Error::shape(format!("spatial dims {:?} smaller than kernel {k}", &xs[1..])));
        }
        let y = kernels::conv3d_forward(self.value(input).data(), xs, self.value(weight).data(), o, k, self.value(bias).data());
        let ys = kernels::conv_out_shape(xs, o, k);
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(Tensor { shape: ys.to_vec(), data: y }, Op::Conv3d { input, weight, bias, k }, needs))
    }

    pub fn conv_transpose3d_x2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape4("conv_transpose input")?;
        let ws = self.value(weight).shape().to_vec();
        let [c, o, 2, 2, 2] = ws[..] else {
            return Err(Error::shape(format!("transposed conv weight must be (C,O,2,2,2), got {ws:?}")));
        };
        if c != xs[0] {
            return Err(Error::shape(format!("channel mismatch: input has {} channels, weight expects {c}", xs[0])));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(format!("transposed conv bias must be ({o}), got {:?}", self.value(bias).shape())));
        }
        let y = kernels::conv_transpose_x2_forward(self.value(input).data(), xs, self.value(weight).data(), o, self.value(bias).data());
        let shape = vec![o, 2 * xs[1], 2 * xs[2], 2 * xs[3]];
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(Tensor { shape, data: y }, Op::ConvTransposeX2 { input, weight, bias }, needs))
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape4("maxpool input")?;
        if xs[1..].iter().any(|&s| s % 2 != 0) {
            return Err(Error::shape(format!("maxpool needs even spatial dims, got odd dim in {:?}", &xs[1..])));
        }
        let (y, argmax) = kernels::maxpool_forward(self.value(input).data(), xs);
        let shape = vec![xs[0], xs[1] / 2, xs[2] / 2, xs[3] / 2];
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor { shape, data: y }, Op::MaxPool { input, argmax }, needs))
    }

    /// Center-crops both inputs to their common spatial extent and stacks
    /// channels, `a` first.
    pub fn concat_center_crop(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape4("concat input a")?;
        let sb = self.value(b).shape4("concat input b")?;
        let extent = [sa[1].min(sb[1]), sa[2].min(sb[2]), sa[3].min(sb[3])];
        let a_origin = center_origin([sa[1], sa[2], sa[3]], extent)?;
        let b_origin = center_origin([sb[1], sb[2], sb[3]], extent)?;
        let ys = [sa[0] + sb[0], extent[0], extent[1], extent[2]];
        let mut y = vec![T::zero(); kernels::numel(ys)];
        kernels::copy_box(self.value(a).data(), sa, a_origin, &mut y, ys, 0);
        kernels::copy_box(self.value(b).data(), sb, b_origin, &mut y, ys, sa[0]);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: ys.to_vec(), data: y }, Op::ConcatCrop { a, b, a_origin, b_origin }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| if t > T::zero() { t } else { T::zero() }).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Relu(x), needs)
    }

    /// Logistic function, kept strictly inside (0, 1) at the working precision.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| sigmoid(t)).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), needs)
    }

    /// Weighted, don't-care-masked binary cross-entropy; see [`LossConfig`].
    /// `target` and `dontcare` are flat binary masks with the prediction's layout.
    pub fn weighted_masked_bce(&mut self, pred: Var, target: &[u8], dontcare: Option<&[u8]>, cfg: &LossConfig) -> Result<Var> {
        cfg.validate()?;
        let p = self.value(pred).data();
        let (loss, dpred) = loss::bce_forward(p, target, dontcare, cfg)?;
        let needs = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, dpred }, needs))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf created with [`Graph::param`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!("backward needs a scalar root, got shape {:?}", self.value(loss).shape())));
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Parents always precede i on the tape, so split the node list there.
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3d { input, weight, bias, k } => {
                let xs = before[input.0].value.shape4("conv3d input").expect("checked at forward");
                let o = before[bias.0].value.numel();
                let (mut dx, mut dw, mut db) = (take_slot(before, input), take_slot(before, weight), take_slot(before, bias));
                kernels::conv3d_backward(
                    &before[input.0].value.data,
                    xs,
                    &before[weight.0].value.data,
                    o,
                    k,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_slot(before, input, dx);
                put_slot(before, weight, dw);
                put_slot(before, bias, db);
            }
            &Op::ConvTransposeX2 { input, weight, bias } => {
                let xs = before[input.0].value.shape4("conv_transpose input").expect("checked at forward");
                let o = before[bias.0].value.numel();
                let (mut dx, mut dw, mut db) = (take_slot(before, input), take_slot(before, weight), take_slot(before, bias));
                kernels::conv_transpose_x2_backward(
                    &before[input.0].value.data,
                    xs,
                    &before[weight.0].value.data,
                    o,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_slot(before, input, dx);
                put_slot(before, weight, dw);
                put_slot(before, bias, db);
            }
            Op::MaxPool { input, argmax } => {
                if let Some(dx) = grad_slot(before, *input) {
                    for (&j, &gy) in argmax.iter().zip(g) {
                        dx[j as usize] += gy;
                    }
                }
            }
            &Op::ConcatCrop { a, b, a_origin, b_origin } => {
                let ys = node.value.shape4("concat").expect("4d");
                let sa = before[a.0].value.shape4("concat a").expect("4d");
                let sb = before[b.0].value.shape4("concat b").expect("4d");
                if let Some(da) = grad_slot(before, a) {
                    kernels::add_box(da, sa, a_origin, g, ys, 0);
                }
                if let Some(db) = grad_slot(before, b) {
                    kernels::add_box(db, sb, b_origin, g, ys, sa[0]);
                }
            }
            &Op::Relu(x) => {
                // Output is positive exactly where the input is.
                let y = &node.value.data;
                if let Some(dx) = grad_slot(before, x) {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        if yi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = &node.value.data;
                if let Some(dx) = grad_slot(before, x) {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Bce { pred, dpred } => {
                let up = g[0];
                if let Some(dp) = grad_slot(before, *pred) {
                    for (d, &c) in dp.iter_mut().zip(dpred) {
                        *d += up * c;
                    }
                }
            }
        }
    }
}

fn grad_slot<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.numel();
    Some(n.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

/// Moves a node's gradient buffer out (allocating zeros if absent) so it can
/// be written while other nodes' values are borrowed.
fn take_slot<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    grad_slot(nodes, v).map(std::mem::take)
}

fn put_slot<T: Real>(nodes: &mut [Node<T>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        nodes[v.0].grad = Some(g);
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, g: &[T]) {
    match &mut node.grad {
        Some(buf) => {
            for (a, &b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

#[cfg(test)]
mod tests;
