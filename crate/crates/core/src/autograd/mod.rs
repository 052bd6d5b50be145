//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every node that requires one. Parameters live
//! outside the tape in a [`ParamStore`]; binding a store as trainable is the
//! only way its entries can receive gradients, which is how frozen networks
//! are kept out of the optimizer.

mod conv;
mod optim;
mod params;

pub use optim::{Adam, AdamState};
pub use params::{ParamStore, StoreId};

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use num_traits::{Float, FromPrimitive};
use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

/// Floating point element type accepted by the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + 'static
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Half-pixel bilinear resize of the last two axes, outside any tape.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    conv::bilinear_forward(x, out_h, out_w)
}

/// Converts an `f64` literal into the tape's element type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: StoreId,
    pub index: usize,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    Identity(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(Var, Unary),
    Powf(Var, T),
    LeakyRelu(Var, T),
    SumAll(Var),
    SumAxes(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool(Var, usize),
    UpNearest(Var, usize),
    Bilinear(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamKey, Var>>,
    trainable: RefCell<BTreeSet<StoreId>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            trainable: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on tensor of shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Stores whose parameters were bound as trainable on this tape.
    pub fn trainable_stores(&self) -> BTreeSet<StoreId> {
        self.trainable.borrow().clone()
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that gradients are requested for.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Binds one parameter of `store`. Repeated binds return the same node.
    pub fn param(&self, store: &ParamStore<T>, index: usize, trainable: bool) -> Var {
        let key = ParamKey {
            store: store.id(),
            index,
        };
        if let Some(v) = self.params.borrow().get(&key) {
            return *v;
        }
        let op = if trainable { Op::Param } else { Op::Leaf };
        if trainable {
            self.trainable.borrow_mut().insert(store.id());
        }
        let v = self.push(store.get(index).clone(), op, trainable);
        self.params.borrow_mut().insert(key, v);
        v
    }

    /// Passes `v` through unchanged but marks the result as requiring a
    /// gradient, so intermediate activations can be differentiated against.
    pub fn watch(&self, v: Var) -> Var {
        let val = self.value(v);
        self.push((*val).clone(), Op::Identity(v), true)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        f(&va, &vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), self.rg(a) || self.rg(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.rg(a) || self.rg(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.rg(a) || self.rg(b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), self.rg(a) || self.rg(b))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let v = self.value(a).mapv(|x| x + s);
        self.push(v, Op::AddScalar(a), self.rg(a))
    }

    pub fn mul_scalar(&self, a: Var, s: T) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        self.push(v, Op::MulScalar(a, s), self.rg(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    /// `s - a`
    pub fn rsub_scalar(&self, s: T, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    fn unary(&self, a: Var, kind: Unary) -> Var {
        let x = self.value(a);
        let v = match kind {
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Tanh => x.mapv(|e| e.tanh()),
            Unary::Exp => x.mapv(|e| e.exp()),
            Unary::Ln => x.mapv(|e| e.ln()),
            Unary::Softplus => x.mapv(softplus),
            Unary::Abs => x.mapv(|e| e.abs()),
            Unary::Square => x.mapv(|e| e * e),
            Unary::Sqrt => x.mapv(|e| e.sqrt()),
        };
        self.push(v, Op::Unary(a, kind), self.rg(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn powf(&self, a: Var, p: T) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), self.rg(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / lit::<T>(n as f64))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let mut v = (*self.value(a)).clone();
        for &ax in axes {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.push(v, Op::SumAxes(a), self.rg(a))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, T::one() / lit::<T>(n as f64))
    }

    /// `[n, k] x [k, m]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2-D");
        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2-D");
        let out = a2.dot(&b2).into_dyn();
        self.push(out, Op::MatMul(a, b), self.rg(a) || self.rg(b))
    }

    /// NCHW convolution with an OIHW kernel and symmetric zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let out = conv::conv2d_forward(&vx, &vw, stride, pad);
        self.push(
            out,
            Op::Conv2d { x, w, stride, pad },
            self.rg(x) || self.rg(w),
        )
    }

    /// Non-overlapping `k x k` average pooling over the last two axes.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let out = conv::avg_pool_forward(&self.value(x), k);
        self.push(out, Op::AvgPool(x, k), self.rg(x))
    }

    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = conv::upsample_nearest_forward(&self.value(x), factor);
        self.push(out, Op::UpNearest(x, factor), self.rg(x))
    }

    /// Half-pixel-centred bilinear resize of the last two axes.
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = conv::bilinear_forward(&self.value(x), out_h, out_w);
        self.push(out, Op::Bilinear(x), self.rg(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(out, Op::Reshape(x), self.rg(x))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let v = self.value(x);
        let out = v
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(out, Op::Permute(x, axes.to_vec()), self.rg(x))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(xs.to_vec(), axis), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(out, Op::Narrow { x, axis, start }, self.rg(x))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from non-scalar");
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), T::one()));

        for i in (0..n).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &nodes[i];
            let mut send = |v: Var, grad: Tensor<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = &mut lo[v.0];
                match slot {
                    Some(acc) => *acc += &grad,
                    None => *slot = Some(grad),
                }
            };
            let val = |v: Var| nodes[v.0].value.clone();
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Identity(a) => send(*a, g.clone()),
                Op::Add(a, b) => {
                    send(*a, reduce_to(g.clone(), nodes[a.0].value.shape()));
                    send(*b, reduce_to(g.clone(), nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(g.clone(), nodes[a.0].value.shape()));
                    send(*b, reduce_to(g.mapv(|e| -e), nodes[b.0].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        send(*a, reduce_to(g * &*vb, va.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, reduce_to(g * &*va, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        send(*a, reduce_to(g / &*vb, va.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        let gb = -(g * &*va) / &vb.mapv(|e| e * e);
                        send(*b, reduce_to(gb, vb.shape()));
                    }
                }
                Op::AddScalar(a) => send(*a, g.clone()),
                Op::MulScalar(a, s) => send(*a, g.mapv(|e| e * *s)),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d: Tensor<T> = match kind {
                        Unary::Sigmoid => y.mapv(|s| s * (T::one() - s)),
                        Unary::Tanh => y.mapv(|t| T::one() - t * t),
                        Unary::Exp => (**y).clone(),
                        Unary::Ln => x.mapv(|e| T::one() / e),
                        Unary::Softplus => x.mapv(sigmoid),
                        Unary::Abs => x.mapv(|e| {
                            if e > T::zero() {
                                T::one()
                            } else if e < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Square => x.mapv(|e| e + e),
                        Unary::Sqrt => y.mapv(|s| lit::<T>(0.5) / s),
                    };
                    send(*a, g * &d);
                }
                Op::Powf(a, p) => {
                    let x = val(*a);
                    let p = *p;
                    let d = x.mapv(|e| p * e.powf(p - T::one()));
                    send(*a, g * &d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a);
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(&*x).for_each(|o, &e| {
                        if e <= T::zero() {
                            *o = *o * *slope;
                        }
                    });
                    send(*a, out);
                }
                Op::SumAll(a) => {
                    let s = *g.iter().next().unwrap();
                    send(*a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), s));
                }
                Op::SumAxes(a) => {
                    let shape = nodes[a.0].value.raw_dim();
                    let b = g.broadcast(shape).expect("sum_axes broadcast").to_owned();
                    send(*a, b);
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    if nodes[a.0].requires_grad {
                        let vb = val(*b);
                        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        send(*a, g2.dot(&b2.t()).into_dyn());
                    }
                    if nodes[b.0].requires_grad {
                        let va = val(*a);
                        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        send(*b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (gx, gw) = conv::conv2d_backward(
                        &vx,
                        &vw,
                        g,
                        *stride,
                        *pad,
                        nodes[x.0].requires_grad,
                        nodes[w.0].requires_grad,
                    );
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    if let Some(gw) = gw {
                        send(*w, gw);
                    }
                }
                Op::AvgPool(a, k) => send(*a, conv::avg_pool_backward(g, *k)),
                Op::UpNearest(a, f) => send(*a, conv::upsample_nearest_backward(g, *f)),
                Op::Bilinear(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    send(*a, conv::bilinear_backward(g, &shape));
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.raw_dim();
                    let out = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .unwrap();
                    send(*a, out);
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let out = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned();
                    send(*a, out);
                }
                Op::Concat(xs, axis) => {
                    let mut start = 0;
                    for &v in xs {
                        let len = nodes[v.0].value.shape()[*axis];
                        if nodes[v.0].requires_grad {
                            let part = g
                                .slice_axis(Axis(*axis), Slice::from(start..start + len))
                                .to_owned();
                            send(v, part);
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let mut full = ArrayD::zeros(nodes[x.0].value.raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(g);
                    send(*x, full);
                }
            }
        }

        let keys: Vec<(ParamKey, Var)> = self
            .params
            .borrow()
            .iter()
            .filter(|(_, v)| nodes[v.0].requires_grad)
            .map(|(k, v)| (*k, *v))
            .collect();
        Grads { grads, params: keys }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamKey, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients for `store`, `None` where a parameter was
    /// unused or unreachable from the loss.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; store.len()];
        for (key, var) in &self.params {
            if key.store == store.id() {
                out[key.index] = self.wrt(*var).cloned();
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > lit(30.0) {
        x
    } else if x < lit(-30.0) {
        x.exp()
    } else {
        x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(mut g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}
