//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] owns its forward value and (when gradients are required) its
//! parents, so the recorded graph lives exactly as long as the loss that
//! depends on it. Under [`no_grad`] nothing is recorded and intermediate
//! activations are freed as soon as they go out of scope.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::conv;
use crate::special::{std_normal_cdf, std_normal_pdf};
use crate::tensor::{matmul_into, Float, Layout, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<u32> = const { Cell::new(0) };
    static SIGN_LOG: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Guard returned by [`no_grad`]; recording resumes when it is dropped.
pub struct NoGradGuard(());

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(c.get() - 1));
    }
}

/// Disable graph recording on this thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    NO_GRAD.with(|c| c.set(c.get() + 1));
    NoGradGuard(())
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| c.get() == 0)
}

/// Run `f` while logging the sign of every leaky-ReLU input it evaluates.
///
/// Finite-difference checks use the log to tell whether a perturbation moved
/// any activation across its kink.
pub fn record_activation_signs<R>(f: impl FnOnce() -> R) -> (R, Vec<bool>) {
    let prev = SIGN_LOG.with(|s| s.borrow_mut().replace(Vec::new()));
    let out = f();
    let log = SIGN_LOG.with(|s| std::mem::replace(&mut *s.borrow_mut(), prev));
    (out, log.unwrap_or_default())
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f64),
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Sqrt,
    Rsqrt,
    Square,
    Concat(Vec<usize>),
    Narrow { start: usize },
    Reshape,
    Sum,
    Mean,
    ChannelRows,
    ChannelMatmul,
    AddLast,
    MulLast,
    GaussianBits { bound: f64 },
    LogisticBits { bound: f64 },
}

struct Node<T: Float> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    op: Op,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Float> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            op: Op::Leaf,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that receives gradients (parameters, or inputs under test).
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    fn derived(value: Tensor<T>, parents: Vec<Var<T>>, op: Op) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Self::leaf(value, false);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            op,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn conv2d(&self, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Self {
        let out = conv::conv2d_forward(self.value(), w.value(), b.map(|b| b.value()), stride, pad);
        let mut parents = vec![self.clone(), w.clone()];
        parents.extend(b.cloned());
        Self::derived(out, parents, Op::Conv2d { stride, pad })
    }

    pub fn conv_transpose2d(
        &self,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let out = conv::conv_transpose2d_forward(
            self.value(),
            w.value(),
            b.map(|b| b.value()),
            stride,
            pad,
            out_pad,
        );
        let mut parents = vec![self.clone(), w.clone()];
        parents.extend(b.cloned());
        Self::derived(out, parents, Op::ConvTranspose2d { stride, pad })
    }

    pub fn add(&self, other: &Var<T>) -> Self {
        let out = self.value().zip_map(other.value(), |a, b| a + b);
        Self::derived(out, vec![self.clone(), other.clone()], Op::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Self {
        let out = self.value().zip_map(other.value(), |a, b| a - b);
        Self::derived(out, vec![self.clone(), other.clone()], Op::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Self {
        let out = self.value().zip_map(other.value(), |a, b| a * b);
        Self::derived(out, vec![self.clone(), other.clone()], Op::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = T::of(c);
        Self::derived(self.value().map(|v| v + c), vec![self.clone()], Op::AddScalar)
    }

    pub fn mul_scalar(&self, c: f64) -> Self {
        let cc = T::of(c);
        Self::derived(self.value().map(|v| v * cc), vec![self.clone()], Op::MulScalar(c))
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let s = T::of(slope);
        SIGN_LOG.with(|log| {
            if let Some(log) = log.borrow_mut().as_mut() {
                log.extend(self.value().data().iter().map(|&v| v >= T::zero()));
            }
        });
        let out = self.value().map(|v| if v >= T::zero() { v } else { v * s });
        Self::derived(out, vec![self.clone()], Op::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Self {
        Self::derived(self.value().map(sigmoid), vec![self.clone()], Op::Sigmoid)
    }

    pub fn tanh(&self) -> Self {
        Self::derived(self.value().map(|v| v.tanh()), vec![self.clone()], Op::Tanh)
    }

    pub fn softplus(&self) -> Self {
        Self::derived(self.value().map(softplus), vec![self.clone()], Op::Softplus)
    }

    pub fn sqrt(&self) -> Self {
        Self::derived(self.value().map(|v| v.sqrt()), vec![self.clone()], Op::Sqrt)
    }

    pub fn rsqrt(&self) -> Self {
        Self::derived(self.value().map(|v| v.sqrt().recip()), vec![self.clone()], Op::Rsqrt)
    }

    pub fn square(&self) -> Self {
        Self::derived(self.value().map(|v| v * v), vec![self.clone()], Op::Square)
    }

    /// Concatenate along axis 1.
    pub fn cat(parts: &[&Var<T>]) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::cat_channels(&values);
        let sizes = parts.iter().map(|p| p.shape()[1]).collect();
        Self::derived(out, parts.iter().map(|&p| p.clone()).collect(), Op::Concat(sizes))
    }

    /// Slice `[start, start+len)` along axis 1.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        let out = self.value().narrow_channels(start, len);
        Self::derived(out, vec![self.clone()], Op::Narrow { start })
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let out = self.value().clone().reshape(shape);
        Self::derived(out, vec![self.clone()], Op::Reshape)
    }

    pub fn sum(&self) -> Self {
        Self::derived(Tensor::scalar(self.value().sum()), vec![self.clone()], Op::Sum)
    }

    pub fn mean(&self) -> Self {
        let n = T::of(self.value().numel() as f64);
        Self::derived(Tensor::scalar(self.value().sum() / n), vec![self.clone()], Op::Mean)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, other: &Var<T>) -> Self {
        self.sub(other).square().mean()
    }

    /// Reorder `[B, C, H, W]` into `[C, 1, B·H·W]` so each channel's samples
    /// form one row.
    pub fn channel_rows(&self) -> Self {
        let (b, c, h, w) = self.value().dims4();
        let plane = h * w;
        let src = self.value().data();
        let mut data = Vec::with_capacity(src.len());
        for ch in 0..c {
            for n in 0..b {
                data.extend_from_slice(&src[(n * c + ch) * plane..(n * c + ch + 1) * plane]);
            }
        }
        let out = Tensor::from_vec(&[c, 1, b * plane], data);
        Self::derived(out, vec![self.clone()], Op::ChannelRows)
    }

    /// Per-channel matrix product `[C, p, q] × [C, q, r] → [C, p, r]`.
    pub fn channel_matmul(&self, rhs: &Var<T>) -> Self {
        let (c, p, q) = dims3(self.value());
        let (c2, q2, r) = dims3(rhs.value());
        assert_eq!((c, q), (c2, q2), "channel_matmul shape mismatch");
        let mut out = Tensor::zeros(&[c, p, r]);
        for ch in 0..c {
            matmul_into(
                p,
                q,
                r,
                &self.value().data()[ch * p * q..(ch + 1) * p * q],
                Layout::Normal,
                &rhs.value().data()[ch * q * r..(ch + 1) * q * r],
                Layout::Normal,
                T::zero(),
                &mut out.data_mut()[ch * p * r..(ch + 1) * p * r],
            );
        }
        Self::derived(out, vec![self.clone(), rhs.clone()], Op::ChannelMatmul)
    }

    /// `self [.., d, n] + rhs [.., d, 1]`, broadcasting over the last axis.
    pub fn add_last(&self, rhs: &Var<T>) -> Self {
        let n = broadcast_last_check(self.value(), rhs.value());
        let r = rhs.value().data();
        let out = Tensor::from_fn(self.shape(), |i| self.value().data()[i] + r[i / n]);
        Self::derived(out, vec![self.clone(), rhs.clone()], Op::AddLast)
    }

    /// `self [.., d, n] * rhs [.., d, 1]`, broadcasting over the last axis.
    pub fn mul_last(&self, rhs: &Var<T>) -> Self {
        let n = broadcast_last_check(self.value(), rhs.value());
        let r = rhs.value().data();
        let out = Tensor::from_fn(self.shape(), |i| self.value().data()[i] * r[i / n]);
        Self::derived(out, vec![self.clone(), rhs.clone()], Op::MulLast)
    }

    /// Per-element information content, in bits, of `self` under a Gaussian
    /// `N(mean, scale)` convolved with a unit uniform, with the probability
    /// mass floored at `bound`.
    pub fn gaussian_bits(&self, mean: &Var<T>, scale: &Var<T>, bound: f64) -> Self {
        assert_eq!(self.shape(), mean.shape());
        assert_eq!(self.shape(), scale.shape());
        let y = self.value().data();
        let m = mean.value().data();
        let s = scale.value().data();
        let out = Tensor::from_fn(self.shape(), |i| {
            let (p, _, _) = gaussian_mass(y[i].f64() - m[i].f64(), s[i].f64());
            T::of(-(p.max(bound)).log2())
        });
        Self::derived(
            out,
            vec![self.clone(), mean.clone(), scale.clone()],
            Op::GaussianBits { bound },
        )
    }

    /// Per-element bits of the mass `sigmoid(upper) − sigmoid(lower)`,
    /// floored at `bound`.
    pub fn logistic_bits(&self, lower: &Var<T>, bound: f64) -> Self {
        assert_eq!(self.shape(), lower.shape());
        let a = self.value().data();
        let b = lower.value().data();
        let out = Tensor::from_fn(self.shape(), |i| {
            let p = logistic_mass(a[i].f64(), b[i].f64());
            T::of(-(p.max(bound)).log2())
        });
        Self::derived(out, vec![self.clone(), lower.clone()], Op::LogisticBits { bound })
    }

    /// Reverse-mode sweep from this (scalar) value.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.value().numel(), 1, "backward needs a scalar root");
        let order = topo_order(self);
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.0.id, Tensor::full(self.shape(), T::one()));
        let mut leaf_grads = HashMap::new();
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else { continue };
            if matches!(node.0.op, Op::Leaf) {
                leaf_grads.insert(node.0.id, g);
                continue;
            }
            let parent_grads = node.local_backward(&g);
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape());
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Gradients { by_id: leaf_grads }
    }

    fn local_backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let node = &self.0;
        let ps = &node.parents;
        let need = |i: usize| ps.get(i).is_some_and(|p| p.0.requires_grad);
        let x = || ps[0].value();
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    x(),
                    ps[1].value(),
                    g,
                    *stride,
                    *pad,
                    [need(0), need(1), need(2)],
                );
                vec![dx, dw, db]
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    x(),
                    ps[1].value(),
                    g,
                    *stride,
                    *pad,
                    [need(0), need(1), need(2)],
                );
                vec![dx, dw, db]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                need(0).then(|| g.zip_map(ps[1].value(), |a, b| a * b)),
                need(1).then(|| g.zip_map(x(), |a, b| a * b)),
            ],
            Op::AddScalar | Op::Reshape => {
                vec![Some(g.clone().reshape(x().shape()))]
            }
            Op::MulScalar(c) => {
                let c = T::of(*c);
                vec![Some(g.map(|v| v * c))]
            }
            Op::LeakyRelu(slope) => {
                let s = T::of(*slope);
                vec![Some(g.zip_map(x(), |gv, xv| if xv >= T::zero() { gv } else { gv * s }))]
            }
            Op::Sigmoid => vec![Some(g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)))],
            Op::Tanh => vec![Some(g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)))],
            Op::Softplus => vec![Some(g.zip_map(x(), |gv, xv| gv * sigmoid(xv)))],
            Op::Sqrt => vec![Some(g.zip_map(y, |gv, yv| gv * T::of(0.5) / yv))],
            Op::Rsqrt => vec![Some(g.zip_map(y, |gv, yv| gv * T::of(-0.5) * yv * yv * yv))],
            Op::Square => vec![Some(g.zip_map(x(), |gv, xv| gv * T::of(2.0) * xv))],
            Op::Concat(sizes) => {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let part = g.narrow_channels(start, len);
                        start += len;
                        Some(part)
                    })
                    .collect()
            }
            Op::Narrow { start } => {
                let full = x().shape();
                let (outer, c) = (full[0], full[1]);
                let inner: usize = full[2..].iter().product();
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(full);
                for o in 0..outer {
                    let dst = (o * c + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(Tensor::full(x().shape(), g.data()[0]))],
            Op::Mean => {
                let n = T::of(x().numel() as f64);
                vec![Some(Tensor::full(x().shape(), g.data()[0] / n))]
            }
            Op::ChannelRows => {
                let (b, c, h, w) = x().dims4();
                let plane = h * w;
                let mut dx = Tensor::zeros(x().shape());
                for ch in 0..c {
                    for n in 0..b {
                        let src = (ch * b + n) * plane;
                        let dst = (n * c + ch) * plane;
                        dx.data_mut()[dst..dst + plane].copy_from_slice(&g.data()[src..src + plane]);
                    }
                }
                vec![Some(dx)]
            }
            Op::ChannelMatmul => {
                let (a, b) = (x(), ps[1].value());
                let (c, p, q) = dims3(a);
                let (_, _, r) = dims3(b);
                let mut da = need(0).then(|| Tensor::zeros(a.shape()));
                let mut db = need(1).then(|| Tensor::zeros(b.shape()));
                for ch in 0..c {
                    let gs = &g.data()[ch * p * r..(ch + 1) * p * r];
                    if let Some(da) = da.as_mut() {
                        let bs = &b.data()[ch * q * r..(ch + 1) * q * r];
                        let dst = &mut da.data_mut()[ch * p * q..(ch + 1) * p * q];
                        matmul_into(p, r, q, gs, Layout::Normal, bs, Layout::Transposed, T::zero(), dst);
                    }
                    if let Some(db) = db.as_mut() {
                        let as_ = &a.data()[ch * p * q..(ch + 1) * p * q];
                        let dst = &mut db.data_mut()[ch * q * r..(ch + 1) * q * r];
                        matmul_into(q, p, r, as_, Layout::Transposed, gs, Layout::Normal, T::zero(), dst);
                    }
                }
                vec![da, db]
            }
            Op::AddLast => {
                let n = *x().shape().last().unwrap();
                let mut db = Tensor::zeros(ps[1].shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    db.data_mut()[i / n] += gv;
                }
                vec![Some(g.clone()), Some(db)]
            }
            Op::MulLast => {
                let n = *x().shape().last().unwrap();
                let r = ps[1].value().data();
                let da = need(0).then(|| Tensor::from_fn(g.shape(), |i| g.data()[i] * r[i / n]));
                let db = need(1).then(|| {
                    let mut db = Tensor::zeros(ps[1].shape());
                    for (i, (&gv, &xv)) in g.data().iter().zip(x().data()).enumerate() {
                        db.data_mut()[i / n] += gv * xv;
                    }
                    db
                });
                vec![da, db]
            }
            Op::GaussianBits { bound } => {
                let yv = x().data();
                let m = ps[1].value().data();
                let s = ps[2].value().data();
                let numel = g.numel();
                let mut dy = vec![T::zero(); numel];
                let mut ds = vec![T::zero(); numel];
                for i in 0..numel {
                    let r = yv[i].f64() - m[i].f64();
                    let (p, dp_dr, dp_ds) = gaussian_mass(r, s[i].f64());
                    if p <= *bound {
                        continue;
                    }
                    let dbits_dp = -1.0 / (p * std::f64::consts::LN_2);
                    let gv = g.data()[i].f64() * dbits_dp;
                    dy[i] = T::of(gv * dp_dr);
                    ds[i] = T::of(gv * dp_ds);
                }
                let dm = dy.iter().map(|&v| -v).collect();
                vec![
                    Some(Tensor::from_vec(g.shape(), dy)),
                    Some(Tensor::from_vec(g.shape(), dm)),
                    Some(Tensor::from_vec(g.shape(), ds)),
                ]
            }
            Op::LogisticBits { bound } => {
                let a = x().data();
                let b = ps[1].value().data();
                let numel = g.numel();
                let mut da = vec![T::zero(); numel];
                let mut db = vec![T::zero(); numel];
                for i in 0..numel {
                    let (av, bv) = (a[i].f64(), b[i].f64());
                    let diff = logistic_mass_signed(av, bv);
                    let p = diff.abs();
                    if p <= *bound {
                        continue;
                    }
                    let sign = diff.signum();
                    let dbits_dp = -1.0 / (p * std::f64::consts::LN_2);
                    let gv = g.data()[i].f64() * dbits_dp * sign;
                    da[i] = T::of(gv * logistic_density(av));
                    db[i] = T::of(-gv * logistic_density(bv));
                }
                vec![
                    Some(Tensor::from_vec(g.shape(), da)),
                    Some(Tensor::from_vec(g.shape(), db)),
                ]
            }
        }
    }
}

fn topo_order<T: Float>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.0.id) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.0.requires_grad && !visited.contains(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of leaf values, keyed by leaf identity.
pub struct Gradients<T: Float> {
    by_id: HashMap<u64, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        self.by_id.get(&leaf.0.id)
    }

    /// Gradient of `leaf`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, leaf: &Var<T>) -> Tensor<T> {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

fn dims3<T: Float>(t: &Tensor<T>) -> (usize, usize, usize) {
    match t.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => panic!("expected a 3-D tensor, got {:?}", t.shape()),
    }
}

fn broadcast_last_check<T: Float>(lhs: &Tensor<T>, rhs: &Tensor<T>) -> usize {
    let (ls, rs) = (lhs.shape(), rhs.shape());
    assert_eq!(ls.len(), rs.len(), "broadcast rank mismatch");
    assert_eq!(&ls[..ls.len() - 1], &rs[..rs.len() - 1], "broadcast shape mismatch");
    assert_eq!(*rs.last().unwrap(), 1, "rhs must have a unit last axis");
    *ls.last().unwrap()
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn logistic_density(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 - s)
}

/// `sigmoid(a) − sigmoid(b)` evaluated on the side of the logistic with the
/// smaller tail, which keeps small differences accurate.
fn logistic_mass_signed(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    }
}

pub(crate) fn logistic_mass(a: f64, b: f64) -> f64 {
    logistic_mass_signed(a, b).abs()
}

/// Mass of `N(0, scale)` on `[r − ½, r + ½)` with its partial derivatives
/// with respect to `r` and `scale`.
pub(crate) fn gaussian_mass(r: f64, scale: f64) -> (f64, f64, f64) {
    let d = r.abs();
    let upper = (0.5 - d) / scale;
    let lower = (-0.5 - d) / scale;
    let p = std_normal_cdf(upper) - std_normal_cdf(lower);
    let (pu, pl) = (std_normal_pdf(upper), std_normal_pdf(lower));
    let dp_dd = (-pu + pl) / scale;
    let dp_ds = (-upper * pu + lower * pl) / scale;
    let dp_dr = if r >= 0.0 { dp_dd } else { -dp_dd };
    (p, dp_dr, dp_ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let a = Var::parameter(Tensor::from_vec(&[2], vec![1.0f64, 2.0]));
        let b = a.mul(&a).add(&a).sum(); // d/da (a² + a) = 2a + 1
        let g = b.backward();
        assert_eq!(g.get(&a).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = Var::parameter(Tensor::from_vec(&[1], vec![1.0f64]));
        let _guard = no_grad();
        let b = a.square();
        assert!(!b.requires_grad());
    }

    #[test]
    fn gaussian_mass_unit_bin_at_large_scale() {
        let (p, _, _) = gaussian_mass(0.0, 1000.0);
        let bits = -p.log2();
        assert!((bits - 11.2915).abs() < 1e-3, "{bits}");
    }

    #[test]
    fn logistic_mass_is_stable_in_both_tails() {
        let far = logistic_mass(40.5, 39.5);
        assert!(far > 0.0 && far < 1e-16);
        let near = logistic_mass(0.5, -0.5);
        assert!((near - (sigmoid(0.5f64) - sigmoid(-0.5f64))).abs() < 1e-15);
    }

    #[test]
    fn sign_log_captures_leaky_inputs() {
        let x = Var::constant(Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]));
        let (_, signs) = record_activation_signs(|| x.leaky_relu(0.01));
        assert_eq!(signs, vec![false, true, true]);
    }
}
