//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op appends a node holding its forward value. Node ids are issued in
//! creation order, so walking ids downward from the loss is a valid reverse
//! topological order. Leaves created with [`Tape::leaf`] accumulate gradients
//! across `backward` calls until [`Tape::zero_grad`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{
    broadcast_index, broadcast_shape, numel, Scalar, Tensor, TensorError, TensorResult,
};

const LAYER_NORM_EPS: f64 = 1e-5;
const PROB_CLAMP: f64 = 1e-7;

struct Broadcast {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, T),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SliceLast {
        src: usize,
        start: usize,
        end: usize,
    },
    ConcatLast(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        src: usize,
        scale: Vec<T>,
    },
    NeighborSum {
        src: usize,
        adjacency: Arc<Vec<Vec<usize>>>,
    },
    SegmentMean {
        src: usize,
        offsets: Arc<Vec<usize>>,
    },
    PadSegments {
        src: usize,
        offsets: Arc<Vec<usize>>,
        width: usize,
    },
    MaskedMean {
        src: usize,
        mask: Arc<Vec<bool>>,
        counts: Vec<usize>,
    },
    Bce {
        probs: usize,
        targets: Vec<T>,
        weights: Vec<T>,
        denom: T,
    },
    Mse {
        pred: usize,
        targets: Vec<T>,
        weights: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<BTreeMap<usize, Tensor<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
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
            leaf_grads: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input (a trainable parameter).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(node) to every reachable leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> TensorResult<()> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_shape, T::one()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut emit = |target: usize, grad: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::Constant => {}
                Op::Add(a, b, bc) => {
                    emit(
                        *a,
                        reduce_broadcast(g.data(), bc.a.as_deref(), val(*a).shape(), |x, _| x),
                    );
                    emit(
                        *b,
                        reduce_broadcast(g.data(), bc.b.as_deref(), val(*b).shape(), |x, _| x),
                    );
                }
                Op::Sub(a, b, bc) => {
                    emit(
                        *a,
                        reduce_broadcast(g.data(), bc.a.as_deref(), val(*a).shape(), |x, _| x),
                    );
                    emit(
                        *b,
                        reduce_broadcast(g.data(), bc.b.as_deref(), val(*b).shape(), |x, _| -x),
                    );
                }
                Op::Mul(a, b, bc) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let ia = bc.a.as_deref();
                    let ib = bc.b.as_deref();
                    let ga = reduce_broadcast(g.data(), ia, val(*a).shape(), |x, k| {
                        x * bv[ib.map_or(k, |v| v[k])]
                    });
                    let gb = reduce_broadcast(g.data(), ib, val(*b).shape(), |x, k| {
                        x * av[ia.map_or(k, |v| v[k])]
                    });
                    emit(*a, ga);
                    emit(*b, gb);
                }
                Op::Scale(a, c) => emit(*a, g.map(|x| x * *c)),
                Op::Tanh(a) => {
                    emit(*a, zip_map(&g, &node.value, |g, y| g * (T::one() - y * y)));
                }
                Op::Relu(a) => {
                    emit(
                        *a,
                        zip_map(
                            &g,
                            val(*a),
                            |g, x| if x > T::zero() { g } else { T::zero() },
                        ),
                    );
                }
                Op::Sigmoid(a) => {
                    emit(*a, zip_map(&g, &node.value, |g, y| g * y * (T::one() - y)));
                }
                Op::Exp(a) => emit(*a, zip_map(&g, &node.value, |g, y| g * y)),
                Op::Ln(a) => emit(*a, zip_map(&g, val(*a), |g, x| g / x)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let k = bv.shape()[0];
                    let n = bv.shape()[1];
                    let m = av.len() / k;
                    if nodes[*a].requires_grad {
                        let mut ga = vec![T::zero(); m * k];
                        matmul_nt(g.data(), bv.data(), &mut ga, m, n, k);
                        emit(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![T::zero(); k * n];
                        matmul_tn(av.data(), g.data(), &mut gb, m, k, n);
                        emit(*b, Tensor::new(vec![k, n], gb).expect("shape"));
                    }
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    let mut ga = vec![T::zero(); batch * m * k];
                    let mut gb = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        let a_s = &av.data()[s * m * k..(s + 1) * m * k];
                        let b_s = &bv.data()[s * k * n..(s + 1) * k * n];
                        matmul_nt(gs, b_s, &mut ga[s * m * k..(s + 1) * m * k], m, n, k);
                        matmul_tn(a_s, gs, &mut gb[s * k * n..(s + 1) * k * n], m, k, n);
                    }
                    emit(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
                    emit(*b, Tensor::new(bv.shape().to_vec(), gb).expect("shape"));
                }
                Op::Transpose(a) => emit(*a, transpose_last2(&g)),
                Op::Reshape(a) => {
                    emit(
                        *a,
                        g.clone().reshape(val(*a).shape().to_vec()).expect("shape"),
                    );
                }
                Op::SliceLast { src, start, end } => {
                    let shape = val(*src).shape().to_vec();
                    let w = *shape.last().unwrap();
                    let sw = end - start;
                    let mut gs = Tensor::zeros(&shape);
                    let gd = gs.data_mut();
                    for r in 0..g.len() / sw {
                        gd[r * w + start..r * w + end]
                            .copy_from_slice(&g.data()[r * sw..(r + 1) * sw]);
                    }
                    emit(*src, gs);
                }
                Op::ConcatLast(parts) => {
                    let total = *g.shape().last().unwrap();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let w = *shape.last().unwrap();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        offset += w;
                        emit(p, Tensor::new(shape, gp).expect("shape"));
                    }
                }
                Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = T::from_usize(val(*a).len()).unwrap();
                    emit(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let w = *y.shape().last().unwrap();
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / w {
                        let ys = &y.data()[r * w..(r + 1) * w];
                        let gs = &g.data()[r * w..(r + 1) * w];
                        let dot: T = ys.iter().zip(gs).map(|(&yy, &gg)| yy * gg).sum();
                        for j in 0..w {
                            gx[r * w + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    emit(*a, Tensor::new(y.shape().to_vec(), gx).expect("shape"));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let w = val(*gamma).len();
                    let rows = xhat.len() / w;
                    let gam = val(*gamma).data();
                    let mut gg = vec![T::zero(); w];
                    let mut gb = vec![T::zero(); w];
                    let mut gx = vec![T::zero(); xhat.len()];
                    let nw = T::from_usize(w).unwrap();
                    for r in 0..rows {
                        let gs = &g.data()[r * w..(r + 1) * w];
                        let xs = &xhat[r * w..(r + 1) * w];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..w {
                            gg[j] = gg[j] + gs[j] * xs[j];
                            gb[j] = gb[j] + gs[j];
                            let d = gs[j] * gam[j];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xs[j];
                        }
                        for j in 0..w {
                            let d = gs[j] * gam[j];
                            gx[r * w + j] = inv_std[r] / nw * (nw * d - sum_d - xs[j] * sum_dx);
                        }
                    }
                    emit(
                        *x,
                        Tensor::new(val(*x).shape().to_vec(), gx).expect("shape"),
                    );
                    emit(*gamma, Tensor::new(vec![w], gg).expect("shape"));
                    emit(*beta, Tensor::new(vec![w], gb).expect("shape"));
                }
                Op::Dropout { src, scale } => {
                    let gx = g.data().iter().zip(scale).map(|(&a, &s)| a * s).collect();
                    emit(*src, Tensor::new(g.shape().to_vec(), gx).expect("shape"));
                }
                Op::NeighborSum { src, adjacency } => {
                    let shape = val(*src).shape().to_vec();
                    let w = shape[1];
                    let mut gx = vec![T::zero(); numel(&shape)];
                    for (v, nbrs) in adjacency.iter().enumerate() {
                        let gv = &g.data()[v * w..(v + 1) * w];
                        for &u in nbrs {
                            for j in 0..w {
                                gx[u * w + j] = gx[u * w + j] + gv[j];
                            }
                        }
                    }
                    emit(*src, Tensor::new(shape, gx).expect("shape"));
                }
                Op::SegmentMean { src, offsets } => {
                    let shape = val(*src).shape().to_vec();
                    let w = shape[1];
                    let mut gx = vec![T::zero(); numel(&shape)];
                    for s in 0..offsets.len() - 1 {
                        let n = T::from_usize(offsets[s + 1] - offsets[s]).unwrap();
                        for r in offsets[s]..offsets[s + 1] {
                            for j in 0..w {
                                gx[r * w + j] = g.data()[s * w + j] / n;
                            }
                        }
                    }
                    emit(*src, Tensor::new(shape, gx).expect("shape"));
                }
                Op::PadSegments {
                    src,
                    offsets,
                    width,
                } => {
                    let shape = val(*src).shape().to_vec();
                    let d = shape[1];
                    let mut gx = vec![T::zero(); numel(&shape)];
                    for s in 0..offsets.len() - 1 {
                        for (i, r) in (offsets[s]..offsets[s + 1]).enumerate() {
                            let o = (s * width + i) * d;
                            gx[r * d..(r + 1) * d].copy_from_slice(&g.data()[o..o + d]);
                        }
                    }
                    emit(*src, Tensor::new(shape, gx).expect("shape"));
                }
                Op::MaskedMean { src, mask, counts } => {
                    let shape = val(*src).shape().to_vec();
                    let (n, d) = (shape[1], shape[2]);
                    let mut gx = vec![T::zero(); numel(&shape)];
                    for (b, &c) in counts.iter().enumerate() {
                        let cn = T::from_usize(c).unwrap();
                        for i in 0..n {
                            if mask[b * n + i] {
                                for j in 0..d {
                                    gx[(b * n + i) * d + j] = g.data()[b * d + j] / cn;
                                }
                            }
                        }
                    }
                    emit(*src, Tensor::new(shape, gx).expect("shape"));
                }
                Op::Bce {
                    probs,
                    targets,
                    weights,
                    denom,
                } => {
                    let p = val(*probs);
                    let lo = T::from_f64_lossy(PROB_CLAMP);
                    let hi = T::one() - lo;
                    let scale = g.item() / *denom;
                    let gx = p
                        .data()
                        .iter()
                        .zip(targets.iter().zip(weights))
                        .map(|(&pi, (&y, &w))| {
                            if pi <= lo || pi >= hi {
                                T::zero()
                            } else {
                                -w * scale * (y / pi - (T::one() - y) / (T::one() - pi))
                            }
                        })
                        .collect();
                    emit(*probs, Tensor::new(p.shape().to_vec(), gx).expect("shape"));
                }
                Op::Mse {
                    pred,
                    targets,
                    weights,
                    denom,
                } => {
                    let p = val(*pred);
                    let two = T::from_f64_lossy(2.0);
                    let scale = g.item() / *denom;
                    let gx = p
                        .data()
                        .iter()
                        .zip(targets.iter().zip(weights))
                        .map(|(&pi, (&y, &w))| two * w * scale * (pi - y))
                        .collect();
                    emit(*pred, Tensor::new(p.shape().to_vec(), gx).expect("shape"));
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape")
}

fn reduce_broadcast<T: Scalar>(
    g: &[T],
    index: Option<&[usize]>,
    shape: &[usize],
    f: impl Fn(T, usize) -> T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    match index {
        None => {
            for (k, &x) in g.iter().enumerate() {
                od[k] = f(x, k);
            }
        }
        Some(idx) => {
            for (k, &x) in g.iter().enumerate() {
                od[idx[k]] = od[idx[k]] + f(x, k);
            }
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1));
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    T::gemm(m, n, k, g, (n, 1), b, (1, n), c, (k, 1));
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, a, (1, k), g, (n, 1), c, (n, 1));
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = t.len() / (m * n);
    let mut out = vec![T::zero(); t.len()];
    for s in 0..batch {
        let base = s * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = t.data()[base + i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).expect("shape")
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn unary(self, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.id].value.map(f);
        let rg = self.requires_grad();
        self.tape.push(value, op(self.id), rg)
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize, Broadcast) -> Op<T>,
    ) -> TensorResult<Var<'t, T>> {
        let (value, bc) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let out_shape =
                broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::Shape {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })?;
            let ia =
                (a.shape() != out_shape.as_slice()).then(|| broadcast_index(a.shape(), &out_shape));
            let ib =
                (b.shape() != out_shape.as_slice()).then(|| broadcast_index(b.shape(), &out_shape));
            let n = numel(&out_shape);
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n)
                .map(|k| {
                    let x = ad[ia.as_ref().map_or(k, |v| v[k])];
                    let y = bd[ib.as_ref().map_or(k, |v| v[k])];
                    f(x, y)
                })
                .collect();
            (Tensor::new(out_shape, data)?, Broadcast { a: ia, b: ib })
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id, bc), rg))
    }

    pub fn add(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.tape.nodes.borrow()[self.id].value.map(|x| x * c);
        let rg = self.requires_grad();
        self.tape.push(value, Op::Scale(self.id, c), rg)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), Op::Tanh)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, Op::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), Op::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), Op::Ln)
    }

    /// `[.., k] · [k, n] → [.., n]`; leading dims of `self` are flattened.
    pub fn matmul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let err = || TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.rank() < 2 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
                return Err(err());
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            let mut c = vec![T::zero(); m * n];
            matmul_nn(a.data(), b.data(), &mut c, m, k, n);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, c)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(TensorError::Shape {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                matmul_nn(
                    &a.data()[s * m * k..(s + 1) * m * k],
                    &b.data()[s * k * n..(s + 1) * k * n],
                    &mut c[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![batch, m, n], c)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Bmm(self.id, other.id), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() < 2 {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("rank {} < 2", a.rank()),
                });
            }
            transpose_last2(a)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> TensorResult<Var<'t, T>> {
        let value = self.value().reshape(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let w = *a.shape().last().unwrap_or(&0);
            if start >= end || end > w {
                return Err(TensorError::Invalid {
                    op: "slice_last",
                    msg: format!("range {start}..{end} outside width {w}"),
                });
            }
            let sw = end - start;
            let rows = a.len() / w;
            let mut data = Vec::with_capacity(rows * sw);
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * w + start..r * w + end]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = sw;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::SliceLast {
                src: self.id,
                start,
                end,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::Invalid {
                op: "concat_last",
                msg: "no inputs".into(),
            })?
            .tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let lead = &first.shape()[..first.rank() - 1];
            let rows = numel(lead);
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                if &s[..s.len() - 1] != lead {
                    return Err(TensorError::Shape {
                        op: "concat_last",
                        lhs: first.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[s.len() - 1];
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let w = *v.shape().last().unwrap();
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::ConcatLast(ids), rg))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.tape.nodes.borrow()[self.id].value.sum());
        let rg = self.requires_grad();
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            Tensor::scalar(a.sum() / T::from_usize(a.len()).unwrap())
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Mean(self.id), rg)
    }

    /// Softmax over the last axis. `mask` (true = keep) is broadcast against
    /// the input; masked entries get weight exactly zero.
    pub fn softmax_last(self, mask: Option<(&[bool], &[usize])>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let full_mask: Option<Vec<bool>> = match mask {
                None => None,
                Some((m, mshape)) => {
                    if numel(mshape) != m.len()
                        || broadcast_shape(mshape, x.shape()).as_deref() != Some(x.shape())
                    {
                        return Err(TensorError::Shape {
                            op: "softmax_last",
                            lhs: x.shape().to_vec(),
                            rhs: mshape.to_vec(),
                        });
                    }
                    Some(
                        broadcast_index(mshape, x.shape())
                            .into_iter()
                            .map(|i| m[i])
                            .collect(),
                    )
                }
            };
            softmax_rows(x, full_mask.as_deref())?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Softmax(self.id), rg))
    }

    /// Normalizes the last axis then applies `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let w = *x.shape().last().unwrap_or(&0);
            if g.shape() != [w] || b.shape() != [w] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.len() / w;
            let nw = T::from_usize(w).unwrap();
            let eps = T::from_f64_lossy(LAYER_NORM_EPS);
            let mut xhat = vec![T::zero(); x.len()];
            let mut out = vec![T::zero(); x.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let xs = &x.data()[r * w..(r + 1) * w];
                let mean = xs.iter().copied().sum::<T>() / nw;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..w {
                    let h = (xs[j] - mean) * is;
                    xhat[r * w + j] = h;
                    out[r * w + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multiplies elementwise by a fixed per-element scale (0 for dropped
    /// units, `1/(1-p)` for kept ones).
    pub fn dropout_with(self, scale: Vec<T>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if scale.len() != x.len() {
                return Err(TensorError::Shape {
                    op: "dropout",
                    lhs: x.shape().to_vec(),
                    rhs: vec![scale.len()],
                });
            }
            let data = x.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Dropout {
                src: self.id,
                scale,
            },
            rg,
        ))
    }

    /// Row `v` of the output is the sum of input rows listed in `adjacency[v]`.
    pub fn neighbor_sum(self, adjacency: Arc<Vec<Vec<usize>>>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.rank() != 2 || adjacency.len() != x.shape()[0] {
                return Err(TensorError::Invalid {
                    op: "neighbor_sum",
                    msg: format!(
                        "{} adjacency rows for input {:?}",
                        adjacency.len(),
                        x.shape()
                    ),
                });
            }
            let w = x.shape()[1];
            let mut out = vec![T::zero(); x.len()];
            for (v, nbrs) in adjacency.iter().enumerate() {
                for &u in nbrs {
                    if u >= adjacency.len() {
                        return Err(TensorError::Invalid {
                            op: "neighbor_sum",
                            msg: format!("neighbor index {u} out of range"),
                        });
                    }
                    for j in 0..w {
                        out[v * w + j] = out[v * w + j] + x.data()[u * w + j];
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::NeighborSum {
                src: self.id,
                adjacency,
            },
            rg,
        ))
    }

    /// Mean of consecutive row segments `offsets[s]..offsets[s+1]`.
    pub fn segment_mean(self, offsets: Arc<Vec<usize>>) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_offsets("segment_mean", x, &offsets)?;
            let w = x.shape()[1];
            let segs = offsets.len() - 1;
            let mut out = vec![T::zero(); segs * w];
            for s in 0..segs {
                let n = T::from_usize(offsets[s + 1] - offsets[s]).unwrap();
                for r in offsets[s]..offsets[s + 1] {
                    for j in 0..w {
                        out[s * w + j] = out[s * w + j] + x.data()[r * w + j];
                    }
                }
                for j in 0..w {
                    out[s * w + j] = out[s * w + j] / n;
                }
            }
            Tensor::new(vec![segs, w], out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::SegmentMean {
                src: self.id,
                offsets,
            },
            rg,
        ))
    }

    /// Scatters row segments into a zero-padded `[segments, width, d]` block.
    pub fn pad_segments(self, offsets: Arc<Vec<usize>>, width: usize) -> TensorResult<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_offsets("pad_segments", x, &offsets)?;
            let d = x.shape()[1];
            let segs = offsets.len() - 1;
            let mut out = vec![T::zero(); segs * width * d];
            for s in 0..segs {
                if offsets[s + 1] - offsets[s] > width {
                    return Err(TensorError::Invalid {
                        op: "pad_segments",
                        msg: format!("segment {s} longer than width {width}"),
                    });
                }
                for (i, r) in (offsets[s]..offsets[s + 1]).enumerate() {
                    let o = (s * width + i) * d;
                    out[o..o + d].copy_from_slice(&x.data()[r * d..(r + 1) * d]);
                }
            }
            Tensor::new(vec![segs, width, d], out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::PadSegments {
                src: self.id,
                offsets,
                width,
            },
            rg,
        ))
    }

    /// Mean over axis 1 of `[B, n, d]` restricted to positions where
    /// `mask[b * n + i]` is true.
    pub fn masked_mean(self, mask: Arc<Vec<bool>>) -> TensorResult<Var<'t, T>> {
        let (value, counts) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.rank() != 3 || mask.len() != x.shape()[0] * x.shape()[1] {
                return Err(TensorError::Shape {
                    op: "masked_mean",
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![T::zero(); b * d];
            let mut counts = Vec::with_capacity(b);
            for s in 0..b {
                let c = (0..n).filter(|&i| mask[s * n + i]).count();
                if c == 0 {
                    return Err(TensorError::FullyMasked {
                        op: "masked_mean",
                        slice: s,
                    });
                }
                counts.push(c);
                let cn = T::from_usize(c).unwrap();
                for i in (0..n).filter(|&i| mask[s * n + i]) {
                    for j in 0..d {
                        out[s * d + j] = out[s * d + j] + x.data()[(s * n + i) * d + j];
                    }
                }
                for j in 0..d {
                    out[s * d + j] = out[s * d + j] / cn;
                }
            }
            (Tensor::new(vec![b, d], out)?, counts)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MaskedMean {
                src: self.id,
                mask,
                counts,
            },
            rg,
        ))
    }

    /// Binary cross-entropy of probabilities against 0/1 targets, averaged over
    /// entries with nonzero weight. Probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]` before the log.
    pub fn bce(self, targets: &[T], weights: &[T]) -> TensorResult<Var<'t, T>> {
        let (value, denom) = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id].value;
            let denom = check_loss_inputs("bce", p, targets, weights)?;
            let lo = T::from_f64_lossy(PROB_CLAMP);
            let hi = T::one() - lo;
            let total: T = p
                .data()
                .iter()
                .zip(targets.iter().zip(weights))
                .map(|(&pi, (&y, &w))| {
                    let pc = pi.max(lo).min(hi);
                    -w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
                })
                .sum();
            (Tensor::scalar(total / denom), denom)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Bce {
                probs: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Weighted mean squared error.
    pub fn mse(self, targets: &[T], weights: &[T]) -> TensorResult<Var<'t, T>> {
        let (value, denom) = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id].value;
            let denom = check_loss_inputs("mse", p, targets, weights)?;
            let total: T = p
                .data()
                .iter()
                .zip(targets.iter().zip(weights))
                .map(|(&pi, (&y, &w))| w * (pi - y) * (pi - y))
                .sum();
            (Tensor::scalar(total / denom), denom)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Mse {
                pred: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            rg,
        ))
    }
}

fn check_offsets<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    offsets: &[usize],
) -> TensorResult<()> {
    let ok = x.rank() == 2
        && offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == x.shape()[0]
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op,
            msg: format!(
                "offsets {:?} do not partition {:?} into non-empty segments",
                offsets,
                x.shape()
            ),
        })
    }
}

fn check_loss_inputs<T: Scalar>(
    op: &'static str,
    p: &Tensor<T>,
    targets: &[T],
    weights: &[T],
) -> TensorResult<T> {
    if targets.len() != p.len() || weights.len() != p.len() {
        return Err(TensorError::Shape {
            op,
            lhs: p.shape().to_vec(),
            rhs: vec![targets.len(), weights.len()],
        });
    }
    let denom: T = weights.iter().copied().sum();
    if denom <= T::zero() {
        return Err(TensorError::Invalid {
            op,
            msg: "no labelled entries".into(),
        });
    }
    Ok(denom)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-stabilized softmax over the last axis of `x`.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> TensorResult<Tensor<T>> {
    let w = *x.shape().last().unwrap_or(&0);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / w.max(1) {
        let keep = |j: usize| mask.is_none_or(|m| m[r * w + j]);
        let xs = &x.data()[r * w..(r + 1) * w];
        let mut max = T::neg_infinity();
        for (j, &v) in xs.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(TensorError::FullyMasked {
                op: "softmax",
                slice: r,
            });
        }
        let mut z = T::zero();
        for (j, &v) in xs.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                out[r * w + j] = e;
                z = z + e;
            }
        }
        for o in &mut out[r * w..(r + 1) * w] {
            *o = *o / z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
