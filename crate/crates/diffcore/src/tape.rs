//! Wengert-list tape: forward primitives push nodes, `backward` replays them in
//! reverse.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{axpy, gemm_nt, gemm_tn};
use crate::ops::{conv_geometry, gelu_grad, im2col, permute_into, split_axis};
use crate::tensor::{numel, Real, Tensor};

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul { a: usize, b: usize, batched: bool },
    Transpose(usize),
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Gather { x: usize, rows: Vec<usize> },
    Conv1d { x: usize, w: usize, stride: usize, pad: usize },
    Upsample { x: usize, factor: usize },
    LayerNorm { x: usize, inv_std: Vec<T> },
    Softmax(usize),
    LogSoftmax(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    L1Loss(usize, usize),
    MseLoss(usize, usize),
    CosineRows { a: usize, b: usize },
    NormalizeRows { x: usize, norms: Vec<T> },
    L2Norm(usize),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Records primitive applications for one forward pass. Single owner; a tape
/// supports exactly one `backward`.
pub struct Tape<T: Real> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. Gradients are reported for it only when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub(crate) fn push(
        &self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::invalid("backward", "loss belongs to a different tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && !out.contains_key(&id) {
                out.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map: out })
    }
}

/// Gradients of every `requires_grad` leaf, keyed by variable.
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.map.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.map.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let s = slot(grads, id, g.len());
    for (a, &b) in s.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sum of `g` folded over the leading repeats of a suffix-broadcast operand.
fn fold_broadcast<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); inner];
    for chunk in g.chunks_exact(inner) {
        for (a, &b) in acc.iter_mut().zip(chunk) {
            *a += b;
        }
    }
    acc
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].needs_grad;
    let y = &node.value;

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if needs(*a) {
                add_into(grads, *a, g);
            }
            if needs(*b) {
                let inner = val(*b).len();
                let mut gb = fold_broadcast(g, inner);
                if sign < T::zero() {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                add_into(grads, *b, &gb);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let inner = bv.len();
            if needs(*a) {
                let s = slot(grads, *a, av.len());
                for (i, (si, &gi)) in s.iter_mut().zip(g).enumerate() {
                    *si += gi * bv[i % inner];
                }
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); inner];
                for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                    gb[i % inner] += gi * ai;
                }
                add_into(grads, *b, &gb);
            }
        }
        Op::Scale(x, c) => {
            let s = slot(grads, *x, g.len());
            for (si, &gi) in s.iter_mut().zip(g) {
                *si += *c * gi;
            }
        }
        Op::Offset(x) | Op::Reshape(x) => add_into(grads, *x, g),
        Op::MatMul { a, b, batched } => {
            let (av, bv) = (val(*a), val(*b));
            let ash = av.shape();
            let bsh = bv.shape();
            let k = ash[ash.len() - 1];
            let n = bsh[bsh.len() - 1];
            if *batched {
                let batch = ash[0];
                let m = ash[1];
                if needs(*a) {
                    let s = slot(grads, *a, av.len());
                    for bi in 0..batch {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut s[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if needs(*b) {
                    let s = slot(grads, *b, bv.len());
                    for bi in 0..batch {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut s[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            } else {
                let m = av.len() / k;
                if needs(*a) {
                    let s = slot(grads, *a, av.len());
                    gemm_nt(m, n, k, g, bv.data(), s);
                }
                if needs(*b) {
                    let s = slot(grads, *b, bv.len());
                    gemm_tn(m, k, n, av.data(), g, s);
                }
            }
        }
        Op::Transpose(x) => {
            let sh = y.shape();
            let r = sh.len();
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            let mut gx = vec![T::zero(); g.len()];
            permute_into(sh, &axes, g, &mut gx);
            add_into(grads, *x, &gx);
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let mut gx = vec![T::zero(); g.len()];
            permute_into(y.shape(), &inverse, g, &mut gx);
            add_into(grads, *x, &gx);
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for &xi in xs {
                let len = val(xi).shape()[*axis];
                if needs(xi) {
                    let s = slot(grads, xi, val(xi).len());
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, total, inner) = split_axis(xs, *axis);
            let len = y.shape()[*axis];
            let s = slot(grads, *x, val(*x).len());
            for o in 0..outer {
                let dst = &mut s[(o * total + start) * inner..(o * total + start + len) * inner];
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        Op::Gather { x, rows } => {
            let xv = val(*x);
            let cols = xv.len() / xv.shape()[0];
            let s = slot(grads, *x, xv.len());
            for (i, &r) in rows.iter().enumerate() {
                axpy(T::one(), &g[i * cols..(i + 1) * cols], &mut s[r * cols..(r + 1) * cols]);
            }
        }
        Op::Conv1d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let geo = conv_geometry(xv.shape(), wv.shape(), *stride, *pad).expect("validated in forward");
            let rows = geo.batch * geo.out_len;
            let kc = geo.kernel * geo.cin;
            if needs(*w) {
                let cols = im2col(xv.data(), &geo);
                let s = slot(grads, *w, wv.len());
                gemm_tn(rows, kc, geo.cout, &cols, g, s);
            }
            if needs(*x) {
                let mut dcols = vec![T::zero(); rows * kc];
                gemm_nt(rows, geo.cout, kc, g, wv.data(), &mut dcols);
                let s = slot(grads, *x, xv.len());
                for b in 0..geo.batch {
                    for t in 0..geo.out_len {
                        let row = &dcols[(b * geo.out_len + t) * kc..(b * geo.out_len + t + 1) * kc];
                        for k in 0..geo.kernel {
                            let pos = (t * geo.stride + k) as isize - geo.pad as isize;
                            if pos < 0 || pos as usize >= geo.in_len {
                                continue;
                            }
                            let base = (b * geo.in_len + pos as usize) * geo.cin;
                            axpy(T::one(), &row[k * geo.cin..(k + 1) * geo.cin], &mut s[base..base + geo.cin]);
                        }
                    }
                }
            }
        }
        Op::Upsample { x, factor } => {
            let xs = val(*x).shape();
            let (b, l, c) = (xs[0], xs[1], xs[2]);
            let s = slot(grads, *x, val(*x).len());
            for bi in 0..b {
                for t in 0..l * factor {
                    let src = &g[(bi * l * factor + t) * c..(bi * l * factor + t + 1) * c];
                    let base = (bi * l + t / factor) * c;
                    axpy(T::one(), src, &mut s[base..base + c]);
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let d = *y.shape().last().unwrap();
            let s = slot(grads, *x, y.len());
            let inv_d = T::one() / T::of(d as f64);
            for (r, &is) in inv_std.iter().enumerate() {
                if is == T::zero() {
                    continue;
                }
                let yr = &y.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                for i in 0..d {
                    s[r * d + i] += is * (gr[i] - mean_g - yr[i] * mean_gy);
                }
            }
        }
        Op::Softmax(x) => {
            let d = *y.shape().last().unwrap();
            let s = slot(grads, *x, y.len());
            for (r, (yr, gr)) in y.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                let dotv = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..d {
                    s[r * d + i] += yr[i] * (gr[i] - dotv);
                }
            }
        }
        Op::LogSoftmax(x) => {
            let d = *y.shape().last().unwrap();
            let s = slot(grads, *x, y.len());
            for (r, (yr, gr)) in y.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                let gsum = gr.iter().copied().sum::<T>();
                for i in 0..d {
                    s[r * d + i] += gr[i] - yr[i].exp() * gsum;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            let s = slot(grads, *x, xv.len());
            for i in 0..xv.len() {
                s[i] += g[i] * gelu_grad(xv[i]);
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let n = val(*x).len();
            let scale = if matches!(node.op, Op::Mean(_)) { T::one() / T::of(n as f64) } else { T::one() };
            let gv = g[0] * scale;
            let s = slot(grads, *x, n);
            s.iter_mut().for_each(|v| *v += gv);
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let xs = val(*x).shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) { T::one() / T::of(len as f64) } else { T::one() };
            let s = slot(grads, *x, numel(xs));
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for l in 0..len {
                    axpy(scale, src, &mut s[(o * len + l) * inner..(o * len + l + 1) * inner]);
                }
            }
        }
        Op::L1Loss(a, b) | Op::MseLoss(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let inv_n = T::one() / T::of(av.len() as f64);
            let l1 = matches!(node.op, Op::L1Loss(..));
            let d: Vec<T> = av
                .iter()
                .zip(bv)
                .map(|(&p, &q)| {
                    let diff = p - q;
                    let local = if l1 {
                        if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    } else {
                        T::of(2.0) * diff
                    };
                    local * inv_n * g[0]
                })
                .collect();
            if needs(*a) {
                add_into(grads, *a, &d);
            }
            if needs(*b) {
                let s = slot(grads, *b, d.len());
                for (si, &di) in s.iter_mut().zip(&d) {
                    *si -= di;
                }
            }
        }
        Op::CosineRows { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let d = *av.shape().last().unwrap();
            let rows = av.len() / d;
            let eps = T::of(1e-12);
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for r in 0..rows {
                let ar = &av.data()[r * d..(r + 1) * d];
                let br = &bv.data()[r * d..(r + 1) * d];
                let na = ar.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                let nb = br.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                let c = y.data()[r];
                for i in 0..d {
                    ga[r * d + i] = g[r] * (br[i] / (na * nb) - c * ar[i] / (na * na));
                    gb[r * d + i] = g[r] * (ar[i] / (na * nb) - c * br[i] / (nb * nb));
                }
            }
            if needs(*a) {
                add_into(grads, *a, &ga);
            }
            if needs(*b) {
                add_into(grads, *b, &gb);
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = *y.shape().last().unwrap();
            let s = slot(grads, *x, y.len());
            for (r, &n) in norms.iter().enumerate() {
                let yr = &y.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let proj = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..d {
                    s[r * d + i] += (gr[i] - yr[i] * proj) / n;
                }
            }
        }
        Op::L2Norm(x) => {
            let xv = val(*x).data();
            let n = y.item();
            if n > T::zero() {
                let s = slot(grads, *x, xv.len());
                let scale = g[0] / n;
                axpy(scale, xv, s);
            }
        }
    }
}
