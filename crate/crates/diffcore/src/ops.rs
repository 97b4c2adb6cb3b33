//! Forward definitions of every differentiable primitive.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`) accept a right operand whose
//! shape equals the left shape or a trailing suffix of it (bias broadcast).

use crate::error::{Error, Result};
use crate::kernels::gemm_nn;
use crate::tape::{Op, Var};
use crate::tensor::{numel, Real, Tensor};

const LN_ZERO_VAR: f64 = 1e-12;

/// `(outer, axis_len, inner)` for a row-major shape split at `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Writes `src` (with shape `shape`) permuted so that output axis `i` is
/// input axis `axes[i]`.
pub(crate) fn permute_into<T: Copy>(shape: &[usize], axes: &[usize], src: &[T], dst: &mut [T]) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for d in dst.iter_mut() {
        *d = src[offset];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if x.len() != 3 || w.len() != 3 || x[2] != w[1] {
        return Err(Error::shape("conv1d", x, w));
    }
    if stride == 0 {
        return Err(Error::invalid("conv1d", "stride must be positive"));
    }
    let span = x[1] + 2 * pad;
    if span < w[0] {
        return Err(Error::invalid(
            "conv1d",
            format!("kernel {} longer than padded input {}", w[0], span),
        ));
    }
    Ok(ConvGeometry {
        batch: x[0],
        in_len: x[1],
        out_len: (span - w[0]) / stride + 1,
        cin: x[2],
        cout: w[2],
        kernel: w[0],
        stride,
        pad,
    })
}

pub(crate) fn im2col<T: Real>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let kc = geo.kernel * geo.cin;
    let mut cols = vec![T::zero(); geo.batch * geo.out_len * kc];
    for b in 0..geo.batch {
        for t in 0..geo.out_len {
            let row = &mut cols[(b * geo.out_len + t) * kc..(b * geo.out_len + t + 1) * kc];
            for k in 0..geo.kernel {
                let pos = (t * geo.stride + k) as isize - geo.pad as isize;
                if pos < 0 || pos as usize >= geo.in_len {
                    continue;
                }
                let base = (b * geo.in_len + pos as usize) * geo.cin;
                row[k * geo.cin..(k + 1) * geo.cin].copy_from_slice(&x[base..base + geo.cin]);
            }
        }
    }
    cols
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t, T: Real> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid(op, "operands recorded on different tapes"))
        }
    }

    fn needs_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.tape.needs(i))
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs, name)?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            if !is_suffix(a.shape(), b.shape()) {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let inner = b.len();
            let data = a
                .data()
                .chunks_exact(inner.max(1))
                .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape(), data)?
        };
        let needs = self.needs_any(&[self.id, rhs.id]);
        self.tape.push(name, out, op, needs)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        let out = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|&x| x * c).collect())?
        };
        self.tape.push("scale", out, Op::Scale(self.id, c), self.needs_any(&[self.id]))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        let out = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|&x| x + c).collect())?
        };
        self.tape.push("add_scalar", out, Op::Offset(self.id), self.needs_any(&[self.id]))
    }

    /// `[.., m, k] × [k, n]` (shared right factor) or `[b, m, k] × [b, k, n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs, "matmul")?;
        let (out, batched) = {
            let (a, b) = (self.value(), rhs.value());
            let (ash, bsh) = (a.shape(), b.shape());
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(Error::shape("matmul", ash, bsh));
            }
            let k = ash[ash.len() - 1];
            if bsh.len() == 2 {
                if bsh[0] != k {
                    return Err(Error::shape("matmul", ash, bsh));
                }
                let n = bsh[1];
                let m = a.len() / k;
                let mut c = vec![T::zero(); m * n];
                gemm_nn(m, k, n, a.data(), b.data(), &mut c);
                let mut shape = ash.to_vec();
                *shape.last_mut().unwrap() = n;
                (Tensor::new(shape, c)?, false)
            } else if ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0] && bsh[1] == k {
                let (batch, m, n) = (ash[0], ash[1], bsh[2]);
                let mut c = vec![T::zero(); batch * m * n];
                for bi in 0..batch {
                    gemm_nn(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut c[bi * m * n..(bi + 1) * m * n],
                    );
                }
                (Tensor::new(vec![batch, m, n], c)?, true)
            } else {
                return Err(Error::shape("matmul", ash, bsh));
            }
        };
        let needs = self.needs_any(&[self.id, rhs.id]);
        self.tape.push(
            "matmul",
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batched,
            },
            needs,
        )
    }

    /// `a · bᵀ` for `[b, m, k] × [b, n, k]`, used for attention scores.
    pub fn matmul_nt(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(rhs.transpose()?)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let out = self.permuted(&axes);
        self.tape.push("transpose", out, Op::Transpose(self.id), self.needs_any(&[self.id]))
    }

    fn permuted(&self, axes: &[usize]) -> Tensor<T> {
        let a = self.value();
        let mut data = vec![T::zero(); a.len()];
        permute_into(a.shape(), axes, a.data(), &mut data);
        let shape: Vec<usize> = axes.iter().map(|&i| a.shape()[i]).collect();
        Tensor::new(shape, data).expect("permutation preserves element count")
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let out = self.permuted(axes);
        self.tape.push(
            "permute",
            out,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            self.needs_any(&[self.id]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.to_tensor().reshape(shape.to_vec())?;
        self.tape.push("reshape", out, Op::Reshape(self.id), self.needs_any(&[self.id]))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat")?;
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = first.needs_any(&ids);
        first.tape.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat { xs: ids, axis },
            needs,
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let sh = a.shape();
            if axis >= sh.len() || start + len > sh[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {sh:?}", start + len),
                ));
            }
            let (outer, total, inner) = split_axis(sh, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            let mut shape = sh.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        self.tape.push(
            "slice",
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.needs_any(&[self.id]),
        )
    }

    /// Selects entries along axis 0 (repeats allowed).
    pub fn gather(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let sh = a.shape();
            if sh.is_empty() {
                return Err(Error::invalid("gather", "needs rank >= 1"));
            }
            let cols = numel(&sh[1..]);
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= sh[0] {
                    return Err(Error::invalid("gather", format!("row {r} out of range for {sh:?}")));
                }
                data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
            }
            let mut shape = sh.to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data)?
        };
        self.tape.push(
            "gather",
            out,
            Op::Gather {
                x: self.id,
                rows: rows.to_vec(),
            },
            self.needs_any(&[self.id]),
        )
    }

    /// Keeps the axis-0 entries where `mask` is true.
    pub fn mask_select(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let n = self.value().shape().first().copied().unwrap_or(0);
        if mask.len() != n {
            return Err(Error::shape("mask_select", &self.shape(), &[mask.len()]));
        }
        let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.gather(&rows)
    }

    /// 1-D convolution: `x [b, l, cin]`, `w [k, cin, cout]` → `[b, l_out, cout]`, zero padding.
    pub fn conv1d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(&w, "conv1d")?;
        let out = {
            let (xv, wv) = (self.value(), w.value());
            let geo = conv_geometry(xv.shape(), wv.shape(), stride, pad)?;
            let cols = im2col(xv.data(), &geo);
            let rows = geo.batch * geo.out_len;
            let mut c = vec![T::zero(); rows * geo.cout];
            gemm_nn(rows, geo.kernel * geo.cin, geo.cout, &cols, wv.data(), &mut c);
            Tensor::new(vec![geo.batch, geo.out_len, geo.cout], c)?
        };
        let needs = self.needs_any(&[self.id, w.id]);
        self.tape.push(
            "conv1d",
            out,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Nearest-neighbour repeat along axis 1 of `[b, l, c]`.
    pub fn upsample(self, factor: usize) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let sh = a.shape();
            if sh.len() != 3 || factor == 0 {
                return Err(Error::invalid("upsample", format!("shape {sh:?}, factor {factor}")));
            }
            let (b, l, c) = (sh[0], sh[1], sh[2]);
            let mut data = Vec::with_capacity(a.len() * factor);
            for bi in 0..b {
                for t in 0..l * factor {
                    let base = (bi * l + t / factor) * c;
                    data.extend_from_slice(&a.data()[base..base + c]);
                }
            }
            Tensor::new(vec![b, l * factor, c], data)?
        };
        self.tape.push(
            "upsample",
            out,
            Op::Upsample { x: self.id, factor },
            self.needs_any(&[self.id]),
        )
    }

    /// Normalizes over the last axis without affine terms. Rows whose variance
    /// is below 1e-12 map to zero.
    pub fn layer_norm(self) -> Result<Var<'t, T>> {
        let (out, inv_std) = {
            let a = self.value();
            let d = *a.shape().last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
            let mut data = vec![T::zero(); a.len()];
            let mut inv_std = Vec::with_capacity(a.len() / d.max(1));
            let inv_d = T::one() / T::of(d as f64);
            for (row, dst) in a.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                if var < T::of(LN_ZERO_VAR) {
                    inv_std.push(T::zero());
                    continue;
                }
                let is = T::one() / var.sqrt();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
                inv_std.push(is);
            }
            (Tensor::new(a.shape(), data)?, inv_std)
        };
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm { x: self.id, inv_std },
            self.needs_any(&[self.id]),
        )
    }

    fn rowwise(
        self,
        name: &'static str,
        f: impl Fn(&[T], &mut [T]),
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let d = *a.shape().last().ok_or_else(|| Error::invalid(name, "scalar input"))?;
            let mut data = vec![T::zero(); a.len()];
            for (row, dst) in a.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
                f(row, dst);
            }
            Tensor::new(a.shape(), data)?
        };
        self.tape.push(name, out, op, self.needs_any(&[self.id]))
    }

    pub fn softmax(self) -> Result<Var<'t, T>> {
        self.rowwise(
            "softmax",
            |row, dst| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    s += *o;
                }
                dst.iter_mut().for_each(|o| *o /= s);
            },
            Op::Softmax(self.id),
        )
    }

    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        self.rowwise(
            "log_softmax",
            |row, dst| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = v - lse;
                }
            },
            Op::LogSoftmax(self.id),
        )
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            Tensor::new(a.shape(), a.data().iter().map(|&x| gelu(x)).collect())?
        };
        self.tape.push("gelu", out, Op::Gelu(self.id), self.needs_any(&[self.id]))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), self.needs_any(&[self.id]))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let m = {
            let a = self.value();
            if a.is_empty() {
                return Err(Error::invalid("mean", "empty tensor"));
            }
            a.data().iter().copied().sum::<T>() / T::of(a.len() as f64)
        };
        self.tape.push("mean", Tensor::scalar(m), Op::Mean(self.id), self.needs_any(&[self.id]))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let out = {
            let a = self.value();
            let sh = a.shape();
            if axis >= sh.len() || sh[axis] == 0 {
                return Err(Error::invalid(name, format!("axis {axis} of {sh:?}")));
            }
            let (outer, len, inner) = split_axis(sh, axis);
            let scale = if mean { T::one() / T::of(len as f64) } else { T::one() };
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut data[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= scale);
            }
            let mut shape = sh.to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)?
        };
        let op = if mean {
            Op::MeanAxis { x: self.id, axis }
        } else {
            Op::SumAxis { x: self.id, axis }
        };
        self.tape.push(name, out, op, self.needs_any(&[self.id]))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    fn loss(self, target: Var<'t, T>, l1: bool) -> Result<Var<'t, T>> {
        let name = if l1 { "l1_loss" } else { "mse_loss" };
        self.same_tape(&target, name)?;
        let v = {
            let (a, b) = (self.value(), target.value());
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            if a.is_empty() {
                return Err(Error::invalid(name, "empty operands"));
            }
            let s: T = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if l1 { (x - y).abs() } else { (x - y) * (x - y) })
                .sum();
            s / T::of(a.len() as f64)
        };
        let op = if l1 {
            Op::L1Loss(self.id, target.id)
        } else {
            Op::MseLoss(self.id, target.id)
        };
        let needs = self.needs_any(&[self.id, target.id]);
        self.tape.push(name, Tensor::scalar(v), op, needs)
    }

    /// Mean absolute difference.
    pub fn l1_loss(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.loss(target, true)
    }

    /// Mean squared difference.
    pub fn mse_loss(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.loss(target, false)
    }

    /// Cosine similarity of matching rows (last axis), dropping that axis.
    pub fn cosine_rows(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other, "cosine_rows")?;
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() || a.rank() == 0 {
                return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
            }
            let d = *a.shape().last().unwrap();
            let eps = T::of(1e-12);
            let data = a
                .data()
                .chunks_exact(d)
                .zip(b.data().chunks_exact(d))
                .map(|(x, y)| {
                    let na = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                    let nb = y.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                    x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>() / (na * nb)
                })
                .collect();
            Tensor::new(&a.shape()[..a.rank() - 1], data)?
        };
        let needs = self.needs_any(&[self.id, other.id]);
        self.tape.push(
            "cosine_rows",
            out,
            Op::CosineRows {
                a: self.id,
                b: other.id,
            },
            needs,
        )
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize(self) -> Result<Var<'t, T>> {
        let (out, norms) = {
            let a = self.value();
            let d = *a.shape().last().ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
            let mut data = vec![T::zero(); a.len()];
            let mut norms = Vec::with_capacity(a.len() / d.max(1));
            for (row, dst) in a.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = v / n;
                }
                norms.push(n);
            }
            (Tensor::new(a.shape(), data)?, norms)
        };
        self.tape.push(
            "l2_normalize",
            out,
            Op::NormalizeRows { x: self.id, norms },
            self.needs_any(&[self.id]),
        )
    }

    /// Global L2 norm over all entries.
    pub fn l2_norm(self) -> Result<Var<'t, T>> {
        let n = self.value().l2_norm();
        self.tape.push("l2_norm", Tensor::scalar(n), Op::L2Norm(self.id), self.needs_any(&[self.id]))
    }
}
