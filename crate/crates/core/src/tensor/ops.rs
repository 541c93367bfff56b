//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::fft::transform_2d;
use super::tape::{BackwardFn, Tape};
use super::{binary_map, reduce_to_shape, strides, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Epsilon inside [`Var::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn fast_tanh<T: Scalar>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + fast_tanh(u))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    let t = fast_tanh(u);
    let du = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Splits a shape at `axis` into (outer, extent, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn record(self, value: impl Into<Rc<Tensor<T>>>, inputs: &[Var<'t, T>], bw: BackwardFn<T>) -> Var<'t, T> {
        self.tape.record(value, inputs, bw)
    }

    /// Pointwise map whose derivative is `df(x, y)` with `y = f(x)`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_saved = Rc::clone(&y);
        self.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y_saved.data()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_map(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                vec![need[0].then(|| reduce_to_shape(g, &sa)), need[1].then(|| reduce_to_shape(g, &sb))]
            }),
        ))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_map(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_map(&a, &b, |x, y| x * y)?;
        Ok(self.record(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    reduce_to_shape(&binary_map(g, &b, |u, y| u * y).expect("forward shapes"), a.shape())
                });
                let gb = need[1].then(|| {
                    reduce_to_shape(&binary_map(g, &a, |u, x| u * x).expect("forward shapes"), b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = Rc::new(binary_map(&a, &b, |x, y| x / y)?);
        let saved = Rc::clone(&out);
        Ok(self.record(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    reduce_to_shape(&binary_map(g, &b, |u, y| u / y).expect("forward shapes"), a.shape())
                });
                // d(a/b)/db = -(a/b)/b
                let gb = need[1].then(|| {
                    let t = binary_map(g, &saved, |u, q| -u * q).expect("forward shapes");
                    reduce_to_shape(&binary_map(&t, &b, |v, y| v / y).expect("forward shapes"), b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. `[.., m, k] x [k, n]` treats leading axes as extra rows;
    /// `[b, m, k] x [b, k, n]` multiplies batch-wise.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return dim_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
            }
            let n = sb[1];
            let m = a.numel() / k;
            let mut out = vec![T::zero(); m * n];
            gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
            let mut shape = sa.clone();
            *shape.last_mut().expect("rank >= 2") = n;
            return Ok(self.record(
                Tensor::from_parts(shape, out),
                &[self, rhs],
                Box::new(move |g, need| {
                    let ga = need[0].then(|| {
                        let mut d = vec![T::zero(); m * k];
                        gemm(MatRef::new(g.data(), m, n), MatRef::new(b.data(), k, n).t(), &mut d, false);
                        Tensor::from_parts(sa.clone(), d)
                    });
                    let gb = need[1].then(|| {
                        let mut d = vec![T::zero(); k * n];
                        gemm(MatRef::new(a.data(), m, k).t(), MatRef::new(g.data(), m, n), &mut d, false);
                        Tensor::from_parts(sb.clone(), d)
                    });
                    vec![ga, gb]
                }),
            ));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return dim_err(format!("batched matmul needs [b,m,k] x [b,k,n], got {sa:?} x {sb:?}"));
        }
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.record(
            Tensor::from_parts(vec![batch, m, n], out),
            &[self, rhs],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Tensor::from_parts(sa.clone(), d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n),
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    Tensor::from_parts(sb.clone(), d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · w + b` over the last axis.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", x.shape()));
        }
        let orig = x.shape().to_vec();
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        Ok(self.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("invalid permutation {axes:?} for rank {rank}"));
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_data(&x, axes);
        Ok(self.record(out, &[self], Box::new(move |g, _| vec![Some(permute_data(g, &inverse))])))
    }

    pub fn transpose_last2(self) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        if rank < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(
            Tensor::from_parts(out_shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat shape mismatch: {base:?} vs {s:?}"));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        Ok(first.record(
            Tensor::from_parts(out_shape, data),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                extents
                    .iter()
                    .zip(need)
                    .map(|(&e, &needed)| {
                        let start = offset;
                        offset += e;
                        needed.then(|| {
                            let mut d = Vec::with_capacity(outer * e * inner);
                            for o in 0..outer {
                                let b = o * total * inner + start * inner;
                                d.extend_from_slice(&g.data()[b..b + e * inner]);
                            }
                            let mut s = base.clone();
                            s[axis] = e;
                            Tensor::from_parts(s, d)
                        })
                    })
                    .collect()
            }),
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sums over `axis`, dropping it unless `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return dim_err(format!("sum axis {axis} out of range for {shape:?}"));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(self.record(
            Tensor::from_parts(out_shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    for _ in 0..extent {
                        d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / T::lit(n as f64)))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let saved = Rc::clone(&y);
        self.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d_in = vec![T::zero(); g.numel()];
                for ((gi, yi), di) in g.data().chunks(d).zip(saved.data().chunks(d)).zip(d_in.chunks_mut(d)) {
                    let dot: T = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                    for ((o, &a), &b) in di.iter_mut().zip(gi).zip(yi) {
                        *o = b * (a - dot);
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d_in))]
            }),
        )
    }

    pub fn log_softmax_lastdim(self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let saved = Rc::clone(&y);
        self.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d_in = vec![T::zero(); g.numel()];
                for ((gi, yi), di) in g.data().chunks(d).zip(saved.data().chunks(d)).zip(d_in.chunks_mut(d)) {
                    let total: T = gi.iter().copied().sum();
                    for ((o, &a), &b) in di.iter_mut().zip(gi).zip(yi) {
                        *o = a - b.exp() * total;
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d_in))]
            }),
        )
    }

    /// `log Σ exp` over the last axis, which is removed.
    pub fn logsumexp_lastdim(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = Vec::with_capacity(x.numel() / d);
        let mut weights = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            out.push(lse);
            weights.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let d_in = weights
                    .chunks(d)
                    .zip(g.data())
                    .flat_map(|(w, &gi)| w.iter().map(move |&p| p * gi))
                    .collect();
                vec![Some(Tensor::from_parts(shape.clone(), d_in))]
            }),
        )
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped like the last axis).
    pub fn layernorm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layernorm of a scalar".into()))?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != d || bv.numel() != d {
            return dim_err(format!("layernorm affine params must have {d} entries"));
        }
        let eps = T::lit(LAYERNORM_EPS);
        let dn = T::lit(d as f64);
        let rows = x.numel() / d;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let y: Vec<T> = xhat
            .chunks(d)
            .flat_map(|r| r.iter().zip(gv.data().iter().zip(bv.data())).map(|(&h, (&g, &b))| h * g + b))
            .collect();
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        Ok(self.record(
            Tensor::from_parts(shape.clone(), y),
            &[self, gain, bias],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut out = Vec::with_capacity(g.numel());
                    for ((gr, hr), &is) in g.data().chunks(d).zip(xhat.chunks(d)).zip(&inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &w)| a * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &h)| a * h).sum::<T>() / dn;
                        out.extend(dh.iter().zip(hr).map(|(&a, &h)| is * (a - mean_dh - h * mean_dh_h)));
                    }
                    Tensor::from_parts(shape.clone(), out)
                });
                let gg = need[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((a, &gi), &h) in acc.iter_mut().zip(gr).zip(hr) {
                            *a += gi * h;
                        }
                    }
                    Tensor::from_parts(gshape.clone(), acc)
                });
                let gb = need[2].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for gr in g.data().chunks(d) {
                        for (a, &gi) in acc.iter_mut().zip(gr) {
                            *a += gi;
                        }
                    }
                    Tensor::from_parts(bshape.clone(), acc)
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    // ---- spectral -------------------------------------------------------

    /// 2-D DFT over the last two axes of a real tensor. The result gains a
    /// trailing axis of size 2 holding (real, imaginary).
    pub fn fft2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return dim_err("fft2 needs rank >= 2");
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = x.numel() / (h * w);
        let mut out = Vec::with_capacity(x.numel() * 2);
        let mut im = vec![T::zero(); h * w];
        for p in 0..planes {
            let mut re = x.data()[p * h * w..(p + 1) * h * w].to_vec();
            im.iter_mut().for_each(|v| *v = T::zero());
            transform_2d(&mut re, &mut im, h, w, false);
            for i in 0..h * w {
                out.push(re[i]);
                out.push(im[i]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.push(2);
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                // Adjoint of the unnormalized forward DFT is (h·w)·Re(IDFT(g)).
                let hw = T::lit((h * w) as f64);
                let mut d = Vec::with_capacity(planes * h * w);
                for p in 0..planes {
                    let slab = &g.data()[p * h * w * 2..(p + 1) * h * w * 2];
                    let mut re: Vec<T> = slab.iter().step_by(2).copied().collect();
                    let mut im: Vec<T> = slab.iter().skip(1).step_by(2).copied().collect();
                    transform_2d(&mut re, &mut im, h, w, true);
                    d.extend(re.into_iter().map(|v| v * hw));
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Inverse of [`Var::fft2`], keeping only the real part of the result.
    pub fn ifft2_real(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 3 || shape[shape.len() - 1] != 2 {
            return dim_err(format!("ifft2_real expects [.., h, w, 2], got {shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 3], shape[shape.len() - 2]);
        let planes = x.numel() / (h * w * 2);
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            let slab = &x.data()[p * h * w * 2..(p + 1) * h * w * 2];
            let mut re: Vec<T> = slab.iter().step_by(2).copied().collect();
            let mut im: Vec<T> = slab.iter().skip(1).step_by(2).copied().collect();
            transform_2d(&mut re, &mut im, h, w, true);
            out.extend(re);
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                // Adjoint: forward DFT of the real gradient, scaled by 1/(h·w).
                let inv = T::one() / T::lit((h * w) as f64);
                let mut d = Vec::with_capacity(planes * h * w * 2);
                let mut im = vec![T::zero(); h * w];
                for p in 0..planes {
                    let mut re = g.data()[p * h * w..(p + 1) * h * w].to_vec();
                    im.iter_mut().for_each(|v| *v = T::zero());
                    transform_2d(&mut re, &mut im, h, w, false);
                    for i in 0..h * w {
                        d.push(re[i] * inv);
                        d.push(im[i] * inv);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }
}

impl<T: Scalar> Tape<T> {
    /// Scalar constant on this tape.
    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }
}

/// Scalar helpers shared with the plain (non-tape) kernels.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_fwd(x)
}

pub fn softplus_value<T: Scalar>(x: T) -> T {
    softplus(x)
}
