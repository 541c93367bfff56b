use super::{strides, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Numpy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

/// Visits every output offset together with the matching offsets in two broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn binary_map<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let n: usize = out.iter().product();
    // Trailing-suffix broadcast (bias over rows) is the hot path.
    if a.shape == out && out.ends_with(&b.shape) {
        let m = b.data.len();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if b.data.len() == 1 {
        let y = b.data[0];
        let mut data = Vec::with_capacity(n);
        let sa = view_strides(&a.shape, &out);
        let zero = vec![0; out.len()];
        for_each_broadcast(&out, &sa, &zero, |_, ia, _| data.push(f(a.data[ia], y)));
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = view_strides(&a.shape, &out);
    let sb = view_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(n);
    for_each_broadcast(&out, &sa, &sb, |_, ia, ib| data.push(f(a.data[ia], b.data[ib])));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` over the axes along which `shape` was broadcast to produce `g`.
pub(crate) fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape == shape {
        return g.clone();
    }
    let mut acc = vec![T::zero(); shape.iter().product()];
    if g.shape.ends_with(shape) {
        let m = acc.len();
        for (i, &x) in g.data.iter().enumerate() {
            acc[i % m] += x;
        }
    } else {
        let sa = view_strides(shape, &g.shape);
        let zero = vec![0; g.shape.len()];
        for_each_broadcast(&g.shape, &sa, &zero, |o, ia, _| acc[ia] += g.data[o]);
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar-loop reference: decode each output coordinate and clamp broadcast axes.
    fn reference_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let out = broadcast_shape(a.shape(), b.shape()).unwrap();
        let n: usize = out.iter().product();
        let pick = |t: &Tensor<f64>, coord: &[usize]| {
            let pad = coord.len() - t.rank();
            let idx: Vec<usize> = t
                .shape()
                .iter()
                .enumerate()
                .map(|(i, &d)| if d == 1 { 0 } else { coord[i + pad] })
                .collect();
            if idx.is_empty() {
                t.data()[0]
            } else {
                t.get(&idx)
            }
        };
        let mut data = Vec::new();
        for flat in 0..n {
            let mut coord = vec![0; out.len()];
            let mut r = flat;
            for ax in (0..out.len()).rev() {
                coord[ax] = r % out[ax];
                r /= out[ax];
            }
            data.push(pick(a, &coord) + 10.0 * pick(b, &coord));
        }
        Tensor::new(&out, data).unwrap()
    }

    #[test]
    fn broadcast_matches_scalar_loop_reference() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3, 4], &[4]),
            (&[2, 3, 4], &[3, 1]),
            (&[2, 1, 4], &[1, 3, 1]),
            (&[5], &[1]),
            (&[1], &[2, 2]),
            (&[3, 1, 2], &[3, 4, 2]),
        ];
        for (sa, sb) in cases {
            let a = Tensor::<f64>::from_fn(sa, |i| i as f64 * 0.5 - 1.0);
            let b = Tensor::<f64>::from_fn(sb, |i| i as f64 + 0.25);
            let fast = binary_map(&a, &b, |x, y| x + 10.0 * y).unwrap();
            assert_eq!(fast, reference_add(&a, &b), "{sa:?} + {sb:?}");
        }
    }

    #[test]
    fn incompatible_shapes_rejected() {
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_inverts_broadcast_by_summing() {
        let g = Tensor::<f64>::ones(&[2, 3, 4]);
        let r = reduce_to_shape(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&x| x == 8.0));
        let r = reduce_to_shape(&g, &[4]);
        assert!(r.data().iter().all(|&x| x == 6.0));
    }
}
