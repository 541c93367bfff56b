//! 2-D discrete Fourier transforms on small grids.
//!
//! Power-of-two lengths use an iterative radix-2 transform; any other length
//! falls back to the direct O(n²) DFT. Forward transforms are unnormalized and
//! inverse transforms carry the `1/(h·w)` factor.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Complex `h x w` grid stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid<T> {
    pub h: usize,
    pub w: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn new(h: usize, w: usize, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        if re.len() != h * w || im.len() != h * w {
            return dim_err(format!("complex grid {h}x{w} needs {} values per plane", h * w));
        }
        Ok(ComplexGrid { h, w, re, im })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexGrid { h, w, re: vec![T::zero(); h * w], im: vec![T::zero(); h * w] }
    }

    pub fn norm_sqr_sum(&self) -> T {
        self.re.iter().zip(&self.im).map(|(&a, &b)| a * a + b * b).sum()
    }
}

/// Forward 2-D transform of a real row-major `h x w` grid.
pub fn fft2<T: Scalar>(x: &[T], h: usize, w: usize) -> Result<ComplexGrid<T>> {
    if x.len() != h * w {
        return dim_err(format!("fft2: {} values for a {h}x{w} grid", x.len()));
    }
    let mut re = x.to_vec();
    let mut im = vec![T::zero(); h * w];
    transform_2d(&mut re, &mut im, h, w, false);
    Ok(ComplexGrid { h, w, re, im })
}

/// Inverse 2-D transform; returns the full complex result.
pub fn ifft2_complex<T: Scalar>(spec: &ComplexGrid<T>) -> ComplexGrid<T> {
    let mut out = spec.clone();
    transform_2d(&mut out.re, &mut out.im, spec.h, spec.w, true);
    out
}

/// Inverse 2-D transform keeping the real part.
pub fn ifft2<T: Scalar>(spec: &ComplexGrid<T>) -> Vec<T> {
    ifft2_complex(spec).re
}

/// `(cos, sin)` of `sign·2πk/n` for `k < n`.
fn twiddles<T: Scalar>(n: usize, inverse: bool) -> Vec<(T, T)> {
    let sign = if inverse { T::one() } else { -T::one() };
    let base = sign * T::TAU() / T::lit(n as f64);
    (0..n)
        .map(|k| {
            let (s, c) = (base * T::lit(k as f64)).sin_cos();
            (c, s)
        })
        .collect()
}

/// In-place 2-D transform of one `h x w` plane pair (rows, then columns).
pub(crate) fn transform_2d<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let mut buf_re = vec![T::zero(); h.max(w)];
    let mut buf_im = vec![T::zero(); h.max(w)];
    let tw_w = twiddles(w, inverse);
    let tw_h = if h == w { tw_w.clone() } else { twiddles(h, inverse) };
    for r in 0..h {
        let row = r * w..(r + 1) * w;
        transform_1d(&mut re[row.clone()], &mut im[row], &tw_w, &mut buf_re, &mut buf_im);
    }
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + c];
            col_im[r] = im[r * w + c];
        }
        transform_1d(&mut col_re, &mut col_im, &tw_h, &mut buf_re, &mut buf_im);
        for r in 0..h {
            re[r * w + c] = col_re[r];
            im[r * w + c] = col_im[r];
        }
    }
    if inverse {
        let scale = T::one() / T::lit((h * w) as f64);
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v *= scale;
        }
    }
}

/// Unnormalized 1-D transform with a precomputed twiddle table.
fn transform_1d<T: Scalar>(re: &mut [T], im: &mut [T], tw: &[(T, T)], tmp_re: &mut [T], tmp_im: &mut [T]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, tw);
    } else {
        direct_dft(re, im, tw, &mut tmp_re[..n], &mut tmp_im[..n]);
    }
}

fn direct_dft<T: Scalar>(re: &mut [T], im: &mut [T], tw: &[(T, T)], out_re: &mut [T], out_im: &mut [T]) {
    let n = re.len();
    for k in 0..n {
        let (mut sr, mut si) = (T::zero(), T::zero());
        for j in 0..n {
            let (c, s) = tw[(k * j) % n];
            sr += re[j] * c - im[j] * s;
            si += re[j] * s + im[j] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    re.copy_from_slice(out_re);
    im.copy_from_slice(out_im);
}

fn radix2<T: Scalar>(re: &mut [T], im: &mut [T], tw: &[(T, T)]) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (c, s) = tw[k * stride];
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len *= 2;
    }
}

/// Maps centered (fftshift) coordinates to natural FFT order: the value at
/// centered `(u, v)` lives at natural `((u + h - h/2) % h, (v + w - w/2) % w)`.
pub fn ifftshift_index(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    ((u + h - h / 2) % h, (v + w - w / 2) % w)
}
