//! Difference convolutions and the global high-frequency branch.
//!
//! Every kernel runs in two stages: a fixed linear gather turns each 3x3
//! neighbourhood into nine difference features (one per tap), then a learned
//! `[out, in, 3, 3]` weight contracts them. Vanilla convolution is the special
//! case whose features are the raw pixels.

use crate::error::{Error, Result};
use crate::{Tape, Tensor, Var};

/// Clockwise ring around the centre, starting top-left.
pub const RING: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

pub const TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiffKind {
    Vanilla,
    /// Angular: differences between clockwise-adjacent ring pixels.
    Adc,
    /// Central: each window pixel minus the centre.
    Cdc,
    /// Radial: outer ring (distance 2) minus inner ring along each direction.
    Rdc,
    /// Second order: `x_i + x_opposite - 2 x_c` per direction.
    Soc,
}

impl DiffKind {
    /// The four difference kernels in adapter branch order.
    pub const DIFFERENCE: [DiffKind; 4] = [DiffKind::Adc, DiffKind::Cdc, DiffKind::Rdc, DiffKind::Soc];

    pub fn name(self) -> &'static str {
        match self {
            DiffKind::Vanilla => "vanilla",
            DiffKind::Adc => "adc",
            DiffKind::Cdc => "cdc",
            DiffKind::Rdc => "rdc",
            DiffKind::Soc => "soc",
        }
    }

    /// Reflect padding needed on each side.
    pub fn padding(self) -> usize {
        if self == DiffKind::Rdc {
            2
        } else {
            1
        }
    }

    /// For each of the nine taps (row-major over the 3x3 window), the
    /// `(dy, dx, coefficient)` terms whose sum forms that tap's feature.
    pub fn stencil(self) -> [Vec<(isize, isize, f64)>; TAPS] {
        let mut taps: [Vec<(isize, isize, f64)>; TAPS] = Default::default();
        let tap = |(dy, dx): (isize, isize)| ((dy + 1) * 3 + dx + 1) as usize;
        match self {
            DiffKind::Vanilla => {
                for (t, terms) in taps.iter_mut().enumerate() {
                    terms.push((t as isize / 3 - 1, t as isize % 3 - 1, 1.0));
                }
            }
            DiffKind::Cdc => {
                for &(dy, dx) in &RING {
                    taps[tap((dy, dx))] = vec![(dy, dx, 1.0), (0, 0, -1.0)];
                }
            }
            DiffKind::Adc => {
                for i in 0..8 {
                    let (a, b) = (RING[i], RING[(i + 1) % 8]);
                    taps[tap(a)] = vec![(a.0, a.1, 1.0), (b.0, b.1, -1.0)];
                }
            }
            DiffKind::Rdc => {
                for &(dy, dx) in &RING {
                    taps[tap((dy, dx))] = vec![(2 * dy, 2 * dx, 1.0), (dy, dx, -1.0)];
                }
            }
            DiffKind::Soc => {
                for &(dy, dx) in &RING {
                    taps[tap((dy, dx))] = vec![(dy, dx, 1.0), (-dy, -dx, 1.0), (0, 0, -2.0)];
                }
            }
        }
        taps
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

fn check_grid(kind: DiffKind, h: usize, w: usize) -> Result<()> {
    let need = kind.padding() + 1;
    if h < need || w < need {
        return Err(Error::Dimension(format!(
            "{} needs spatial size of at least {need}, got {h}x{w}",
            kind.name()
        )));
    }
    Ok(())
}

/// One offset term of the gather, flattened for the hot loop.
struct Term {
    tap: usize,
    dy: isize,
    dx: isize,
    coef: f64,
}

fn terms(kind: DiffKind) -> Vec<Term> {
    kind.stencil()
        .into_iter()
        .enumerate()
        .flat_map(|(tap, ts)| ts.into_iter().map(move |(dy, dx, coef)| Term { tap, dy, dx, coef }))
        .collect()
}

/// Applies the gather (or its transpose) between `[b, h, w, c]` pixels and
/// `[b, h, w, c·9]` features.
fn gather(kind: DiffKind, b: usize, h: usize, w: usize, c: usize, src: &[f64], dst: &mut [f64], transpose: bool) {
    let terms = terms(kind);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let feat_base = ((n * h + y) * w + x) * c * TAPS;
                for t in &terms {
                    let py = reflect(y as isize + t.dy, h);
                    let px = reflect(x as isize + t.dx, w);
                    let pix_base = ((n * h + py) * w + px) * c;
                    for ch in 0..c {
                        let f = feat_base + ch * TAPS + t.tap;
                        if transpose {
                            dst[pix_base + ch] += t.coef * src[f];
                        } else {
                            dst[f] += t.coef * src[pix_base + ch];
                        }
                    }
                }
            }
        }
    }
}

fn unpack4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Dimension(format!("expected [b, h, w, c], got {shape:?}"))),
    }
}

/// First stage on the tape: `[b, h, w, c]` to difference features `[b, h, w, c·9]`,
/// laid out channel-major then tap.
pub fn diff_unfold<'t>(x: Var<'t>, kind: DiffKind) -> Result<Var<'t>> {
    let (b, h, w, c) = unpack4(&x.shape())?;
    check_grid(kind, h, w)?;
    let xv = x.value();
    let mut out = vec![0.0; b * h * w * c * TAPS];
    gather(kind, b, h, w, c, xv.data(), &mut out, false);
    let value = Tensor::new(&[b, h, w, c * TAPS], out)?;
    Ok(x.tape().record(
        value,
        &[x],
        Box::new(move |g, _| {
            let mut d = vec![0.0; b * h * w * c];
            gather(kind, b, h, w, c, g.data(), &mut d, true);
            vec![Some(Tensor::new(&[b, h, w, c], d).expect("input shape"))]
        }),
    ))
}

/// Full kernel on the tape: `x` is `[b, h, w, c_in]`, `weight` is `[c_out, c_in, 3, 3]`.
pub fn diff_conv<'t>(x: Var<'t>, weight: Var<'t>, kind: DiffKind) -> Result<Var<'t>> {
    let ws = weight.shape();
    let xs = x.shape();
    let [c_out, c_in, 3, 3] = ws[..] else {
        return Err(Error::Dimension(format!("kernel weight must be [out, in, 3, 3], got {ws:?}")));
    };
    if xs.last() != Some(&c_in) {
        return Err(Error::Dimension(format!("input {xs:?} does not have {c_in} channels")));
    }
    let feats = diff_unfold(x, kind)?;
    let w = weight.reshape(&[c_out, c_in * TAPS])?.transpose_last2()?;
    feats.matmul(w)
}

/// Kernel kind plus its `[out, in, 3, 3]` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffConvKernel {
    kind: DiffKind,
    pub weights: Tensor,
}

impl DiffConvKernel {
    pub fn new(kind: DiffKind, weights: Tensor) -> Result<Self> {
        match weights.shape() {
            [_, _, 3, 3] if weights.is_finite() => Ok(DiffConvKernel { kind, weights }),
            [_, _, 3, 3] => Err(Error::Input("kernel weights must be finite".into())),
            s => Err(Error::Dimension(format!("kernel weight must be [out, in, 3, 3], got {s:?}"))),
        }
    }

    pub fn kind(&self) -> DiffKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Applies the kernel to an `h x w x c_in` grid, giving `h x w x c_out`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, c] = x.shape()[..] else {
            return Err(Error::Dimension(format!("expected [h, w, c], got {:?}", x.shape())));
        };
        let tape = Tape::new();
        let xv = tape.constant(x.reshape(&[1, h, w, c])?);
        let wv = tape.constant(self.weights.clone());
        let y = diff_conv(xv, wv, self.kind)?;
        y.value().reshape(&[h, w, self.out_channels()])
    }

    fn apply_as(&self, kind: DiffKind, x: &Tensor) -> Result<Tensor> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "{} kernel used as {}",
                self.kind.name(),
                kind.name()
            )));
        }
        self.apply(x)
    }
}

pub fn conv_vanilla(x: &Tensor, k: &DiffConvKernel) -> Result<Tensor> {
    k.apply_as(DiffKind::Vanilla, x)
}

pub fn conv_adc(x: &Tensor, k: &DiffConvKernel) -> Result<Tensor> {
    k.apply_as(DiffKind::Adc, x)
}

pub fn conv_cdc(x: &Tensor, k: &DiffConvKernel) -> Result<Tensor> {
    k.apply_as(DiffKind::Cdc, x)
}

pub fn conv_rdc(x: &Tensor, k: &DiffConvKernel) -> Result<Tensor> {
    k.apply_as(DiffKind::Rdc, x)
}

pub fn conv_soc(x: &Tensor, k: &DiffConvKernel) -> Result<Tensor> {
    k.apply_as(DiffKind::Soc, x)
}

/// Binary mask over the centred spectrum: 0 within `d_f` of DC, 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct HighPassMask {
    pub h: usize,
    pub w: usize,
    pub d_f: usize,
    /// Row-major over centred frequency coordinates (DC at `(h/2, w/2)`).
    pub mask: Vec<f64>,
}

impl HighPassMask {
    /// Mask value at centred coordinates.
    pub fn centered(&self, u: usize, v: usize) -> f64 {
        self.mask[u * self.w + v]
    }

    /// The mask rearranged into unshifted DFT bin order.
    pub fn unshifted(&self) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (su, sv) = ((u + h / 2) % h, (v + w / 2) % w);
                out[u * w + v] = self.mask[su * w + sv];
            }
        }
        out
    }

    /// `1 - mask`.
    pub fn complement(&self) -> HighPassMask {
        HighPassMask { mask: self.mask.iter().map(|m| 1.0 - m).collect(), ..self.clone() }
    }

    pub fn zeroed_bins(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0.0).count()
    }
}

pub fn build_highpass_mask(h: usize, w: usize) -> HighPassMask {
    let d_f = h.min(w) / 4;
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let r2 = (d_f * d_f) as f64;
    let mask = (0..h * w)
        .map(|i| {
            let du = (i / w) as f64 - ch;
            let dv = (i % w) as f64 - cw;
            if du * du + dv * dv <= r2 {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    HighPassMask { h, w, d_f, mask }
}

/// Tape version of the spectral filter on `[b, h, w, c]`, masking each channel's spectrum.
pub fn spectral_filter<'t>(x: Var<'t>, mask: &HighPassMask) -> Result<Var<'t>> {
    let (_, h, w, _) = unpack4(&x.shape())?;
    if (h, w) != (mask.h, mask.w) {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, features are {h}x{w}",
            mask.h, mask.w
        )));
    }
    let m = x.tape().constant(Tensor::new(&[h, w, 1], mask.unshifted())?);
    let spec = x.permute(&[0, 3, 1, 2])?.fft2()?;
    spec.mul(m)?.ifft2_real()?.permute(&[0, 2, 3, 1])
}

/// Keeps the frequencies the mask passes, per channel of an `h x w x c` grid.
pub fn gfc_filter(x: &Tensor, mask: &HighPassMask) -> Result<Tensor> {
    let [h, w, c] = x.shape()[..] else {
        return Err(Error::Dimension(format!("expected [h, w, c], got {:?}", x.shape())));
    };
    let tape = Tape::new();
    let xv = tape.constant(x.reshape(&[1, h, w, c])?);
    spectral_filter(xv, mask)?.value().reshape(&[h, w, c])
}

/// Complementary low-pass part, so `gfc_filter(x) + lowpass(x) == x`.
pub fn lowpass_filter(x: &Tensor, mask: &HighPassMask) -> Result<Tensor> {
    gfc_filter(x, &mask.complement())
}
