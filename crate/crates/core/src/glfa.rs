//! Global-local forgery-aware adaptation: five-branch forgery features turned
//! into query/key/value offsets for a frozen attention layer.

use rand::Rng;

use crate::conv::{build_highpass_mask, diff_conv, spectral_filter, DiffKind, HighPassMask};
use crate::error::{Error, Result};
use crate::nn::{split_heads, Attention, Binder, Init, Linear, ParamId, Qkv, Scope, TransformerBlock};
use crate::{Tensor, Var};

/// Number of branches concatenated by the adapter (four difference kernels plus GFC).
pub const BRANCHES: usize = 5;

#[derive(Clone, Debug)]
pub struct GlfaAdapter {
    pub dim: usize,
    pub r: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub down: Linear,
    /// Weights `[D/r, D/r, 3, 3]` for ADC, CDC, RDC, SOC in that order.
    pub kernels: [ParamId; 4],
    pub mask: HighPassMask,
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub proj_v: Linear,
}

/// Offsets with exactly the head-split shape of the attention inputs.
pub struct Offsets<'t> {
    pub dq: Var<'t>,
    pub dk: Var<'t>,
    pub dv: Var<'t>,
}

impl GlfaAdapter {
    /// Projections start at zero, so a fresh adapter leaves attention unchanged.
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, dim: usize, r: usize, heads: usize, grid: (usize, usize)) -> Result<Self> {
        if r == 0 || dim % r != 0 {
            return Err(Error::Config(format!("down-sampling factor {r} must divide dim {dim}")));
        }
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let c = dim / r;
        let kstd = (1.0 / (9 * c) as f64).sqrt();
        let down = Linear::new(s, "down", dim, c, Init::Xavier);
        let kernels = DiffKind::DIFFERENCE.map(|k| s.param(&format!("{}.w", k.name()), &[c, c, 3, 3], Init::Normal(kstd)));
        Ok(GlfaAdapter {
            dim,
            r,
            heads,
            grid,
            down,
            kernels,
            mask: build_highpass_mask(grid.0, grid.1),
            proj_q: Linear::new(s, "proj_q", BRANCHES * c, dim, Init::Zeros),
            proj_k: Linear::new(s, "proj_k", BRANCHES * c, dim, Init::Zeros),
            proj_v: Linear::new(s, "proj_v", BRANCHES * c, dim, Init::Zeros),
        })
    }

    pub fn channels(&self) -> usize {
        self.dim / self.r
    }

    /// `[b, N + 1, D]` normalized tokens to `[b, h, w, 5D/r]` forgery features;
    /// the classification token is dropped first.
    pub fn features<'t>(&self, p: &Binder<'t, '_>, tokens: Var<'t>) -> Result<Var<'t>> {
        let s = tokens.shape();
        let [b, n1, d] = s[..] else {
            return Err(Error::Dimension(format!("tokens must be [b, n, d], got {s:?}")));
        };
        let (h, w) = self.grid;
        if n1 != h * w + 1 {
            return Err(Error::Contract(format!(
                "{} patch tokens do not fill a {h}x{w} grid",
                n1.saturating_sub(1)
            )));
        }
        if d != self.dim {
            return Err(Error::Dimension(format!("adapter dim {} got tokens of dim {d}", self.dim)));
        }
        let grid = tokens.narrow(1, 1, h * w)?.reshape(&[b, h, w, d])?;
        let down = self.down.forward(p, grid)?;
        let mut branches = Vec::with_capacity(BRANCHES);
        for (kind, &w) in DiffKind::DIFFERENCE.iter().zip(&self.kernels) {
            branches.push(diff_conv(down, p.var(w), *kind)?);
        }
        branches.push(spectral_filter(down, &self.mask)?);
        Ok(Var::concat(&branches, 3)?.gelu())
    }

    /// Token-wise projections of `[b, h, w, 5D/r]` features to head-split offsets `[b·heads, N, D/heads]`.
    pub fn project_offsets_multihead<'t>(&self, p: &Binder<'t, '_>, features: Var<'t>) -> Result<Offsets<'t>> {
        let s = features.shape();
        let [b, h, w, c] = s[..] else {
            return Err(Error::Dimension(format!("features must be [b, h, w, c], got {s:?}")));
        };
        let flat = features.reshape(&[b, h * w, c])?;
        let proj = |l: &Linear| -> Result<Var<'t>> { split_heads(l.forward(p, flat)?, self.heads) };
        Ok(Offsets { dq: proj(&self.proj_q)?, dk: proj(&self.proj_k)?, dv: proj(&self.proj_v)? })
    }
}

/// Prepends a zero row for the classification token.
fn pad_class_row<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let zeros = x.tape().constant(Tensor::zeros(&[s[0], 1, s[2]]));
    Var::concat(&[zeros, x], 1)
}

/// Attention with adapter offsets added to the frozen projections. `normed`
/// is the block's pre-norm output `[b, N + 1, D]`; the classification token
/// attends with zero offsets.
pub fn glfa_forward<'t>(
    p: &Binder<'t, '_>,
    adapter: &GlfaAdapter,
    attn: &Attention,
    normed: Var<'t>,
) -> Result<Var<'t>> {
    let qkv = attn.project(p, normed, normed)?;
    let off = adapter.project_offsets_multihead(p, adapter.features(p, normed)?)?;
    let shifted = Qkv {
        q: qkv.q.add(pad_class_row(off.dq)?)?,
        k: qkv.k.add(pad_class_row(off.dk)?)?,
        v: qkv.v.add(pad_class_row(off.dv)?)?,
    };
    attn.attend(p, &shifted)
}

/// One transformer block, with the adapter wrapped around its attention when given.
pub fn block_forward<'t>(
    p: &Binder<'t, '_>,
    block: &TransformerBlock,
    adapter: Option<&GlfaAdapter>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let Some(adapter) = adapter else {
        return block.forward(p, x);
    };
    let h = block.ln1.forward(p, x)?;
    let x = x.add(glfa_forward(p, adapter, &block.attn, h)?)?;
    block.ffn(p, x)
}
