//! Variational Bayesian forgery estimation: Gaussian latent encoders, the
//! divergences between them, the factorized ELBO and the latent adaptation
//! back into the token streams.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Attention, Binder, Init, LayerNorm, Linear, ParamId, Scope, TransformerBlock};
use crate::{Tape, Tensor, Var};

/// Encoders clamp log-variances into this range.
pub const LOG_VAR_RANGE: (f64, f64) = (-20.0, 20.0);

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

// ---- plain distributions --------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Dimension(format!(
                "mean has {} entries, log_var {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::Input("gaussian parameters must be finite".into()));
        }
        Ok(DiagonalGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * (ln_2pi() + lv + (xi - m).powi(2) * (-lv).exp()))
            .sum()
    }

    /// `mean + exp(log_var / 2) * eps`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }
}

/// Draws one reparameterized sample.
pub fn sample_reparam<R: Rng + ?Sized>(g: &DiagonalGaussian, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.sample(StandardNormal)).collect();
    g.transform(&eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<DiagonalGaussian>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<DiagonalGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::Input("mixture needs one weight per component".into()));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::Dimension("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("mixture weights {weights:?} must be nonnegative and sum to 1")));
        }
        Ok(GaussianMixture { components, weights })
    }

    pub fn single(g: DiagonalGaussian) -> Self {
        GaussianMixture { components: vec![g], weights: vec![1.0] }
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<DiagonalGaussian>) -> Result<Self> {
        let k = components.len();
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, w)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension(format!("KL between dims {} and {}", q.dim(), p.dim())));
    }
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[d], q.log_var[d], p.mean[d], p.log_var[d]);
        kl += 0.5 * (lp - lq) + ((lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp())) - 0.5;
    }
    Ok(kl)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Jensen-Shannon divergence between mixtures in the component-weighted form
/// `1/2 Σ π^P_i KL(P_i || M) + 1/2 Σ π^Q_j KL(Q_j || M)`, `M = (P + Q) / 2`,
/// from caller-supplied standard-normal draws (`noise_p[i]` are the draws for
/// `P_i`). Each KL is the sample mean of `log P_i(x) - log M(x)`.
pub fn js_divergence_from_noise(
    p: &GaussianMixture,
    q: &GaussianMixture,
    noise_p: &[Vec<Vec<f64>>],
    noise_q: &[Vec<Vec<f64>>],
) -> Result<Estimate> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension("JS between mixtures of different dimension".into()));
    }
    if noise_p.len() != p.components.len() || noise_q.len() != q.components.len() {
        return Err(Error::Input("need one noise set per component".into()));
    }
    let log_m = |x: &[f64]| log_sum_exp(&[p.log_density(x), q.log_density(x)]) - LN_2;
    let mut value = 0.0;
    let mut var = 0.0;
    for (mix, noise) in [(p, noise_p), (q, noise_q)] {
        for ((comp, &w), draws) in mix.components.iter().zip(&mix.weights).zip(noise) {
            if draws.is_empty() {
                return Err(Error::Input("JS estimate needs at least one sample".into()));
            }
            let vals: Vec<f64> = draws
                .iter()
                .map(|eps| {
                    let x = comp.transform(eps);
                    comp.log_density(&x) - log_m(&x)
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let s2 = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            value += 0.5 * w * mean;
            var += 0.25 * w * w * s2 / n;
        }
    }
    Ok(Estimate { value, std_err: var.sqrt() })
}

/// Standard-normal draws shaped for [`js_divergence_from_noise`].
pub fn draw_noise<R: Rng + ?Sized>(m: &GaussianMixture, n: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    m.components
        .iter()
        .map(|c| (0..n).map(|_| (0..c.dim()).map(|_| rng.sample(StandardNormal)).collect()).collect())
        .collect()
}

pub fn js_divergence_mc<R: Rng + ?Sized>(
    p: &GaussianMixture,
    q: &GaussianMixture,
    n_samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::Input("JS estimate needs at least one sample".into()));
    }
    let np = draw_noise(p, n_samples, rng);
    let nq = draw_noise(q, n_samples, rng);
    js_divergence_from_noise(p, q, &np, &nq)
}

// ---- tape distributions ----------------------------------------------------

/// Batched diagonal Gaussian on the tape, `mean` and `log_var` both `[b, D]`.
#[derive(Clone, Copy)]
pub struct GaussVars<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> GaussVars<'t> {
    /// Row `i` as a plain Gaussian.
    pub fn row(&self, i: usize) -> DiagonalGaussian {
        let (m, l) = (self.mean.value(), self.log_var.value());
        let d = m.shape()[1];
        DiagonalGaussian {
            mean: m.data()[i * d..(i + 1) * d].to_vec(),
            log_var: l.data()[i * d..(i + 1) * d].to_vec(),
        }
    }

    /// `mean + exp(log_var / 2) * eps` for `eps` of shape `[.., b, D]`.
    pub fn reparam(&self, eps: Var<'t>) -> Result<Var<'t>> {
        self.mean.add(self.log_var.scale(0.5).exp().mul(eps)?)
    }

    /// Log density of `x` (`[.., b, D]`), summed over the last axis.
    pub fn log_density(&self, x: Var<'t>) -> Result<Var<'t>> {
        let rank = x.shape().len();
        let sq = x.sub(self.mean)?.square().mul(self.log_var.neg().exp())?;
        Ok(sq.add(self.log_var)?.add_scalar(ln_2pi()).sum_axis(rank - 1, false)?.scale(-0.5))
    }
}

/// Per-row `KL(q || p)`, shape `[b]`.
pub fn kl_gaussian_var<'t>(q: &GaussVars<'t>, p: &GaussVars<'t>) -> Result<Var<'t>> {
    let ratio = q.log_var.exp().add(q.mean.sub(p.mean)?.square())?.mul(p.log_var.neg().exp())?;
    let per = p.log_var.sub(q.log_var)?.add(ratio)?.add_scalar(-1.0).scale(0.5);
    per.sum_axis(1, false)
}

/// Per-row JS between two single Gaussians from fixed noise `eps_q`, `eps_p`
/// (each `[S, b, D]`); gradients flow through samples and densities.
pub fn js_gaussian_var<'t>(q: &GaussVars<'t>, p: &GaussVars<'t>, eps_q: Var<'t>, eps_p: Var<'t>) -> Result<Var<'t>> {
    let half_kl_to_mix = |own: &GaussVars<'t>, other: &GaussVars<'t>, eps: Var<'t>| -> Result<Var<'t>> {
        let x = own.reparam(eps)?;
        let l_own = own.log_density(x)?;
        let l_other = other.log_density(x)?;
        let s = l_own.shape();
        let pair = Var::concat(&[l_own.reshape(&[s[0], s[1], 1])?, l_other.reshape(&[s[0], s[1], 1])?], 2)?;
        let log_m = pair.logsumexp_lastdim().add_scalar(-LN_2);
        Ok(l_own.sub(log_m)?.mean_axis(0, false)?.scale(0.5))
    };
    half_kl_to_mix(q, p, eps_q)?.add(half_kl_to_mix(p, q, eps_p)?)
}

// ---- encoders ---------------------------------------------------------------

/// Label embedding attended to by the variable token.
#[derive(Clone, Debug)]
pub struct LabelCross {
    pub table: ParamId,
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// Transformer encoder reading a Gaussian off a learnable variable token.
/// With `label` set it is a posterior encoder and requires labels.
#[derive(Clone, Debug)]
pub struct GaussianEncoder {
    pub dim: usize,
    pub var_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub label: Option<LabelCross>,
    pub ln: LayerNorm,
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianEncoder {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, heads: usize, depth: usize, posterior: bool) -> Self {
        let mut s = s.sub(name);
        let var_token = s.param("var_token", &[dim], Init::Normal(0.02));
        let blocks = (0..depth).map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), dim, heads)).collect();
        let label = posterior.then(|| {
            let mut l = s.sub("label");
            LabelCross {
                table: l.param("table", &[2, dim], Init::Normal(1.0)),
                ln: LayerNorm::new(&mut l, "ln", dim),
                attn: Attention::new(&mut l, "cross", dim, heads),
            }
        });
        GaussianEncoder {
            dim,
            var_token,
            blocks,
            label,
            ln: LayerNorm::new(&mut s, "ln", dim),
            mean: Linear::new(&mut s, "mean", dim, dim, Init::Normal(0.02)),
            log_var: Linear::new(&mut s, "log_var", dim, dim, Init::Normal(0.02)),
        }
    }

    pub fn is_posterior(&self) -> bool {
        self.label.is_some()
    }

    /// `tokens` is `[b, n, D]` without classification tokens.
    pub fn encode<'t>(&self, p: &Binder<'t, '_>, tokens: Var<'t>, labels: Option<&[u8]>) -> Result<GaussVars<'t>> {
        let s = tokens.shape();
        let [b, _, d] = s[..] else {
            return Err(Error::Dimension(format!("encoder tokens must be [b, n, d], got {s:?}")));
        };
        if d != self.dim {
            return Err(Error::Dimension(format!("encoder dim {} got {d}", self.dim)));
        }
        let tape = p.tape();
        let var = tape.constant(Tensor::zeros(&[b, 1, d])).add(p.var(self.var_token))?;
        let mut x = Var::concat(&[var, tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(p, x)?;
        }
        let mut h = x.narrow(1, 0, 1)?;
        match (&self.label, labels) {
            (Some(lc), Some(y)) => {
                if y.len() != b || y.iter().any(|&v| v > 1) {
                    return Err(Error::Contract(format!("need {b} binary labels, got {y:?}")));
                }
                let onehot = Tensor::from_fn(&[b, 1, 2], |i| if y[i / 2] as usize == i % 2 { 1.0 } else { 0.0 });
                let emb = tape.constant(onehot).matmul(p.var(lc.table))?;
                let qkv = lc.attn.project(p, lc.ln.forward(p, h)?, emb)?;
                h = h.add(lc.attn.attend(p, &qkv)?)?;
            }
            (Some(_), None) => return Err(Error::Contract("posterior encoder needs labels".into())),
            (None, Some(_)) => return Err(Error::Contract("prior encoder takes no labels".into())),
            (None, None) => {}
        }
        let h = self.ln.forward(p, h)?.reshape(&[b, d])?;
        let (lo, hi) = LOG_VAR_RANGE;
        Ok(GaussVars { mean: self.mean.forward(p, h)?, log_var: self.log_var.forward(p, h)?.clamp(lo, hi) })
    }
}

/// One Gaussian per latent: correlation-specific `c`, modality-specific `s_a`, `s_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentSet<T> {
    pub c: T,
    pub s_a: T,
    pub s_v: T,
}

impl<T> LatentSet<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> LatentSet<U> {
        LatentSet { c: f(self.c), s_a: f(self.s_a), s_v: f(self.s_v) }
    }

    pub fn as_array(&self) -> [&T; 3] {
        [&self.c, &self.s_a, &self.s_v]
    }
}

impl<T, E> LatentSet<std::result::Result<T, E>> {
    pub fn transpose(self) -> std::result::Result<LatentSet<T>, E> {
        Ok(LatentSet { c: self.c?, s_a: self.s_a?, s_v: self.s_v? })
    }
}

/// Sampled codes, each `[b, D]`.
pub type FactorizedLatents<'t> = LatentSet<Var<'t>>;

/// Per-sample summands of the factorized bound, each `[b]`.
#[derive(Clone, Copy)]
pub struct ElboTerms<'t> {
    pub recon: Var<'t>,
    pub kl_s: Var<'t>,
    pub js_c: Var<'t>,
    pub elbo: Var<'t>,
}

/// Labels for a batch: joint, audio and visual.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub y: &'a [u8],
    pub y_a: &'a [u8],
    pub y_v: &'a [u8],
}

/// Standard-normal noise for one training forward pass.
pub struct VbfeNoise {
    pub codes: LatentSet<Tensor>,
    pub js_q: Tensor,
    pub js_p: Tensor,
}

impl VbfeNoise {
    pub fn draw<R: Rng + ?Sized>(b: usize, dim: usize, mc_samples: usize, rng: &mut R) -> Self {
        let mut n = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
        let codes = LatentSet { c: n(&[b, dim]), s_a: n(&[b, dim]), s_v: n(&[b, dim]) };
        let js_q = n(&[mc_samples, b, dim]);
        let js_p = n(&[mc_samples, b, dim]);
        VbfeNoise { codes, js_q, js_p }
    }
}

/// Two-class reconstruction log-likelihood `log p(y | x_o, s_o, c)` from
/// mean-pooled tokens and the codes; `[b]`.
pub fn recon_log_lik<'t>(
    p: &Binder<'t, '_>,
    head: &Linear,
    tokens: Var<'t>,
    s_o: Var<'t>,
    c: Var<'t>,
    y: &[u8],
) -> Result<Var<'t>> {
    let pooled = tokens.mean_axis(1, false)?;
    let logits = head.forward(p, Var::concat(&[pooled, s_o, c], 1)?)?;
    let b = y.len();
    let pick = Tensor::from_fn(&[b, 2], |i| if y[i / 2] as usize == i % 2 { 1.0 } else { 0.0 });
    logits.log_softmax_lastdim().mul(p.tape().constant(pick))?.sum_axis(1, false)
}

/// `Σ_o recon_o - Σ_o KL(q(s_o) || p(s_o)) - JS(q(c), p(c))` per sample.
#[allow(clippy::too_many_arguments)]
pub fn elbo_factorized<'t>(
    p: &Binder<'t, '_>,
    head: &Linear,
    tokens_a: Var<'t>,
    tokens_v: Var<'t>,
    y: &[u8],
    posterior: &LatentSet<GaussVars<'t>>,
    prior: &LatentSet<GaussVars<'t>>,
    codes: &FactorizedLatents<'t>,
    js_noise: (Var<'t>, Var<'t>),
) -> Result<ElboTerms<'t>> {
    let recon = recon_log_lik(p, head, tokens_a, codes.s_a, codes.c, y)?
        .add(recon_log_lik(p, head, tokens_v, codes.s_v, codes.c, y)?)?;
    let kl_s = kl_gaussian_var(&posterior.s_a, &prior.s_a)?.add(kl_gaussian_var(&posterior.s_v, &prior.s_v)?)?;
    let js_c = js_gaussian_var(&posterior.c, &prior.c, js_noise.0, js_noise.1)?;
    let elbo = recon.sub(kl_s)?.sub(js_c)?;
    Ok(ElboTerms { recon, kl_s, js_c, elbo })
}

/// Encoders, reconstruction head and fusers.
#[derive(Clone, Debug)]
pub struct Vbfe {
    pub dim: usize,
    pub mc_samples: usize,
    pub prior: LatentSet<GaussianEncoder>,
    pub posterior: LatentSet<GaussianEncoder>,
    pub recon: Linear,
    pub fuse_a: Linear,
    pub fuse_v: Linear,
}

/// Result of one pass through the estimator.
pub struct VbfeOutput<'t> {
    pub x_a: Var<'t>,
    pub x_v: Var<'t>,
    pub codes: FactorizedLatents<'t>,
    pub prior: LatentSet<GaussVars<'t>>,
    pub posterior: Option<LatentSet<GaussVars<'t>>>,
    pub elbo: Option<ElboTerms<'t>>,
}

impl Vbfe {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, dim: usize, heads: usize, depth: usize, mc_samples: usize) -> Self {
        let mut enc = |name: &str, post: bool| GaussianEncoder::new(s, name, dim, heads, depth, post);
        let prior = LatentSet { c: enc("prior_c", false), s_a: enc("prior_sa", false), s_v: enc("prior_sv", false) };
        let posterior = LatentSet { c: enc("post_c", true), s_a: enc("post_sa", true), s_v: enc("post_sv", true) };
        Vbfe {
            dim,
            mc_samples,
            prior,
            posterior,
            recon: Linear::new(s, "recon", 3 * dim, 2, Init::Normal(0.02)),
            fuse_a: Linear::new(s, "fuse_a", 2 * dim, dim, Init::Zeros),
            fuse_v: Linear::new(s, "fuse_v", 2 * dim, dim, Init::Zeros),
        }
    }

    pub fn encode_prior<'t>(&self, p: &Binder<'t, '_>, ta: Var<'t>, tv: Var<'t>) -> Result<LatentSet<GaussVars<'t>>> {
        let joint = Var::concat(&[ta, tv], 1)?;
        Ok(LatentSet {
            c: self.prior.c.encode(p, joint, None)?,
            s_a: self.prior.s_a.encode(p, ta, None)?,
            s_v: self.prior.s_v.encode(p, tv, None)?,
        })
    }

    pub fn encode_posterior<'t>(
        &self,
        p: &Binder<'t, '_>,
        ta: Var<'t>,
        tv: Var<'t>,
        labels: Labels<'_>,
    ) -> Result<LatentSet<GaussVars<'t>>> {
        let joint = Var::concat(&[ta, tv], 1)?;
        Ok(LatentSet {
            c: self.posterior.c.encode(p, joint, Some(labels.y))?,
            s_a: self.posterior.s_a.encode(p, ta, Some(labels.y_a))?,
            s_v: self.posterior.s_v.encode(p, tv, Some(labels.y_v))?,
        })
    }

    /// Training path with labels and noise, or the inference path without.
    /// Both fuse the prior means into the streams; in training, posterior
    /// samples additionally feed the ELBO.
    pub fn forward<'t>(
        &self,
        p: &Binder<'t, '_>,
        x_a: Var<'t>,
        x_v: Var<'t>,
        train: Option<(Labels<'_>, &VbfeNoise)>,
    ) -> Result<VbfeOutput<'t>> {
        let strip = |x: Var<'t>| -> Result<Var<'t>> {
            let n = x.shape()[1];
            x.narrow(1, 1, n - 1)
        };
        let (ta, tv) = (strip(x_a)?, strip(x_v)?);
        let prior = self.encode_prior(p, ta, tv)?;
        let (codes, fused, posterior, elbo) = match train {
            None => (prior.map(|g| g.mean), prior.map(|g| g.mean), None, None),
            Some((labels, noise)) => {
                let post = self.encode_posterior(p, ta, tv, labels)?;
                let tape = p.tape();
                let codes = LatentSet {
                    c: post.c.reparam(tape.constant(noise.codes.c.clone()))?,
                    s_a: post.s_a.reparam(tape.constant(noise.codes.s_a.clone()))?,
                    s_v: post.s_v.reparam(tape.constant(noise.codes.s_v.clone()))?,
                };
                let js_noise = (tape.constant(noise.js_q.clone()), tape.constant(noise.js_p.clone()));
                let elbo = elbo_factorized(p, &self.recon, ta, tv, labels.y, &post, &prior, &codes, js_noise)?;
                (codes, prior.map(|g| g.mean), Some(post), Some(elbo))
            }
        };
        let (x_a, x_v) = adapt_latents(p, &self.fuse_a, &self.fuse_v, x_a, x_v, &fused)?;
        Ok(VbfeOutput { x_a, x_v, codes, prior, posterior, elbo })
    }
}

/// Adds `Linear([s_o; c])` to every non-classification token of stream `o`.
pub fn adapt_latents<'t>(
    p: &Binder<'t, '_>,
    fuse_a: &Linear,
    fuse_v: &Linear,
    x_a: Var<'t>,
    x_v: Var<'t>,
    codes: &FactorizedLatents<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let add = |x: Var<'t>, fuse: &Linear, s: Var<'t>| -> Result<Var<'t>> {
        let sc = fuse.forward(p, Var::concat(&[s, codes.c], 1)?)?;
        let (b, n, d) = (x.shape()[0], x.shape()[1], sc.shape()[1]);
        let mask = p.tape().constant(Tensor::from_fn(&[n, 1], |i| if i == 0 { 0.0 } else { 1.0 }));
        x.add(sc.reshape(&[b, 1, d])?.mul(mask)?)
    };
    Ok((add(x_a, fuse_a, codes.s_a)?, add(x_v, fuse_v, codes.s_v)?))
}

// ---- discrete identity ------------------------------------------------------

/// Exact-table latent model with a binary latent `z`: prior `p(z | X)`,
/// likelihood `p(y | X, z)` and an arbitrary variational `q(z | X, y)`, for
/// one observed `y`.
#[derive(Clone, Debug)]
pub struct DiscreteToy {
    pub prior: [f64; 2],
    pub likelihood: [f64; 2],
    pub q: [f64; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct DiscreteIdentity {
    pub log_evidence: f64,
    pub elbo: f64,
    pub kl_to_posterior: f64,
}

impl DiscreteIdentity {
    pub fn residual(&self) -> f64 {
        (self.log_evidence - (self.elbo + self.kl_to_posterior)).abs()
    }
}

impl DiscreteToy {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut prob = || rng.random_range(0.05..0.95);
        let (a, b, c, d) = (prob(), prob(), prob(), prob());
        DiscreteToy { prior: [a, 1.0 - a], likelihood: [b, c], q: [d, 1.0 - d] }
    }

    /// Evaluates `log p(y)`, `E_q log p(y|z) - KL(q || p(z))` and `KL(q || p(z|y))`.
    pub fn identity(&self) -> DiscreteIdentity {
        let evidence: f64 = (0..2).map(|z| self.prior[z] * self.likelihood[z]).sum();
        let post: Vec<f64> = (0..2).map(|z| self.prior[z] * self.likelihood[z] / evidence).collect();
        let kl = |a: &[f64], b: &[f64]| -> f64 { (0..2).map(|z| a[z] * (a[z] / b[z]).ln()).sum() };
        let recon: f64 = (0..2).map(|z| self.q[z] * self.likelihood[z].ln()).sum();
        DiscreteIdentity {
            log_evidence: evidence.ln(),
            elbo: recon - kl(&self.q, &self.prior),
            kl_to_posterior: kl(&self.q, &post),
        }
    }
}

/// Values of the three stages of the mixture-prior chain
/// `Σ π_i KL(q_i || p_i) <= Σ π_i KL(q_i || f) <= 1/2 Σ π_i KL(q_i || f) + 1/2 Σ π_i KL(p_i || f)`
/// where `f` is the equal-weight mixture of every `q_i` and `p_i`, with each
/// mixture KL estimated from `n` samples.
pub fn mixture_chain<R: Rng + ?Sized>(
    q: &[DiagonalGaussian],
    p: &[DiagonalGaussian],
    n: usize,
    rng: &mut R,
) -> Result<[f64; 3]> {
    let k = q.len();
    if k == 0 || p.len() != k {
        return Err(Error::Input("chain needs matching non-empty posterior and prior lists".into()));
    }
    let f = GaussianMixture::uniform(q.iter().chain(p).cloned().collect())?;
    let kl_to_f = |g: &DiagonalGaussian, rng: &mut R| -> f64 {
        (0..n)
            .map(|_| {
                let x = sample_reparam(g, rng);
                g.log_density(&x) - f.log_density(&x)
            })
            .sum::<f64>()
            / n as f64
    };
    let w = 1.0 / k as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    let mut prior_side = 0.0;
    for i in 0..k {
        first += w * kl_gaussian(&q[i], &p[i])?;
        second += w * kl_to_f(&q[i], rng);
        prior_side += w * kl_to_f(&p[i], rng);
    }
    Ok([first, second, 0.5 * second + 0.5 * prior_side])
}

/// Tape helper for checks: binds `[b, D]` mean/log-variance tensors as leaves.
pub fn gauss_leaves<'t>(tape: &'t Tape, mean: Tensor, log_var: Tensor) -> GaussVars<'t> {
    GaussVars { mean: tape.leaf(mean), log_var: tape.leaf(log_var) }
}
