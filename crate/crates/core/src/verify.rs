//! Verification suites: finite-difference gradient checks by scope and the
//! divergence / bound oracles.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::conv::{build_highpass_mask, diff_conv, diff_unfold, spectral_filter, DiffKind};
use crate::error::{Error, Result};
use crate::glfa::{block_forward, GlfaAdapter};
use crate::gradcheck::{check, CheckReport, Input};
use crate::model::{BatchInputs, FovbModel};
use crate::nn::{Binder, ParamId, ParamStore, Scope, TransformerBlock};
use crate::train::loss_total;
use crate::vbfe::{
    js_divergence_mc, js_gaussian_var, kl_gaussian, kl_gaussian_var, mixture_chain, DiagonalGaussian, DiscreteToy,
    GaussVars, GaussianEncoder, GaussianMixture, Labels, Vbfe, VbfeNoise,
};
use crate::{Tape, Tensor, Var};

/// Which differentiable paths a gradient check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    Ops,
    Glfa,
    Vbfe,
    Full,
}

impl GradScope {
    pub const ALL: [GradScope; 4] = [GradScope::Ops, GradScope::Glfa, GradScope::Vbfe, GradScope::Full];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::Ops => "ops",
            GradScope::Glfa => "glfa",
            GradScope::Vbfe => "vbfe",
            GradScope::Full => "full",
        }
    }

    /// Single primitives are held to 1e-4; composites to 1e-3.
    pub fn tolerance(self) -> f64 {
        match self {
            GradScope::Ops => 1e-4,
            _ => 1e-3,
        }
    }
}

impl std::str::FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradScope::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct ScopeReport {
    pub scope: GradScope,
    pub checks: Vec<CheckReport>,
}

impl ScopeReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(CheckReport::max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        let tol = self.scope.tolerance();
        self.checks.iter().all(|c| c.passes(tol))
    }

    /// One line per check with its worst coordinate, then a verdict line.
    pub fn to_text(&self) -> String {
        let tol = self.scope.tolerance();
        let mut s = String::new();
        for c in &self.checks {
            if let Some(w) = c.worst() {
                let _ = writeln!(
                    s,
                    "{:<5} {:<40} max_rel_err={:.3e} worst={}[{}] analytic={:.6e} numeric={:.6e} {}",
                    self.scope.name(),
                    c.label,
                    c.max_rel_err(),
                    w.name,
                    w.worst_index,
                    w.analytic,
                    w.numeric,
                    if c.passes(tol) { "ok" } else { "FAIL" }
                );
            }
        }
        let _ = writeln!(
            s,
            "scope {} checks={} max_rel_err={:.3e} tolerance={:.0e} {}",
            self.scope.name(),
            self.checks.len(),
            self.max_rel_err(),
            tol,
            if self.passes() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Coordinates checked per input.
const COORDS: usize = 12;
const COORDS_PARAM: usize = 3;

/// Deterministic, non-uniform weighting that turns any tensor into a scalar.
fn contract<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(&y.shape(), |i| (0.7 * i as f64 + 0.3).cos());
    Ok(y.mul(y.tape().constant(w))?.sum_all())
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

struct Suite {
    rng: ChaCha8Rng,
    reports: Vec<CheckReport>,
}

impl Suite {
    fn run<F>(&mut self, label: &str, inputs: Vec<Input>, f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        self.reports.push(check(label, &inputs, f, COORDS, &mut self.rng)?);
        Ok(())
    }

    /// Checks `f` with respect to `extra` inputs and the store parameters `ids`,
    /// which are bound as leaves in place of their stored values.
    fn run_params<F>(&mut self, label: &str, store: &ParamStore, ids: &[ParamId], extra: Vec<Input>, f: F) -> Result<()>
    where
        F: for<'t, 's> Fn(&Binder<'t, 's>, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let n_extra = extra.len();
        let mut inputs = extra;
        inputs.extend(ids.iter().map(|&id| Input::new(store.param(id).name.clone(), store.get(id).clone())));
        let coords = if ids.len() > 20 { COORDS_PARAM } else { COORDS };
        let report = check(
            label,
            &inputs,
            |tape, vars| {
                let b = Binder::new(tape, store, false);
                for (k, &id) in ids.iter().enumerate() {
                    b.bind(id, vars[n_extra + k]);
                }
                f(&b, &vars[..n_extra])
            },
            coords,
            &mut self.rng,
        )?;
        self.reports.push(report);
        Ok(())
    }
}

/// Adds `N(0, std²)` noise to every listed parameter so zero-initialized
/// projections carry gradient through both of their inputs.
fn jitter(store: &mut ParamStore, ids: &[ParamId], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for &id in ids {
        let mut v = store.get(id).clone();
        v.add_assign(&Tensor::randn(v.shape(), std, rng));
        store.set(id, v)?;
    }
    Ok(())
}

pub fn gradcheck_scope(scope: GradScope, seed: u64) -> Result<ScopeReport> {
    let mut suite = Suite { rng: ChaCha8Rng::seed_from_u64(seed), reports: Vec::new() };
    match scope {
        GradScope::Ops => ops_suite(&mut suite)?,
        GradScope::Glfa => glfa_suite(&mut suite)?,
        GradScope::Vbfe => vbfe_suite(&mut suite)?,
        GradScope::Full => full_suite(&mut suite)?,
    }
    Ok(ScopeReport { scope, checks: suite.reports })
}

fn ops_suite(s: &mut Suite) -> Result<()> {
    let r = &mut s.rng.clone();
    let inp = |name: &str, t: Tensor| Input::new(name, t);

    s.run("add (broadcast row)", vec![inp("a", randn(&[3, 4], r)), inp("b", randn(&[4], r))], |_, v| {
        contract(v[0].add(v[1])?)
    })?;
    s.run("sub (broadcast inner)", vec![inp("a", randn(&[2, 3, 4], r)), inp("b", randn(&[3, 1], r))], |_, v| {
        contract(v[0].sub(v[1])?)
    })?;
    s.run("mul (broadcast)", vec![inp("a", randn(&[3, 4], r)), inp("b", randn(&[1, 4], r))], |_, v| {
        contract(v[0].mul(v[1])?)
    })?;
    s.run("div", vec![inp("a", randn(&[3, 4], r)), inp("b", uniform(&[3, 4], 0.5, 2.0, r))], |_, v| {
        contract(v[0].div(v[1])?)
    })?;
    s.run("neg/scale/add_scalar", vec![inp("x", randn(&[5], r))], |_, v| {
        contract(v[0].neg().scale(1.7).add_scalar(0.3))
    })?;
    s.run("exp", vec![inp("x", randn(&[6], r))], |_, v| contract(v[0].exp()))?;
    s.run("log", vec![inp("x", uniform(&[6], 0.3, 3.0, r))], |_, v| contract(v[0].log()))?;
    s.run("square", vec![inp("x", randn(&[6], r))], |_, v| contract(v[0].square()))?;
    s.run("tanh", vec![inp("x", randn(&[6], r))], |_, v| contract(v[0].tanh()))?;
    s.run("sigmoid", vec![inp("x", randn(&[6], r).map(|x| 3.0 * x))], |_, v| contract(v[0].sigmoid()))?;
    s.run("softplus", vec![inp("x", randn(&[6], r).map(|x| 3.0 * x))], |_, v| contract(v[0].softplus()))?;
    s.run("gelu", vec![inp("x", randn(&[8], r).map(|x| 2.0 * x))], |_, v| contract(v[0].gelu()))?;
    s.run("clamp", vec![inp("x", randn(&[8], r))], |_, v| contract(v[0].clamp(-0.7, 0.7)))?;
    s.run("matmul [b,m,k]x[k,n]", vec![inp("a", randn(&[2, 3, 4], r)), inp("b", randn(&[4, 5], r))], |_, v| {
        contract(v[0].matmul(v[1])?)
    })?;
    s.run("matmul batched", vec![inp("a", randn(&[2, 3, 4], r)), inp("b", randn(&[2, 4, 2], r))], |_, v| {
        contract(v[0].matmul(v[1])?)
    })?;
    s.run(
        "linear",
        vec![inp("x", randn(&[3, 4], r)), inp("w", randn(&[4, 2], r)), inp("b", randn(&[2], r))],
        |_, v| contract(v[0].linear(v[1], Some(v[2]))?),
    )?;
    s.run("reshape/permute/transpose", vec![inp("x", randn(&[2, 3, 4], r))], |_, v| {
        contract(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose_last2()?)
    })?;
    s.run("narrow/concat", vec![inp("a", randn(&[2, 5, 3], r)), inp("b", randn(&[2, 2, 3], r))], |_, v| {
        contract(Var::concat(&[v[0].narrow(1, 1, 3)?, v[1]], 1)?)
    })?;
    s.run("sum_axis/mean_axis/mean_all", vec![inp("x", randn(&[2, 3, 4], r))], |_, v| {
        let a = contract(v[0].sum_axis(1, false)?)?;
        let b = contract(v[0].mean_axis(2, true)?)?;
        a.add(b)?.add(v[0].square().mean_all())
    })?;
    s.run("softmax", vec![inp("x", randn(&[3, 5], r))], |_, v| contract(v[0].softmax_lastdim()))?;
    s.run("log_softmax", vec![inp("x", randn(&[3, 5], r))], |_, v| contract(v[0].log_softmax_lastdim()))?;
    s.run("logsumexp", vec![inp("x", randn(&[3, 5], r))], |_, v| contract(v[0].logsumexp_lastdim()))?;
    s.run(
        "layernorm",
        vec![inp("x", randn(&[3, 6], r)), inp("gain", randn(&[6], r)), inp("bias", randn(&[6], r))],
        |_, v| contract(v[0].layernorm(v[1], v[2])?),
    )?;
    s.run("fft2", vec![inp("x", randn(&[2, 4, 6], r))], |_, v| contract(v[0].fft2()?))?;
    s.run("fft2 -> ifft2_real", vec![inp("x", randn(&[2, 3, 5], r))], |tape, v| {
        let f = v[0].fft2()?;
        let w = Tensor::from_fn(&f.shape(), |i| 1.0 + 0.1 * (i % 7) as f64);
        contract(f.mul(tape.constant(w))?.ifft2_real()?)
    })?;
    for kind in [DiffKind::Vanilla, DiffKind::Adc, DiffKind::Cdc, DiffKind::Rdc, DiffKind::Soc] {
        s.run(&format!("diff_unfold {}", kind.name()), vec![inp("x", randn(&[2, 5, 6, 2], r))], move |_, v| {
            contract(diff_unfold(v[0], kind)?)
        })?;
        s.run(
            &format!("diff_conv {}", kind.name()),
            vec![inp("x", randn(&[1, 4, 5, 2], r)), inp("w", randn(&[3, 2, 3, 3], r))],
            move |_, v| contract(diff_conv(v[0], v[1], kind)?),
        )?;
    }
    let mask = build_highpass_mask(6, 8);
    s.run("spectral_filter", vec![inp("x", randn(&[2, 6, 8, 3], r))], move |_, v| {
        contract(spectral_filter(v[0], &mask)?)
    })?;
    s.rng = r.clone();
    Ok(())
}

fn glfa_suite(s: &mut Suite) -> Result<()> {
    let (dim, heads, grid) = (8, 2, (3, 4));
    let mut store = ParamStore::new();
    let mut rng = s.rng.clone();
    let adapter = GlfaAdapter::new(&mut Scope::new(&mut store, &mut rng, "glfa", true), dim, 2, heads, grid)?;
    let block = TransformerBlock::new(&mut Scope::new(&mut store, &mut rng, "frozen", false), "block", dim, heads);
    let ids = store.trainable();
    jitter(&mut store, &ids, 0.3, &mut rng)?;
    let tokens = Tensor::randn(&[2, grid.0 * grid.1 + 1, dim], 1.0, &mut rng);
    s.rng = rng;

    let a = adapter.clone();
    s.run_params("features", &store, &ids, vec![Input::new("tokens", tokens.clone())], move |p, v| {
        contract(a.features(p, v[0])?)
    })?;
    let (a, bl) = (adapter.clone(), block.clone());
    s.run_params("adapted block", &store, &ids, vec![Input::new("tokens", tokens)], move |p, v| {
        contract(block_forward(p, &bl, Some(&a), v[0])?)
    })?;
    Ok(())
}

fn gauss_pair<'t>(v: &[Var<'t>]) -> (GaussVars<'t>, GaussVars<'t>) {
    (GaussVars { mean: v[0], log_var: v[1] }, GaussVars { mean: v[2], log_var: v[3] })
}

fn vbfe_suite(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng.clone();
    let (b, d, mc) = (3, 4, 3);
    let (m1, l1, m2, l2) =
        (randn(&[b, d], &mut rng), uniform(&[b, d], -1.0, 1.0, &mut rng), randn(&[b, d], &mut rng), uniform(&[b, d], -1.0, 1.0, &mut rng));
    let inputs = || {
        vec![
            Input::new("q.mean", m1.clone()),
            Input::new("q.log_var", l1.clone()),
            Input::new("p.mean", m2.clone()),
            Input::new("p.log_var", l2.clone()),
        ]
    };
    s.run("kl_gaussian", inputs(), move |_, v| {
        let (q, p) = gauss_pair(v);
        contract(kl_gaussian_var(&q, &p)?)
    })?;
    let (eq, ep) = (randn(&[mc, b, d], &mut rng), randn(&[mc, b, d], &mut rng));
    s.run("js_gaussian (fixed noise)", inputs(), move |tape, v| {
        let (q, p) = gauss_pair(v);
        contract(js_gaussian_var(&q, &p, tape.constant(eq.clone()), tape.constant(ep.clone()))?)
    })?;

    let (dim, heads) = (8, 2);
    let mut store = ParamStore::new();
    let enc = GaussianEncoder::new(&mut Scope::new(&mut store, &mut rng, "enc", true), "post", dim, heads, 1, true);
    let ids = store.trainable();
    jitter(&mut store, &ids, 0.1, &mut rng)?;
    let tokens = Tensor::randn(&[2, 5, dim], 1.0, &mut rng);
    s.rng = rng.clone();
    s.run_params("posterior encoder", &store, &ids, vec![Input::new("tokens", tokens)], move |p, v| {
        let g = enc.encode(p, v[0], Some(&[0, 1]))?;
        contract(g.mean)?.add(contract(g.log_var)?)
    })?;

    let mut store = ParamStore::new();
    let vb = Vbfe::new(&mut Scope::new(&mut store, &mut rng, "vbfe", true), dim, heads, 1, 2);
    let ids = store.trainable();
    jitter(&mut store, &ids, 0.1, &mut rng)?;
    let (xa, xv) = (Tensor::randn(&[2, 5, dim], 1.0, &mut rng), Tensor::randn(&[2, 5, dim], 1.0, &mut rng));
    let noise = VbfeNoise::draw(2, dim, 2, &mut rng);
    s.rng = rng;
    s.run_params(
        "estimator forward + elbo",
        &store,
        &ids,
        vec![Input::new("x_a", xa), Input::new("x_v", xv)],
        move |p, v| {
            let labels = Labels { y: &[1, 0], y_a: &[1, 0], y_v: &[0, 0] };
            let out = vb.forward(p, v[0], v[1], Some((labels, &noise)))?;
            let elbo = out.elbo.ok_or_else(|| Error::Contract("no elbo".into()))?;
            contract(out.x_a)?.add(contract(out.x_v)?)?.add(elbo.elbo.mean_all())
        },
    )?;
    Ok(())
}

/// Small layout used by the composite check; every path of the full model is present.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        blocks: 3,
        dim: 8,
        heads: 2,
        patch: 4,
        r: 2,
        glfa_blocks: vec![1, 2],
        vbfe_block: 2,
        input_size: 12,
        encoder_depth: 1,
        backbone_seed: 11,
    }
}

fn full_suite(s: &mut Suite) -> Result<()> {
    let cfg = tiny_model_config();
    let mut rng = s.rng.clone();
    let mc = 2;
    let mut model = FovbModel::new(&cfg, rng.random(), mc)?;
    let ids = model.trainable_parameters();
    jitter(&mut model.store, &ids, 0.1, &mut rng)?;
    let b = 3;
    let n = cfg.grid().0 * cfg.grid().1;
    let batch = BatchInputs {
        audio: Tensor::randn(&[b, n, cfg.patch_dim()], 1.0, &mut rng),
        visual: Tensor::randn(&[b, n, cfg.patch_dim()], 1.0, &mut rng),
    };
    let noise = VbfeNoise::draw(b, cfg.dim, mc, &mut rng);
    s.rng = rng;
    let store = model.store.clone();
    s.run_params("loss_total through the full model", &store, &ids, Vec::new(), move |p, _| {
        let labels = Labels { y: &[1, 0, 1], y_a: &[1, 0, 0], y_v: &[0, 0, 1] };
        let out = model.forward(p, &batch, Some((labels, &noise)))?;
        let vb = out.vbfe.as_ref().ok_or_else(|| Error::Contract("no estimator output".into()))?;
        let elbo = vb.elbo.as_ref().ok_or_else(|| Error::Contract("no elbo".into()))?;
        let parts = loss_total(p.tape(), (out.logits_a, out.logits_v), labels.y, elbo.elbo.mean_all(), &vb.codes, 0.1)?;
        Ok(parts.total)
    })?;
    Ok(())
}

// ---- divergence checks --------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DivCheck {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    /// Allowed `|value - reference|`.
    pub tolerance: f64,
}

impl DivCheck {
    pub fn passes(&self) -> bool {
        (self.value - self.reference).abs() <= self.tolerance
    }
}

/// Outcome of a random search for violations of the mixture chain.
#[derive(Clone, Debug)]
pub struct ChainSearch {
    pub trials: usize,
    pub violations: usize,
    /// Largest amount by which a stage exceeded the next one.
    pub worst_gap: f64,
}

#[derive(Clone, Debug)]
pub struct DivReport {
    pub checks: Vec<DivCheck>,
    pub chain: Option<ChainSearch>,
}

impl DivReport {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(DivCheck::passes)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<36} value={:.9e} reference={:.9e} |diff|={:.3e} tol={:.3e} {}",
                c.name,
                c.value,
                c.reference,
                (c.value - c.reference).abs(),
                c.tolerance,
                if c.passes() { "ok" } else { "FAIL" }
            );
        }
        if let Some(ch) = &self.chain {
            let _ = writeln!(
                s,
                "chain search (informational): trials={} violations={} worst_gap={:.3e}",
                ch.trials, ch.violations, ch.worst_gap
            );
        }
        let _ = writeln!(s, "divcheck {}", if self.passes() { "PASS" } else { "FAIL" });
        s
    }
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn log_normal(x: f64, mean: f64, log_var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + (x - mean).powi(2) / log_var.exp())
}

/// `KL(q || p)` for 1-D Gaussians by quadrature.
pub fn kl_quadrature(q: (f64, f64), p: (f64, f64)) -> f64 {
    let sq = (0.5 * q.1).exp();
    simpson(
        |x| {
            let lq = log_normal(x, q.0, q.1);
            lq.exp() * (lq - log_normal(x, p.0, p.1))
        },
        q.0 - 16.0 * sq,
        q.0 + 16.0 * sq,
        40_000,
    )
}

/// Jensen-Shannon divergence of 1-D Gaussians by quadrature.
pub fn js_quadrature(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (sp, sq) = ((0.5 * p.1).exp(), (0.5 * q.1).exp());
    let lo = (p.0 - 16.0 * sp).min(q.0 - 16.0 * sq);
    let hi = (p.0 + 16.0 * sp).max(q.0 + 16.0 * sq);
    simpson(
        |x| {
            let (lp, lq) = (log_normal(x, p.0, p.1), log_normal(x, q.0, q.1));
            let hi = lp.max(lq);
            let lm = hi + ((lp - hi).exp() + (lq - hi).exp()).ln() - LN_2;
            0.5 * lp.exp() * (lp - lm) + 0.5 * lq.exp() * (lq - lm)
        },
        lo,
        hi,
        200_000,
    )
}

fn gauss1(g: (f64, f64)) -> Result<GaussianMixture> {
    Ok(GaussianMixture::single(DiagonalGaussian::new(vec![g.0], vec![g.1])?))
}

pub const KL_PAIRS: usize = 20;
pub const JS_PAIRS: usize = 5;
pub const IDENTITY_TOYS: usize = 1000;

/// KL vs quadrature, JS Monte Carlo vs quadrature, JS(P,P), disjoint JS and
/// the discrete evidence identity. `samples` is the Monte Carlo size.
pub fn divcheck(samples: usize, seed: u64) -> Result<DivReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let draw = |rng: &mut ChaCha8Rng| (rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));

    // Reported as the pair with the largest disagreement.
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..KL_PAIRS {
        let (q, p) = (draw(&mut rng), draw(&mut rng));
        let closed = kl_gaussian(&DiagonalGaussian::new(vec![q.0], vec![q.1])?, &DiagonalGaussian::new(vec![p.0], vec![p.1])?)?;
        let quad = kl_quadrature(q, p);
        if (closed - quad).abs() >= (worst.0 - worst.1).abs() {
            worst = (closed, quad);
        }
    }
    checks.push(DivCheck { name: format!("KL closed form vs quadrature ({KL_PAIRS})"), value: worst.0, reference: worst.1, tolerance: 1e-6 });

    for i in 0..JS_PAIRS {
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let est = js_divergence_mc(&gauss1(p)?, &gauss1(q)?, samples, &mut rng)?;
        checks.push(DivCheck {
            name: format!("JS Monte Carlo vs quadrature #{}", i + 1),
            value: est.value,
            reference: js_quadrature(p, q),
            tolerance: 3.0 * est.std_err,
        });
    }

    let p = draw(&mut rng);
    let est = js_divergence_mc(&gauss1(p)?, &gauss1(p)?, samples, &mut rng)?;
    checks.push(DivCheck { name: "JS(P, P)".into(), value: est.value, reference: 0.0, tolerance: (3.0 * est.std_err).max(1e-12) });

    let est = js_divergence_mc(&gauss1((-40.0, 0.0))?, &gauss1((40.0, 0.0))?, samples, &mut rng)?;
    checks.push(DivCheck { name: "JS of disjoint supports".into(), value: est.value, reference: LN_2, tolerance: 1e-3 });

    let residual = (0..IDENTITY_TOYS).map(|_| DiscreteToy::random(&mut rng).identity().residual()).fold(0.0, f64::max);
    checks.push(DivCheck {
        name: format!("log-evidence = ELBO + KL ({IDENTITY_TOYS})"),
        value: residual,
        reference: 0.0,
        tolerance: 1e-12,
    });
    Ok(DivReport { checks, chain: None })
}

/// Random search over Gaussian posteriors/priors for violations of
/// `Σ π KL(q_i||p_i) <= Σ π KL(q_i||f) <= ½ Σ π KL(q_i||f) + ½ Σ π KL(p_i||f)`.
pub fn search_chain(trials: usize, samples: usize, seed: u64) -> Result<ChainSearch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ChainSearch { trials, violations: 0, worst_gap: 0.0 };
    for _ in 0..trials {
        let k = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let g = |rng: &mut ChaCha8Rng| {
            let mean = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let log_var = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            DiagonalGaussian::new(mean, log_var)
        };
        let q = (0..k).map(|_| g(&mut rng)).collect::<Result<Vec<_>>>()?;
        let p = (0..k).map(|_| g(&mut rng)).collect::<Result<Vec<_>>>()?;
        let [a, b, c] = mixture_chain(&q, &p, samples, &mut rng)?;
        let gap = (a - b).max(b - c);
        if gap > 0.0 {
            out.violations += 1;
            out.worst_gap = out.worst_gap.max(gap);
        }
    }
    Ok(out)
}
