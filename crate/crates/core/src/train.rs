//! Training objective, the optimization loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OrthOn, RunConfig};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{BatchInputs, FovbModel};
use crate::nn::Binder;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::vbfe::{FactorizedLatents, LatentSet, Labels, VbfeNoise};
use crate::{Tape, Tensor, Var};

/// Mean two-class cross-entropy of `logits[b, 2]` against `y`.
pub fn cross_entropy<'t>(tape: &'t Tape, logits: Var<'t>, y: &[u8]) -> Result<Var<'t>> {
    let b = y.len();
    if logits.shape() != [b, 2] {
        return Err(Error::Dimension(format!("logits {:?} for {b} labels", logits.shape())));
    }
    let pick = Tensor::from_fn(&[b, 2], |i| if y[i / 2] as usize == i % 2 { 1.0 } else { 0.0 });
    Ok(logits.log_softmax_lastdim().mul(tape.constant(pick))?.sum_all().scale(-1.0 / b as f64))
}

/// Batch mean of `(c·s_a)² + (c·s_v)² + (s_a·s_v)²` for `[b, D]` codes.
pub fn orth_penalty<'t>(z: &FactorizedLatents<'t>) -> Result<Var<'t>> {
    let dot2 = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> { Ok(a.mul(b)?.sum_axis(1, false)?.square()) };
    let per = dot2(z.c, z.s_a)?.add(dot2(z.c, z.s_v)?)?.add(dot2(z.s_a, z.s_v)?)?;
    Ok(per.mean_all())
}

/// The objective and its three parts, all scalars on the tape.
#[derive(Clone, Copy)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub ce: Var<'t>,
    pub neg_elbo: Var<'t>,
    pub orth: Var<'t>,
}

impl LossParts<'_> {
    /// Fails with the first non-finite term named.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [("ce", self.ce), ("neg_elbo", self.neg_elbo), ("orth", self.orth), ("loss", self.total)] {
            let x = v.item();
            if !x.is_finite() {
                return Err(Error::Numerical { term: name.into(), detail: format!("value {x}") });
            }
        }
        Ok(())
    }
}

/// `CE - ELBO + alpha * L_orth`, where CE averages both heads and `elbo` is a batch mean.
pub fn loss_total<'t>(
    tape: &'t Tape,
    logits: (Var<'t>, Var<'t>),
    y: &[u8],
    elbo: Var<'t>,
    latents: &FactorizedLatents<'t>,
    alpha: f64,
) -> Result<LossParts<'t>> {
    let ce = cross_entropy(tape, logits.0, y)?.add(cross_entropy(tape, logits.1, y)?)?.scale(0.5);
    let neg_elbo = elbo.neg();
    let orth = orth_penalty(latents)?;
    let total = ce.add(neg_elbo)?.add(orth.scale(alpha))?;
    Ok(LossParts { total, ce, neg_elbo, orth })
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub neg_elbo: f64,
    pub orth: f64,
}

pub const TRACE_HEADER: &str = "step,loss,ce,neg_elbo,orth";

impl TraceRow {
    /// Full round-trip precision so traces can be compared bit for bit.
    pub fn to_csv(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.step, self.loss, self.ce, self.neg_elbo, self.orth)
    }
}

pub fn adamw_config(run: &RunConfig) -> AdamWConfig {
    AdamWConfig { lr: run.train.lr, weight_decay: run.train.weight_decay, ..AdamWConfig::default() }
}

fn noise_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step + 1);
    rng
}

/// Sample order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Indices of the batch used at 1-based `step`. Incomplete tail batches are dropped.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Result<Vec<usize>> {
    if batch == 0 || n < batch {
        return Err(Error::Contract(format!("{n} training samples cannot fill a batch of {batch}")));
    }
    let per_epoch = (n / batch) as u64;
    let k = step - 1;
    let order = epoch_order(seed, k / per_epoch, n);
    let start = (k % per_epoch) as usize * batch;
    Ok(order[start..start + batch].to_vec())
}

/// Forward, loss, backward and one optimizer update at 1-based `step`.
pub fn train_step(
    model: &mut FovbModel,
    opt: &mut AdamWState,
    run: &RunConfig,
    batch: &BatchInputs,
    labels: &[Vec<u8>; 3],
    noise: &VbfeNoise,
) -> Result<TraceRow> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.store, true);
    let lab = Labels { y: &labels[0], y_a: &labels[1], y_v: &labels[2] };
    let out = model.forward(&binder, batch, Some((lab, noise)))?;
    let vb = out.vbfe.as_ref().ok_or_else(|| Error::Contract("training pass produced no latent output".into()))?;
    let terms = vb.elbo.as_ref().ok_or_else(|| Error::Contract("training pass produced no ELBO".into()))?;
    let latents = match run.train.orth_on {
        OrthOn::Samples => vb.codes,
        OrthOn::Means => {
            let post = vb.posterior.as_ref().ok_or_else(|| Error::Contract("no posterior in training pass".into()))?;
            LatentSet { c: post.c.mean, s_a: post.s_a.mean, s_v: post.s_v.mean }
        }
    };
    let parts = loss_total(&tape, (out.logits_a, out.logits_v), &labels[0], terms.elbo.mean_all(), &latents, run.train.alpha)?;
    parts.check_finite()?;
    let grads = tape.backward(parts.total)?;
    let grads = binder.collect(&grads);
    drop(binder);
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical {
            term: "gradient".into(),
            detail: format!("non-finite gradient for {}", model.store.param(*id).name),
        });
    }
    adamw_step(&mut model.store, &grads, opt, &adamw_config(run))?;
    Ok(TraceRow {
        step: opt.step,
        loss: parts.total.item(),
        ce: parts.ce.item(),
        neg_elbo: parts.neg_elbo.item(),
        orth: parts.orth.item(),
    })
}

/// Result of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub trace: Vec<TraceRow>,
    pub evals: Vec<(u64, MetricsReport)>,
}

/// Trains until the optimizer step counter reaches `run.train.steps`, so a run
/// resumed from a checkpoint picks up where it stopped. `on_row` sees each trace
/// row as it is produced.
pub fn train_loop(
    model: &mut FovbModel,
    opt: &mut AdamWState,
    run: &RunConfig,
    data: &Prepared,
    eval: Option<&Prepared>,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<TrainLog> {
    run.validate()?;
    let frozen = model.store.frozen_checksum();
    let check_frozen = |model: &FovbModel| -> Result<()> {
        if model.store.frozen_checksum() != frozen {
            return Err(Error::Contract("frozen backbone parameters changed during training".into()));
        }
        Ok(())
    };
    let (dim, mc) = (model.config.dim, run.train.mc_samples);
    let mut log = TrainLog::default();
    while opt.step < run.train.steps as u64 {
        let step = opt.step + 1;
        let idx = batch_indices(run.seed, step, data.len(), run.train.batch)?;
        let (batch, labels) = data.batch(&idx);
        let noise = VbfeNoise::draw(idx.len(), dim, mc, &mut noise_rng(run.seed, step));
        let row = train_step(model, opt, run, &batch, &labels, &noise)?;
        on_row(&row);
        log.trace.push(row);
        if let Some(ev) = eval {
            if run.train.eval_every > 0 && step % run.train.eval_every as u64 == 0 {
                check_frozen(model)?;
                log.evals.push((step, evaluate(model, ev)?));
            }
        }
    }
    check_frozen(model)?;
    Ok(log)
}

const EVAL_CHUNK: usize = 64;

/// Fake-class scores for every sample, in dataset order.
pub fn scores(model: &FovbModel, data: &Prepared) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&data.batch(chunk).0)?);
    }
    Ok(out)
}

pub fn evaluate(model: &FovbModel, data: &Prepared) -> Result<MetricsReport> {
    MetricsReport::compute(&scores(model, data)?, &data.labels())
}

/// Posterior `(mean, log_var)` of each latent for every sample, `[n, D]` each.
/// Labels come from the dataset; noise is irrelevant to the encoders.
pub fn posterior_latents(model: &FovbModel, data: &Prepared) -> Result<LatentSet<(Tensor, Tensor)>> {
    let d = model.config.dim;
    let mut acc: LatentSet<(Vec<f64>, Vec<f64>)> = LatentSet {
        c: Default::default(),
        s_a: Default::default(),
        s_v: Default::default(),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (batch, labels) = data.batch(chunk);
        let zero = |shape: &[usize]| Tensor::zeros(shape);
        let b = chunk.len();
        let noise = VbfeNoise {
            codes: LatentSet { c: zero(&[b, d]), s_a: zero(&[b, d]), s_v: zero(&[b, d]) },
            js_q: zero(&[1, b, d]),
            js_p: zero(&[1, b, d]),
        };
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.store, false);
        let lab = Labels { y: &labels[0], y_a: &labels[1], y_v: &labels[2] };
        let out = model.forward(&binder, &batch, Some((lab, &noise)))?;
        let post = out.vbfe.and_then(|v| v.posterior).ok_or_else(|| Error::Contract("no posterior".into()))?;
        for (dst, g) in [(&mut acc.c, post.c), (&mut acc.s_a, post.s_a), (&mut acc.s_v, post.s_v)] {
            dst.0.extend_from_slice(g.mean.value().data());
            dst.1.extend_from_slice(g.log_var.value().data());
        }
    }
    let n = data.len();
    acc.map(|(m, l)| Ok((Tensor::new(&[n, d], m)?, Tensor::new(&[n, d], l)?))).transpose()
}

/// Mean over samples of `|cos|` for the pairs `(c, s_a)`, `(c, s_v)`, `(s_a, s_v)`.
pub fn mean_abs_cosine(means: &LatentSet<Tensor>) -> [f64; 3] {
    let n = means.c.shape()[0];
    let d = means.c.shape()[1];
    let cos = |a: &Tensor, b: &Tensor, i: usize| {
        let (a, b) = (&a.data()[i * d..(i + 1) * d], &b.data()[i * d..(i + 1) * d]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb)).abs() }
    };
    let pairs = [(&means.c, &means.s_a), (&means.c, &means.s_v), (&means.s_a, &means.s_v)];
    pairs.map(|(a, b)| (0..n).map(|i| cos(a, b, i)).sum::<f64>() / n as f64)
}
