//! Two-stream backbone with adapters, the latent estimator and classification heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::{Modality, PatchEmbed};
use crate::glfa::{block_forward, GlfaAdapter};
use crate::nn::{Binder, Init, LayerNorm, Linear, ParamId, ParamStore, Scope, TransformerBlock};
use crate::vbfe::{Labels, Vbfe, VbfeNoise, VbfeOutput};
use crate::{Tensor, Var};

/// One modality's tower.
#[derive(Clone, Debug)]
pub struct Stream {
    pub modality: Modality,
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    /// `adapters[i]` wraps `blocks[i]`.
    pub adapters: Vec<Option<GlfaAdapter>>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

impl Stream {
    fn logits<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let cls = self.ln_final.forward(p, x.narrow(1, 0, 1)?)?;
        let d = cls.shape()[2];
        self.head.forward(p, cls.reshape(&[b, d])?)
    }
}

/// Patchified inputs for a batch: each `[b, N, patch·patch·3]`.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub audio: Tensor,
    pub visual: Tensor,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ModelOutput<'t> {
    pub logits_a: Var<'t>,
    pub logits_v: Var<'t>,
    pub vbfe: Option<VbfeOutput<'t>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct FovbModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub audio: Stream,
    pub visual: Stream,
    pub vbfe: Vbfe,
}

impl FovbModel {
    /// Frozen weights come from `config.backbone_seed`; everything trainable from `seed`.
    pub fn new(config: &ModelConfig, seed: u64, mc_samples: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dim, heads) = (config.dim, config.heads);
        let grid = config.grid();

        let mut build = |name: &str, modality, store: &mut ParamStore| -> Result<Stream> {
            let embed = PatchEmbed::new(
                &mut Scope::new(store, &mut rng, &format!("{name}.embed"), true),
                config.patch_dim(),
                grid,
                dim,
            );
            let mut blocks = Vec::with_capacity(config.blocks);
            let mut adapters = Vec::with_capacity(config.blocks);
            for i in 1..=config.blocks {
                let mut fs = Scope::new(store, &mut frozen_rng, name, false);
                blocks.push(TransformerBlock::new(&mut fs, &format!("block{i}"), dim, heads));
                adapters.push(if config.glfa_blocks.contains(&i) {
                    let mut ts = Scope::new(store, &mut rng, &format!("{name}.glfa{i}"), true);
                    Some(GlfaAdapter::new(&mut ts, dim, config.r, heads, grid)?)
                } else {
                    None
                });
            }
            let ln_final = LayerNorm::new(&mut Scope::new(store, &mut frozen_rng, name, false), "ln_final", dim);
            let head = Linear::new(&mut Scope::new(store, &mut rng, name, true), "head", dim, 2, Init::Normal(0.02));
            Ok(Stream { modality, embed, blocks, adapters, ln_final, head })
        };
        let audio = build("audio", Modality::Audio, &mut store)?;
        let visual = build("visual", Modality::Visual, &mut store)?;
        let vbfe = Vbfe::new(
            &mut Scope::new(&mut store, &mut rng, "vbfe", true),
            dim,
            heads,
            config.encoder_depth,
            mc_samples,
        );
        Ok(FovbModel { config: config.clone(), store, audio, visual, vbfe })
    }

    pub fn check_inputs(&self, batch: &BatchInputs) -> Result<()> {
        let n = self.config.grid().0 * self.config.grid().1;
        let want = [batch.len(), n, self.config.patch_dim()];
        for t in [&batch.audio, &batch.visual] {
            if t.shape() != want {
                return Err(Error::Dimension(format!("batch input {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Full forward pass. `train` carries labels and noise; without it the
    /// estimator uses prior means and the pass is deterministic.
    pub fn forward<'t>(
        &self,
        p: &Binder<'t, '_>,
        batch: &BatchInputs,
        train: Option<(Labels<'_>, &VbfeNoise)>,
    ) -> Result<ModelOutput<'t>> {
        self.run(p, batch, true, train)
    }

    /// The frozen backbone alone: no adapters, no latent estimator.
    pub fn forward_backbone<'t>(&self, p: &Binder<'t, '_>, batch: &BatchInputs) -> Result<ModelOutput<'t>> {
        self.run(p, batch, false, None)
    }

    fn run<'t>(
        &self,
        p: &Binder<'t, '_>,
        batch: &BatchInputs,
        adapted: bool,
        train: Option<(Labels<'_>, &VbfeNoise)>,
    ) -> Result<ModelOutput<'t>> {
        self.check_inputs(batch)?;
        if let Some((labels, _)) = train {
            let b = batch.len();
            if labels.y.len() != b || labels.y_a.len() != b || labels.y_v.len() != b {
                return Err(Error::Contract(format!("training batch of {b} needs {b} labels of each kind")));
            }
        }
        let tape = p.tape();
        let mut xa = self.audio.embed.forward(p, tape.constant(batch.audio.clone()))?;
        let mut xv = self.visual.embed.forward(p, tape.constant(batch.visual.clone()))?;
        let mut vbfe = None;
        for i in 0..self.config.blocks {
            let (aa, av) = if adapted {
                (self.audio.adapters[i].as_ref(), self.visual.adapters[i].as_ref())
            } else {
                (None, None)
            };
            xa = block_forward(p, &self.audio.blocks[i], aa, xa)?;
            xv = block_forward(p, &self.visual.blocks[i], av, xv)?;
            if adapted && i + 1 == self.config.vbfe_block {
                let out = self.vbfe.forward(p, xa, xv, train)?;
                xa = out.x_a;
                xv = out.x_v;
                vbfe = Some(out);
            }
        }
        Ok(ModelOutput { logits_a: self.audio.logits(p, xa)?, logits_v: self.visual.logits(p, xv)? , vbfe })
    }

    /// Fake-class probability per sample, the mean of both heads' softmax.
    pub fn predict(&self, batch: &BatchInputs) -> Result<Vec<f64>> {
        let tape = crate::Tape::new();
        let p = Binder::new(&tape, &self.store, false);
        let out = self.forward(&p, batch, None)?;
        Ok(score_from_logits(&out.logits_a.value(), &out.logits_v.value()))
    }

    /// Every trainable parameter in registration order.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.store.trainable()
    }

    /// Parameters that make up the adapters, the estimator's fusers and
    /// projections: the ones whose zero value reduces the model to its backbone.
    pub fn adaptation_outputs(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in [&self.audio, &self.visual] {
            for a in s.adapters.iter().flatten() {
                for l in [&a.proj_q, &a.proj_k, &a.proj_v] {
                    ids.push(l.w);
                    ids.extend(l.b);
                }
            }
        }
        for l in [&self.vbfe.fuse_a, &self.vbfe.fuse_v] {
            ids.push(l.w);
            ids.extend(l.b);
        }
        ids
    }
}

/// Mean over the two heads of `softmax(logits)[1]`.
pub fn score_from_logits(la: &Tensor, lv: &Tensor) -> Vec<f64> {
    let fake = |l: &[f64]| {
        let m = l[0].max(l[1]);
        let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
        e1 / (e0 + e1)
    };
    la.data()
        .chunks(2)
        .zip(lv.data().chunks(2))
        .map(|(a, v)| 0.5 * (fake(a) + fake(v)))
        .collect()
}
