//! Parameters and the transformer pieces shared by the backbone and the latent encoders.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::{Gradients, Tape, Tensor, Var};

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat registry of named parameters, partitioned into frozen and trainable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Trainable partition in registration order (stable across calls).
    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn frozen(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(id, _)| id).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// CRC32 over names and raw bits of every frozen parameter.
    pub fn frozen_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Binds store parameters onto one tape, creating each leaf at most once.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    track_grads: bool,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    /// With `track_grads`, trainable parameters become gradient leaves.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, track_grads: bool) -> Self {
        Binder { tape, store, track_grads, bound: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.param(id);
        let v = if self.track_grads && p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Uses `v` for parameter `id` from now on instead of the stored value.
    pub fn bind(&self, id: ParamId, v: Var<'t>) {
        self.bound.borrow_mut().insert(id, v);
    }

    /// Gradients of every bound trainable parameter, sorted by id.
    pub fn collect(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let bound = self.bound.borrow();
        let mut out: Vec<(ParamId, Tensor)> = bound
            .iter()
            .filter(|(id, _)| self.store.param(**id).trainable)
            .map(|(&id, &v)| (id, grads.wrt(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std sqrt(2 / (fan_in + fan_out)) for a `[fan_in, fan_out]` matrix.
    Xavier,
}

impl Init {
    pub fn build<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    _ => (shape.iter().product(), shape.iter().product()),
                };
                Tensor::randn(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
        }
    }
}

/// Builder that prefixes names and fixes trainability for a group of parameters.
pub struct Scope<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub prefix: String,
    pub trainable: bool,
}

impl<'a, R: Rng> Scope<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str, trainable: bool) -> Self {
        Scope { store, rng, prefix: prefix.to_string(), trainable }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = init.build(shape, self.rng);
        let full = format!("{}.{}", self.prefix, name);
        self.store.add(full, t, self.trainable)
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, R> {
        Scope {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
            trainable: self.trainable,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let w = s.param(&format!("{name}.w"), &[fan_in, fan_out], init);
        let b = s.param(&format!("{name}.b"), &[fan_out], Init::Zeros);
        Linear { w, b: Some(b) }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: s.param(&format!("{name}.gain"), &[dim], Init::Ones),
            bias: s.param(&format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(p.var(self.gain), p.var(self.bias))
    }
}

/// `[b, s, heads·dh]` to `[b·heads, s, dh]`.
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let [b, n, d] = s[..] else {
        return Err(Error::Dimension(format!("split_heads expects rank 3, got {s:?}")));
    };
    if d % heads != 0 {
        return Err(Error::Dimension(format!("dim {d} not divisible by {heads} heads")));
    }
    x.reshape(&[b, n, heads, d / heads])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, n, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let [bh, n, dh] = s[..] else {
        return Err(Error::Dimension(format!("merge_heads expects rank 3, got {s:?}")));
    };
    x.reshape(&[bh / heads, heads, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[bh / heads, n, heads * dh])
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Head-split query, key and value, each `[b·heads, s, dh]`.
pub struct Qkv<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
}

impl Attention {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = s.sub(name);
        Attention {
            heads,
            q: Linear::new(&mut s, "q", dim, dim, Init::Xavier),
            k: Linear::new(&mut s, "k", dim, dim, Init::Xavier),
            v: Linear::new(&mut s, "v", dim, dim, Init::Xavier),
            out: Linear::new(&mut s, "out", dim, dim, Init::Xavier),
        }
    }

    /// Projects `query_src` to queries and `kv_src` to keys/values.
    pub fn project<'t>(&self, p: &Binder<'t, '_>, query_src: Var<'t>, kv_src: Var<'t>) -> Result<Qkv<'t>> {
        Ok(Qkv {
            q: split_heads(self.q.forward(p, query_src)?, self.heads)?,
            k: split_heads(self.k.forward(p, kv_src)?, self.heads)?,
            v: split_heads(self.v.forward(p, kv_src)?, self.heads)?,
        })
    }

    /// Scaled dot-product attention over head-split inputs, merged and projected.
    pub fn attend<'t>(&self, p: &Binder<'t, '_>, qkv: &Qkv<'t>) -> Result<Var<'t>> {
        let dh = *qkv.q.shape().last().expect("rank 3");
        let scores = qkv.q.matmul(qkv.k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt());
        let ctx = scores.softmax_lastdim().matmul(qkv.v)?;
        self.out.forward(p, merge_heads(ctx, self.heads)?)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = s.sub(name);
        TransformerBlock {
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            attn: Attention::new(&mut s, "attn", dim, heads),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            fc1: Linear::new(&mut s, "fc1", dim, 4 * dim, Init::Xavier),
            fc2: Linear::new(&mut s, "fc2", 4 * dim, dim, Init::Xavier),
        }
    }

    pub fn ffn<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.ln2.forward(p, x)?;
        let h = self.fc2.forward(p, self.fc1.forward(p, h)?.gelu())?;
        x.add(h)
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.ln1.forward(p, x)?;
        let qkv = self.attn.project(p, h, h)?;
        let x = x.add(self.attn.attend(p, &qkv)?)?;
        self.ffn(p, x)
    }
}
