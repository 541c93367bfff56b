//! Synthetic audio-visual forgery data, its file format and model-ready features.
//!
//! A real sample is driven by one latent tone sequence: each of four segments
//! has a pitch and a loudness that shape both the sound and the matching
//! vertical band of the frame. Forged modalities come from an independent
//! driver and carry a faint high-frequency artifact.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frontend::{log_mel_with, patchify, replicate_channels, AudioWave, VisualClip, DEFAULT_HOP, DEFAULT_MEL_BINS, DEFAULT_SAMPLE_RATE, DEFAULT_WINDOW};
use crate::model::BatchInputs;
use crate::Tensor;

pub const FILE_HEADER: &[u8] = b"FOVB-SYNTH v1\n";
/// Wave length giving exactly 32 STFT frames at window 320, hop 160.
pub const WAVE_LEN: usize = DEFAULT_WINDOW + 31 * DEFAULT_HOP;
pub const FRAME_SIZE: usize = 32;
pub const SEGMENTS: usize = 4;
const FREQ_RANGE: (f64, f64) = (150.0, 1000.0);
const AMP_RANGE: (f64, f64) = (0.3, 1.0);
const CHECKER_AMP: f64 = 0.08;
/// Spike amplitude relative to the noise floor.
const SPIKE_GAIN: (f64, f64) = (2.0, 4.0);
/// Noise floor standard deviation, drawn log-uniformly.
const FLOOR_RANGE: (f64, f64) = (0.001, 0.05);
/// Fixed affine map taking log-mel values to roughly unit scale.
const MEL_SHIFT: f64 = 2.0;
const MEL_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Real,
    /// Real visual, fake audio.
    Rvfa,
    /// Fake visual, real audio.
    Fvra,
    /// Both fake.
    Fvfa,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Real, Category::Rvfa, Category::Fvra, Category::Fvfa];

    /// `(y, y_a, y_v)`.
    pub fn labels(self) -> (u8, u8, u8) {
        match self {
            Category::Real => (0, 0, 0),
            Category::Rvfa => (1, 1, 0),
            Category::Fvra => (1, 0, 1),
            Category::Fvfa => (1, 1, 1),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Category::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("unknown category byte {c}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Real => "REAL",
            Category::Rvfa => "RVFA",
            Category::Fvra => "FVRA",
            Category::Fvfa => "FVFA",
        }
    }

    pub fn fake_audio(self) -> bool {
        self.labels().1 == 1
    }

    pub fn fake_visual(self) -> bool {
        self.labels().2 == 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub wave: AudioWave,
    pub frame: VisualClip,
    pub category: Category,
}

impl SyntheticSample {
    pub fn y(&self) -> u8 {
        self.category.labels().0
    }
}

/// Pitch and loudness per segment.
#[derive(Clone, Debug)]
struct Driver {
    freq: [f64; SEGMENTS],
    amp: [f64; SEGMENTS],
}

impl Driver {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let mut freq = [0.0; SEGMENTS];
        let mut amp = [0.0; SEGMENTS];
        for k in 0..SEGMENTS {
            freq[k] = rng.random_range(FREQ_RANGE.0..FREQ_RANGE.1);
            amp[k] = rng.random_range(AMP_RANGE.0..AMP_RANGE.1);
        }
        Driver { freq, amp }
    }
}

fn render_wave<R: Rng>(d: &Driver, spike: bool, rng: &mut R) -> Vec<f64> {
    let seg = WAVE_LEN / SEGMENTS;
    let noise_floor = rng.random_range(FLOOR_RANGE.0.ln()..FLOOR_RANGE.1.ln()).exp();
    let mut phase = rng.random_range(0.0..TAU);
    let mut out = Vec::with_capacity(WAVE_LEN);
    for t in 0..WAVE_LEN {
        let k = (t / seg).min(SEGMENTS - 1);
        phase += TAU * d.freq[k] / DEFAULT_SAMPLE_RATE as f64;
        let n: f64 = rng.sample(StandardNormal);
        out.push(0.5 * d.amp[k] * phase.sin() + noise_floor * n);
    }
    if spike {
        // A faint tone gated on and off every two hops.
        let f = rng.random_range(250.0..1100.0);
        let a = noise_floor * rng.random_range(SPIKE_GAIN.0..SPIKE_GAIN.1);
        let offset = rng.random_range(0..4usize);
        for (t, v) in out.iter_mut().enumerate() {
            if (t / DEFAULT_HOP + offset) % 4 < 2 {
                *v += a * (TAU * f * t as f64 / DEFAULT_SAMPLE_RATE as f64).sin();
            }
        }
    }
    out
}

fn render_frame<R: Rng>(d: &Driver, checker: bool, rng: &mut R) -> Vec<f64> {
    let n = FRAME_SIZE;
    let band = n / SEGMENTS;
    let offset = rng.random_range(-0.1..0.1);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let k = c / band;
            let cycles = 1.0 + 3.0 * (d.freq[k] - FREQ_RANGE.0) / (FREQ_RANGE.1 - FREQ_RANGE.0);
            let stripes = 0.12 * (TAU * cycles * r as f64 / n as f64).sin();
            let noise: f64 = rng.sample(StandardNormal);
            let mut v = 0.2 + 0.5 * (d.amp[k] - AMP_RANGE.0) / (AMP_RANGE.1 - AMP_RANGE.0) + stripes + offset + 0.02 * noise;
            if checker {
                v += sign * CHECKER_AMP * if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            }
            let v = v.clamp(0.0, 1.0);
            out.extend_from_slice(&[v, 0.9 * v + 0.05, 0.8 * v + 0.1]);
        }
    }
    out
}

/// One sample of the given category from its own generator.
pub fn generate_sample(category: Category, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let driver = Driver::draw(rng);
    let audio_driver = if category.fake_audio() { Driver::draw(rng) } else { driver.clone() };
    let visual_driver = if category.fake_visual() { Driver::draw(rng) } else { driver };
    let wave = render_wave(&audio_driver, category.fake_audio(), rng);
    let frame = render_frame(&visual_driver, category.fake_visual(), rng);
    SyntheticSample {
        wave: AudioWave { samples: wave, sample_rate: DEFAULT_SAMPLE_RATE },
        frame: VisualClip { frames: 1, height: FRAME_SIZE, width: FRAME_SIZE, data: frame },
        category,
    }
}

/// Category counts for `n` samples by largest remainder.
pub fn category_counts(n: usize, mix: &[f64; 4]) -> Result<[usize; 4]> {
    let total: f64 = mix.iter().sum();
    if mix.iter().any(|&w| !(w >= 0.0)) || total <= 0.0 {
        return Err(Error::Config(format!("bad category mix {mix:?}")));
    }
    let exact: Vec<f64> = mix.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 4];
    for i in 0..4 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

pub fn synth_generate_mix(n: usize, seed: u64, mix: &[f64; 4]) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Input("need at least one sample".into()));
    }
    let counts = category_counts(n, mix)?;
    let mut cats: Vec<Category> = Category::ALL.iter().zip(counts).flat_map(|(&c, k)| std::iter::repeat_n(c, k)).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(cats.as_mut_slice(), &mut order_rng);
    Ok(cats
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_sample(c, &mut rng)
        })
        .collect())
}

/// `n` samples in equal category proportions.
pub fn synth_generate(n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    synth_generate_mix(n, seed, &[0.25; 4])
}

// ---- file format -------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Block layout: `n_wave u32, sample_rate u32, wave f64*, frames u32, height u32,
/// width u32, frame f64*, category u8`.
fn encode_sample(s: &SyntheticSample) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(8 * (s.wave.len() + s.frame.data.len()) + 32);
    put_u32(&mut b, s.wave.len())?;
    put_u32(&mut b, s.wave.sample_rate as usize)?;
    for v in &s.wave.samples {
        b.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut b, s.frame.frames)?;
    put_u32(&mut b, s.frame.height)?;
    put_u32(&mut b, s.frame.width)?;
    for v in &s.frame.data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.push(s.category.code());
    Ok(b)
}

pub fn write_dataset<W: Write>(samples: &[SyntheticSample], mut w: W) -> Result<()> {
    w.write_all(FILE_HEADER)?;
    for s in samples {
        let block = encode_sample(s)?;
        w.write_all(&(block.len() as u32).to_le_bytes())?;
        w.write_all(&block)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("truncated sample block".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode_sample(block: &[u8]) -> Result<SyntheticSample> {
    let mut c = Cursor { buf: block, pos: 0 };
    let n = c.u32()?;
    let rate = c.u32()? as u32;
    let wave = c.f64s(n)?;
    let (t, h, w) = (c.u32()?, c.u32()?, c.u32()?);
    let frame = c.f64s(t * h * w * 3)?;
    let category = Category::from_code(c.take(1)?[0])?;
    if c.pos != block.len() {
        return Err(Error::Integrity("trailing bytes in sample block".into()));
    }
    let wave = AudioWave::new(wave, rate).map_err(|e| Error::Integrity(e.to_string()))?;
    let frame = VisualClip::new(t, h, w, frame).map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(SyntheticSample { wave, frame, category })
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<SyntheticSample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if !buf.starts_with(FILE_HEADER) {
        return Err(Error::Integrity("missing FOVB-SYNTH v1 header".into()));
    }
    let mut c = Cursor { buf: &buf, pos: FILE_HEADER.len() };
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let len = c.u32()?;
        out.push(decode_sample(c.take(len)?)?);
    }
    Ok(out)
}

pub fn save_dataset(samples: &[SyntheticSample], path: &std::path::Path) -> Result<()> {
    write_dataset(samples, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<SyntheticSample>> {
    read_dataset(std::fs::File::open(path)?)
}

// ---- features ------------------------------------------------------------------

/// `size x size` log-mel grid (lowest bins, earliest frames) mapped to unit scale.
pub fn audio_grid(wave: &AudioWave, size: usize) -> Result<Vec<f64>> {
    let lm = log_mel_with(wave, DEFAULT_WINDOW, DEFAULT_HOP, DEFAULT_MEL_BINS.max(size))?;
    Ok(lm.fit(size, size).into_iter().map(|v| (v + MEL_SHIFT) / MEL_SCALE).collect())
}

/// First frame cropped or padded (with zeros) to `size x size x 3`.
pub fn visual_grid(clip: &VisualClip, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * 3];
    let src = clip.first_frame();
    for r in 0..size.min(clip.height) {
        for c in 0..size.min(clip.width) {
            let (s, d) = ((r * clip.width + c) * 3, (r * size + c) * 3);
            out[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

/// Patchified features for a whole dataset plus its labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Per sample, `n_patches * patch_dim` values.
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub categories: Vec<Category>,
}

impl Prepared {
    pub fn new(samples: &[SyntheticSample], size: usize, patch: usize) -> Result<Self> {
        let mut audio = Vec::with_capacity(samples.len());
        let mut visual = Vec::with_capacity(samples.len());
        let mut dims = (0, 0);
        for s in samples {
            let a = patchify(&replicate_channels(&audio_grid(&s.wave, size)?), size, size, 3, patch)?;
            let v = patchify(&visual_grid(&s.frame, size), size, size, 3, patch)?;
            dims = (a.shape()[0], a.shape()[1]);
            audio.push(a.into_data());
            visual.push(v.into_data());
        }
        Ok(Prepared {
            n_patches: dims.0,
            patch_dim: dims.1,
            audio,
            visual,
            categories: samples.iter().map(|s| s.category).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.categories.iter().map(|c| c.labels().0).collect()
    }

    /// Batch tensors and `(y, y_a, y_v)` label vectors for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (BatchInputs, [Vec<u8>; 3]) {
        let shape = [idx.len(), self.n_patches, self.patch_dim];
        let gather = |src: &Vec<Vec<f64>>| {
            let data = idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
            Tensor::new(&shape, data).expect("prepared sizes are consistent")
        };
        let labels = idx.iter().map(|&i| self.categories[i].labels());
        let mut y = [Vec::new(), Vec::new(), Vec::new()];
        for (a, b, c) in labels {
            y[0].push(a);
            y[1].push(b);
            y[2].push(c);
        }
        (BatchInputs { audio: gather(&self.audio), visual: gather(&self.visual) }, y)
    }
}

/// Per-sample means of the raw pixels and of the log-mel grid.
pub fn first_moments(s: &SyntheticSample, size: usize) -> Result<[f64; 2]> {
    let a = audio_grid(&s.wave, size)?;
    let v = visual_grid(&s.frame, size);
    Ok([a.iter().sum::<f64>() / a.len() as f64, v.iter().sum::<f64>() / v.len() as f64])
}

/// Eval AUC of a logistic-regression probe trained on [`first_moments`].
pub fn first_moment_probe_auc(train: &[SyntheticSample], eval: &[SyntheticSample], size: usize) -> Result<f64> {
    let feats = |set: &[SyntheticSample]| -> Result<Vec<[f64; 2]>> { set.iter().map(|s| first_moments(s, size)).collect() };
    let (xt, xe) = (feats(train)?, feats(eval)?);
    let yt: Vec<f64> = train.iter().map(|s| s.y() as f64).collect();
    // Standardize with train statistics, then plain gradient descent.
    let mut mu = [0.0; 2];
    let mut sd = [0.0; 2];
    for j in 0..2 {
        mu[j] = xt.iter().map(|x| x[j]).sum::<f64>() / xt.len() as f64;
        sd[j] = (xt.iter().map(|x| (x[j] - mu[j]).powi(2)).sum::<f64>() / xt.len() as f64).sqrt().max(1e-12);
    }
    let z = |x: &[f64; 2]| [(x[0] - mu[0]) / sd[0], (x[1] - mu[1]) / sd[1]];
    let mut w = [0.0; 3];
    for _ in 0..2000 {
        let mut g = [0.0; 3];
        for (x, y) in xt.iter().zip(&yt) {
            let x = z(x);
            let p = 1.0 / (1.0 + (-(w[0] * x[0] + w[1] * x[1] + w[2])).exp());
            g[0] += (p - y) * x[0];
            g[1] += (p - y) * x[1];
            g[2] += p - y;
        }
        for j in 0..3 {
            w[j] -= 0.5 * g[j] / xt.len() as f64;
        }
    }
    let scores: Vec<f64> = xe.iter().map(|x| { let x = z(x); w[0] * x[0] + w[1] * x[1] + w[2] }).collect();
    let labels: Vec<u8> = eval.iter().map(|s| s.y()).collect();
    crate::metrics::auc(&scores, &labels)
}
