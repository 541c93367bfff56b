//! Audio and visual tokenization: STFT, log-mel spectrogram, patch embedding.

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nn::{Binder, Init, ParamId, Scope};
use crate::{Tensor, Var};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_WINDOW: usize = 320;
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_MEL_BINS: usize = 80;
/// Added to mel power before the log so silence stays finite.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWave {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioWave {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(AudioWave { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    1 + (len - window) / hop
}

/// Short-time Fourier transform without padding: one Hann-windowed DFT per hop.
/// Each frame keeps the `window/2 + 1` non-negative-frequency bins.
pub fn stft(wave: &AudioWave, window: usize, hop: usize) -> Result<Vec<Vec<Complex64>>> {
    if window == 0 || hop == 0 {
        return Err(Error::Input("window and hop must be positive".into()));
    }
    if window > wave.len() {
        return Err(Error::Input(format!(
            "window {window} longer than signal of {} samples",
            wave.len()
        )));
    }
    let win = hann(window);
    let fft = FftPlanner::new().plan_fft_forward(window);
    let bins = window / 2 + 1;
    let frames = frame_count(wave.len(), window, hop);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let slice = &wave.samples[f * hop..f * hop + window];
        for ((b, &s), &w) in buf.iter_mut().zip(slice).zip(&win) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft/2 + 1` rfft bins, as a row-major
/// `n_bins x (n_fft/2 + 1)` matrix.
///
/// Each weight is the triangle's mean over the frequency cell of its FFT bin
/// (width `sample_rate / n_fft`), so filters narrower than one bin still
/// receive positive mass.
pub fn mel_filterbank(n_bins: usize, n_fft: usize, sample_rate: u32) -> Result<Tensor> {
    if n_bins == 0 || n_fft < 2 {
        return Err(Error::Input("mel filterbank needs n_bins >= 1 and n_fft >= 2".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let n_freq = n_fft / 2 + 1;
    let df = sample_rate as f64 / n_fft as f64;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_bins + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_bins * n_freq];
    for m in 0..n_bins {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        // Antiderivative of the unit-peak triangle on [l, r].
        let area = |f: f64| -> f64 {
            if f <= l {
                0.0
            } else if f <= c {
                (f - l).powi(2) / (2.0 * (c - l))
            } else if f <= r {
                (c - l) / 2.0 + ((r - c).powi(2) - (r - f).powi(2)) / (2.0 * (r - c))
            } else {
                (r - l) / 2.0
            }
        };
        for k in 0..n_freq {
            let lo = (k as f64 * df - df / 2.0).max(0.0);
            let hi = (k as f64 * df + df / 2.0).min(nyquist);
            if hi > lo {
                fb[m * n_freq + k] = (area(hi) - area(lo)) / df;
            }
        }
    }
    Tensor::new(&[n_bins, n_freq], fb)
}

/// `mel_bins x frames` grid of `ln(mel power + LOG_FLOOR)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub mel_bins: usize,
    pub frames: usize,
    pub hop: usize,
    pub window: usize,
    /// Row-major, mel bin major.
    pub grid: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.grid[bin * self.frames + frame]
    }

    /// Crops or pads (with the silence value) to `rows x cols`, keeping the
    /// lowest mel bins and earliest frames.
    pub fn fit(&self, rows: usize, cols: usize) -> Vec<f64> {
        let fill = LOG_FLOOR.ln();
        let mut out = vec![fill; rows * cols];
        for r in 0..rows.min(self.mel_bins) {
            for c in 0..cols.min(self.frames) {
                out[r * cols + c] = self.get(r, c);
            }
        }
        out
    }
}

/// Log-mel spectrogram with explicit parameters.
pub fn log_mel_with(wave: &AudioWave, window: usize, hop: usize, mel_bins: usize) -> Result<LogMelSpectrogram> {
    let frames = stft(wave, window, hop)?;
    let fb = mel_filterbank(mel_bins, window, wave.sample_rate)?;
    let n_freq = window / 2 + 1;
    let mut grid = vec![0.0; mel_bins * frames.len()];
    for (t, frame) in frames.iter().enumerate() {
        let power: Vec<f64> = frame.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..mel_bins {
            let row = &fb.data()[m * n_freq..(m + 1) * n_freq];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            grid[m * frames.len() + t] = (e + LOG_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram { mel_bins, frames: frames.len(), hop, window, grid })
}

/// Log-mel spectrogram with window 320, hop 160 and 80 mel bins.
pub fn log_mel(wave: &AudioWave) -> Result<LogMelSpectrogram> {
    log_mel_with(wave, DEFAULT_WINDOW, DEFAULT_HOP, DEFAULT_MEL_BINS)
}

/// `frames x height x width x 3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl VisualClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || data.len() != frames * height * width * 3 {
            return Err(Error::Input(format!(
                "clip of {frames}x{height}x{width}x3 cannot hold {} values",
                data.len()
            )));
        }
        Ok(VisualClip { frames, height, width, data })
    }

    /// First frame as an `h x w x 3` grid.
    pub fn first_frame(&self) -> &[f64] {
        &self.data[..self.height * self.width * 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

/// Replicates a single-channel `h x w` grid into `h x w x 3`.
pub fn replicate_channels(grid: &[f64]) -> Vec<f64> {
    grid.iter().flat_map(|&v| [v, v, v]).collect()
}

/// Cuts an `h x w x c` grid into non-overlapping `p x p` patches in row-major
/// patch order; each row of the result is one patch flattened as (y, x, channel).
pub fn patchify(grid: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Input(format!("{h}x{w} grid is not divisible into {p}x{p} patches")));
    }
    if grid.len() != h * w * c {
        return Err(Error::Input(format!("grid needs {} values, got {}", h * w * c, grid.len())));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(grid.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..p {
                let row = (pr * p + y) * w + pc * p;
                out.extend_from_slice(&grid[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Learnable patch projection, classification token and positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub class_token: ParamId,
    pub pos: ParamId,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, patch_dim: usize, grid: (usize, usize), dim: usize) -> Self {
        let n = grid.0 * grid.1;
        PatchEmbed {
            proj_w: s.param("proj.w", &[patch_dim, dim], Init::Xavier),
            proj_b: s.param("proj.b", &[dim], Init::Zeros),
            class_token: s.param("cls", &[dim], Init::Normal(0.02)),
            pos: s.param("pos", &[n + 1, dim], Init::Normal(0.02)),
            grid,
            dim,
        }
    }

    /// `[b, n, patch_dim]` patches to `[b, n + 1, dim]` tokens, classification token first.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, patches: Var<'t>) -> Result<Var<'t>> {
        let s = patches.shape();
        let [b, n, _] = s[..] else {
            return Err(Error::Dimension(format!("patches must be [b, n, d], got {s:?}")));
        };
        if n != self.grid.0 * self.grid.1 {
            return Err(Error::Dimension(format!("expected {} patches, got {n}", self.grid.0 * self.grid.1)));
        }
        let tokens = patches.linear(p.var(self.proj_w), Some(p.var(self.proj_b)))?;
        let zeros = p.tape().constant(Tensor::zeros(&[b, 1, self.dim]));
        let cls = zeros.add(p.var(self.class_token))?;
        Var::concat(&[cls, tokens], 1)?.add(p.var(self.pos))
    }
}

/// Token sequence for one modality; row 0 is the classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub grid: (usize, usize),
    pub dim: usize,
    /// `(n + 1) x dim`, row-major.
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn new(modality: Modality, grid: (usize, usize), tokens: Tensor) -> Result<Self> {
        let n = grid.0 * grid.1;
        match tokens.shape() {
            [rows, dim] if *rows == n + 1 => Ok(TokenSequence { modality, grid, dim: *dim, tokens }),
            s => Err(Error::Contract(format!("token grid {grid:?} needs {} rows, got {s:?}", n + 1))),
        }
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_token(&self) -> &[f64] {
        &self.tokens.data()[..self.dim]
    }
}
