use std::f64::consts::TAU;

use fovb_core::frontend::{self, AudioWave, PatchEmbed, LOG_FLOOR};
use fovb_core::nn::{Binder, ParamStore, Scope};
use fovb_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(n: usize, seed: u64) -> AudioWave {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioWave::new((0..n).map(|_| StandardNormal.sample(&mut rng)).collect(), 16_000).unwrap()
}

/// Textbook DFT of one Hann-windowed slice.
fn direct_dft(slice: &[f64]) -> Vec<(f64, f64)> {
    let n = slice.len();
    (0..n / 2 + 1)
        .map(|k| {
            let mut acc = (0.0, 0.0);
            for (t, &s) in slice.iter().enumerate() {
                let win = 0.5 - 0.5 * (TAU * t as f64 / n as f64).cos();
                let ang = -TAU * (k * t) as f64 / n as f64;
                acc.0 += s * win * ang.cos();
                acc.1 += s * win * ang.sin();
            }
            acc
        })
        .collect()
}

#[test]
fn stft_matches_direct_dft() {
    let wave = noise(1000, 1);
    let frames = frontend::stft(&wave, 320, 160).unwrap();
    assert_eq!(frames.len(), 1 + (1000 - 320) / 160);
    for (f, frame) in frames.iter().enumerate() {
        let oracle = direct_dft(&wave.samples[f * 160..f * 160 + 320]);
        for (c, o) in frame.iter().zip(&oracle) {
            assert!((c.re - o.0).abs() < 1e-9 && (c.im - o.1).abs() < 1e-9);
        }
    }
}

#[test]
fn bin_centred_sine_concentrates_energy() {
    let k = 17;
    let f = k as f64 * 16_000.0 / 320.0;
    let wave = AudioWave::new((0..4000).map(|t| (TAU * f * t as f64 / 16_000.0).sin()).collect(), 16_000).unwrap();
    for frame in frontend::stft(&wave, 320, 160).unwrap() {
        let total: f64 = frame.iter().map(|c| c.norm_sqr()).sum();
        let near: f64 = frame[k - 1..=k + 1].iter().map(|c| c.norm_sqr()).sum();
        assert!(near >= 0.9 * total);
    }
}

#[test]
fn filterbank_shape_and_triangles() {
    let fb = frontend::mel_filterbank(80, 320, 16_000).unwrap();
    assert_eq!(fb.shape(), &[80, 161]);
    let mut last_peak = 0usize;
    for m in 0..80 {
        let row: Vec<f64> = (0..161).map(|k| fb.get(&[m, k])).collect();
        assert!(row.iter().sum::<f64>() > 0.0, "row {m} is empty");
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(row.iter().filter(|&&v| v == max).count(), 1, "row {m}");
        // Rises to its peak then falls.
        let peak = row.iter().position(|&v| v == max).unwrap();
        assert!(row[..=peak].windows(2).all(|p| p[0] <= p[1]));
        assert!(row[peak..].windows(2).all(|p| p[0] >= p[1]));
        assert!(peak >= last_peak);
        last_peak = peak;
    }
    for m in 0..79 {
        let overlap = (0..161).any(|k| fb.get(&[m, k]) > 0.0 && fb.get(&[m + 1, k]) > 0.0);
        assert!(overlap, "filters {m} and {} do not overlap", m + 1);
    }
}

#[test]
fn mel_centres_increase() {
    let edges: Vec<f64> = (0..82).map(|i| frontend::mel_to_hz(frontend::hz_to_mel(8000.0) * i as f64 / 81.0)).collect();
    assert!(edges.windows(2).all(|p| p[0] < p[1]));
    assert!((frontend::mel_to_hz(frontend::hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
}

#[test]
fn log_mel_examples() {
    let silence = AudioWave::new(vec![0.0; 16_000], 16_000).unwrap();
    let lm = frontend::log_mel(&silence).unwrap();
    assert!(lm.grid.iter().all(|&v| v == LOG_FLOOR.ln()));

    let lm = frontend::log_mel(&noise(16_000, 2)).unwrap();
    assert_eq!((lm.mel_bins, lm.frames), (80, 99));
    assert!(lm.grid.iter().all(|v| v.is_finite()));
}

#[test]
fn doubling_amplitude_raises_each_cell_by_at_most_log4() {
    let w = noise(4000, 3);
    let w2 = AudioWave::new(w.samples.iter().map(|s| 2.0 * s).collect(), 16_000).unwrap();
    let (a, b) = (frontend::log_mel(&w).unwrap(), frontend::log_mel(&w2).unwrap());
    for (x, y) in a.grid.iter().zip(&b.grid) {
        let d = y - x;
        assert!((0.0..=4f64.ln() + 1e-12).contains(&d));
    }
}

#[test]
fn hop_shift_moves_columns_by_one() {
    let w = noise(5000, 4);
    let shifted = AudioWave::new(w.samples[160..].to_vec(), 16_000).unwrap();
    let (a, b) = (frontend::log_mel(&w).unwrap(), frontend::log_mel(&shifted).unwrap());
    for m in 0..80 {
        for t in 0..b.frames {
            assert!((a.get(m, t + 1) - b.get(m, t)).abs() < 1e-9);
        }
    }
}

fn embed(grid: (usize, usize), pdim: usize, seed: u64) -> (ParamStore, PatchEmbed) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pe = PatchEmbed::new(&mut Scope::new(&mut store, &mut rng, "embed", true), pdim, grid, 32);
    (store, pe)
}

fn run_embed(store: &ParamStore, pe: &PatchEmbed, patches: Tensor) -> Tensor {
    let tape = Tape::new();
    let p = Binder::new(&tape, store, false);
    let s = patches.shape().to_vec();
    let x = tape.constant(patches.reshape(&[1, s[0], s[1]]).unwrap());
    (*pe.forward(&p, x).unwrap().value()).clone()
}

#[test]
fn patch_embed_shapes_and_zero_grid() {
    let (store, pe) = embed((4, 4), 16, 5);
    let patches = frontend::patchify(&vec![0.0; 256], 16, 16, 1, 4).unwrap();
    assert_eq!(patches.shape(), &[16, 16]);
    let out = run_embed(&store, &pe, patches);
    assert_eq!(out.shape(), &[1, 17, 32]);
    let pos = store.get(pe.pos);
    for i in 1..17 {
        for d in 0..32 {
            assert_eq!(out.get(&[0, i, d]), pos.get(&[i, d]));
        }
    }
}

#[test]
fn indivisible_grid_is_input_error() {
    assert!(matches!(
        frontend::patchify(&[0.0; 90], 10, 9, 1, 4),
        Err(fovb_core::Error::Input(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patch_embedding_is_affine_in_grid(seed in any::<u64>(), a in -2.0f64..2.0) {
        let (store, pe) = embed((2, 2), 48, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let g1 = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut rng);
        let g2 = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut rng);
        let mix: Vec<f64> = g1.data().iter().zip(g2.data()).map(|(x, y)| a * x + y).collect();
        let f = |g: &[f64]| run_embed(&store, &pe, frontend::patchify(g, 8, 8, 3, 4).unwrap());
        let zero = f(&[0.0; 192]);
        let (e1, e2, em) = (f(g1.data()), f(g2.data()), f(&mix));
        for i in 0..em.numel() {
            let lin = a * (e1.data()[i] - zero.data()[i]) + (e2.data()[i] - zero.data()[i]) + zero.data()[i];
            prop_assert!((em.data()[i] - lin).abs() < 1e-10);
        }
    }
}
