use fovb_core::conv::{self, build_highpass_mask, reflect, DiffConvKernel, DiffKind, RING};
use fovb_core::gradcheck::{self, Input};
use fovb_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL: [DiffKind; 5] = [DiffKind::Vanilla, DiffKind::Adc, DiffKind::Cdc, DiffKind::Rdc, DiffKind::Soc];

/// Weight for ring direction `(dy, dx)` (or the centre) of output `o`, input `i`.
fn wt(k: &Tensor, o: usize, i: usize, dy: isize, dx: isize) -> f64 {
    k.get(&[o, i, (dy + 1) as usize, (dx + 1) as usize])
}

/// Direct scalar-loop evaluation of each kernel definition.
fn oracle(kind: DiffKind, x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[0];
    let px = |r: isize, c: isize, ch: usize| x.get(&[reflect(r, h), reflect(c, w), ch]);
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for o in 0..cout {
                let mut acc = 0.0;
                for i in 0..cin {
                    let xc = px(r, c, i);
                    match kind {
                        DiffKind::Vanilla => {
                            for dy in -1..=1 {
                                for dx in -1..=1 {
                                    acc += wt(k, o, i, dy, dx) * px(r + dy, c + dx, i);
                                }
                            }
                        }
                        DiffKind::Cdc => {
                            for dy in -1..=1 {
                                for dx in -1..=1 {
                                    acc += wt(k, o, i, dy, dx) * (px(r + dy, c + dx, i) - xc);
                                }
                            }
                        }
                        DiffKind::Adc => {
                            for j in 0..8 {
                                let (a, b) = (RING[j], RING[(j + 1) % 8]);
                                acc += wt(k, o, i, a.0, a.1) * (px(r + a.0, c + a.1, i) - px(r + b.0, c + b.1, i));
                            }
                        }
                        DiffKind::Rdc => {
                            for (dy, dx) in RING {
                                acc += wt(k, o, i, dy, dx) * (px(r + 2 * dy, c + 2 * dx, i) - px(r + dy, c + dx, i));
                            }
                        }
                        DiffKind::Soc => {
                            for (dy, dx) in RING {
                                acc += wt(k, o, i, dy, dx) * (px(r + dy, c + dx, i) + px(r - dy, c - dx, i) - 2.0 * xc);
                            }
                        }
                    }
                }
                out[((r as usize) * w + c as usize) * cout + o] = acc;
            }
        }
    }
    Tensor::new(&[h, w, cout], out).unwrap()
}

fn kernel(kind: DiffKind, w: Tensor) -> DiffConvKernel {
    DiffConvKernel::new(kind, w).unwrap()
}

fn apply(kind: DiffKind, x: &Tensor, k: &DiffConvKernel) -> Tensor {
    match kind {
        DiffKind::Vanilla => conv::conv_vanilla(x, k),
        DiffKind::Adc => conv::conv_adc(x, k),
        DiffKind::Cdc => conv::conv_cdc(x, k),
        DiffKind::Rdc => conv::conv_rdc(x, k),
        DiffKind::Soc => conv::conv_soc(x, k),
    }
    .unwrap()
}

#[test]
fn every_kernel_matches_loop_oracle_on_50_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in ALL {
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let h = rng.random_range(3..=9);
            let w = rng.random_range(3..=9);
            let cin = rng.random_range(1..=3);
            let cout = rng.random_range(1..=3);
            let x = Tensor::uniform(&[h, w, cin], -2.0, 2.0, &mut rng);
            let k = Tensor::uniform(&[cout, cin, 3, 3], -1.0, 1.0, &mut rng);
            let y = apply(kind, &x, &kernel(kind, k.clone()));
            worst = worst.max(y.max_abs_diff(&oracle(kind, &x, &k)));
        }
        assert!(worst < 1e-10, "{kind:?}: {worst}");
    }
}

#[test]
fn vanilla_identity_and_box_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[6, 5, 1], -1.0, 1.0, &mut rng);
    let delta = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 });
    assert_eq!(conv::conv_vanilla(&x, &kernel(DiffKind::Vanilla, delta)).unwrap(), x);

    let c = Tensor::full(&[5, 5, 1], 0.7);
    let y = conv::conv_vanilla(&c, &kernel(DiffKind::Vanilla, Tensor::ones(&[1, 1, 3, 3]))).unwrap();
    assert!((y.get(&[2, 2, 0]) - 9.0 * 0.7).abs() < 1e-12);
}

#[test]
fn cdc_top_left_example() {
    let x = Tensor::new(&[3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 0 { 1.0 } else { 0.0 });
    let y = conv::conv_cdc(&x, &kernel(DiffKind::Cdc, w)).unwrap();
    assert_eq!(y.get(&[1, 1, 0]), -4.0);
}

#[test]
fn cdc_equals_vanilla_minus_centre_times_weight_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x = Tensor::uniform(&[7, 6, 1], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let cdc = conv::conv_cdc(&x, &kernel(DiffKind::Cdc, w.clone())).unwrap();
        let van = conv::conv_vanilla(&x, &kernel(DiffKind::Vanilla, w.clone())).unwrap();
        let s = w.sum();
        for i in 0..x.numel() {
            assert!((cdc.data()[i] - (van.data()[i] - x.data()[i] * s)).abs() < 1e-10);
        }
    }
}

#[test]
fn adc_symmetric_window_vanishes_at_centre() {
    // Values depend only on the ring position's distance class, so uniform
    // weights telescope to zero.
    let x = Tensor::new(&[3, 3, 1], vec![2.0, 5.0, 2.0, 5.0, 9.0, 5.0, 2.0, 5.0, 2.0]).unwrap();
    let y = conv::conv_adc(&x, &kernel(DiffKind::Adc, Tensor::ones(&[1, 1, 3, 3]))).unwrap();
    assert_eq!(y.get(&[1, 1, 0]), 0.0);
}

#[test]
fn rdc_ramp_with_uniform_weights_cancels() {
    let x = Tensor::from_fn(&[9, 9, 1], |i| (i / 9) as f64);
    let y = conv::conv_rdc(&x, &kernel(DiffKind::Rdc, Tensor::ones(&[1, 1, 3, 3]))).unwrap();
    for r in 2..7 {
        for c in 2..7 {
            assert_eq!(y.get(&[r, c, 0]), 0.0);
        }
    }
}

#[test]
fn soc_kills_ramps_and_measures_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    let ramp = Tensor::from_fn(&[8, 8, 1], |i| 0.3 * (i / 8) as f64 - 0.7 * (i % 8) as f64);
    let y = conv::conv_soc(&ramp, &kernel(DiffKind::Soc, w)).unwrap();
    for r in 1..7 {
        for c in 1..7 {
            assert!(y.get(&[r, c, 0]).abs() < 1e-12);
        }
    }
    let quad = Tensor::from_fn(&[8, 8, 1], |i| ((i / 8) as f64).powi(2));
    let top = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 1 { 1.0 } else { 0.0 });
    let y = conv::conv_soc(&quad, &kernel(DiffKind::Soc, top)).unwrap();
    for r in 1..7 {
        for c in 0..8 {
            assert_eq!(y.get(&[r, c, 0]), 2.0);
        }
    }
}

#[test]
fn difference_kernels_send_constants_to_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in DiffKind::DIFFERENCE {
        for _ in 0..20 {
            let v: f64 = rng.random_range(-50.0..50.0);
            let x = Tensor::full(&[6, 7, 2], v);
            let w = Tensor::uniform(&[3, 2, 3, 3], -5.0, 5.0, &mut rng);
            let y = apply(kind, &x, &kernel(kind, w));
            assert!(y.data().iter().all(|&y| y == 0.0), "{kind:?}");
        }
    }
}

#[test]
fn kernel_weight_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in ALL {
        let x = Tensor::uniform(&[2, 5, 5, 2], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -2.0, 2.0, &mut rng);
        let probe = Tensor::uniform(&[2, 5, 5, 3], -1.0, 1.0, &mut rng);
        let report = gradcheck::check(
            kind.name(),
            &[Input::new("x", x), Input::new("w", w)],
            |t, v| {
                let y = conv::diff_conv(v[0], v[1], kind)?;
                Ok(y.mul(t.constant(probe.clone()))?.sum_all())
            },
            64,
            &mut rng,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn gfc_examples() {
    let mask = build_highpass_mask(8, 8);
    let c = Tensor::full(&[8, 8, 2], 3.5);
    let y = conv::gfc_filter(&c, &mask).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    let bad = build_highpass_mask(4, 4);
    assert!(conv::gfc_filter(&c, &bad).is_err());
}

#[test]
fn spectral_filter_gradient_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mask = build_highpass_mask(4, 6);
    let probe = Tensor::uniform(&[1, 4, 6, 2], -1.0, 1.0, &mut rng);
    let report = gradcheck::check(
        "gfc",
        &[Input::new("x", Tensor::uniform(&[1, 4, 6, 2], -2.0, 2.0, &mut rng))],
        |t, v| Ok(conv::spectral_filter(v[0], &mask)?.mul(t.constant(probe.clone()))?.sum_all()),
        64,
        &mut rng,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gfc_is_an_idempotent_energy_splitting_projection(
        h in 8usize..=32, w in 8usize..=32, c in 1usize..=2, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut rng);
        let mask = build_highpass_mask(h, w);
        let hi = conv::gfc_filter(&x, &mask).unwrap();
        let lo = conv::lowpass_filter(&x, &mask).unwrap();
        let twice = conv::gfc_filter(&hi, &mask).unwrap();
        prop_assert!(twice.max_abs_diff(&hi) < 1e-9);
        let e = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e(&x) - e(&hi) - e(&lo)).abs() < 1e-8);
        // Every channel loses its mean.
        for ch in 0..c {
            let m: f64 = (0..h * w).map(|i| hi.data()[i * c + ch]).sum();
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn kernels_are_linear_in_input_and_weights(kind_ix in 0usize..5, seed in any::<u64>(), a in -3.0f64..3.0) {
        let kind = ALL[kind_ix];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = Tensor::uniform(&[5, 6, 2], -2.0, 2.0, &mut rng);
        let x2 = Tensor::uniform(&[5, 6, 2], -2.0, 2.0, &mut rng);
        let w1 = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let w2 = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let comb = |p: &Tensor, q: &Tensor| Tensor::new(p.shape(), p.data().iter().zip(q.data()).map(|(u, v)| a * u + v).collect()).unwrap();
        let k1 = kernel(kind, w1.clone());
        let lhs = apply(kind, &comb(&x1, &x2), &k1);
        let rhs = comb(&apply(kind, &x1, &k1), &apply(kind, &x2, &k1));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        let lhs = apply(kind, &x1, &kernel(kind, comb(&w1, &w2)));
        let rhs = comb(&apply(kind, &x1, &k1), &apply(kind, &x1, &kernel(kind, w2)));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}
