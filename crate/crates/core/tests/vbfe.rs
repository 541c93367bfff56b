use fovb_core::vbfe::{
    gauss_leaves, js_divergence_mc, js_gaussian_var, kl_gaussian, kl_gaussian_var, log_sum_exp, DiagonalGaussian,
    DiscreteToy, GaussianMixture,
};
use fovb_core::verify::{js_quadrature, kl_quadrature};
use fovb_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn g1(m: f64, v: f64) -> DiagonalGaussian {
    DiagonalGaussian::new(vec![m], vec![v.ln()]).unwrap()
}

#[test]
fn kl_matches_quadrature() {
    for &(mq, vq, mp, vp) in &[(0.0, 1.0, 0.0, 1.0), (0.3, 0.5, -1.0, 2.0), (2.0, 3.0, 1.5, 0.4)] {
        let kl = kl_gaussian(&g1(mq, vq), &g1(mp, vp)).unwrap();
        let quad = kl_quadrature((mq, vq.ln()), (mp, vp.ln()));
        assert!((kl - quad).abs() < 1e-6, "{kl} vs {quad}");
    }
}

#[test]
fn kl_is_additive_over_dimensions() {
    let q = DiagonalGaussian::new(vec![0.1, -0.4], vec![0.2, -0.3]).unwrap();
    let p = DiagonalGaussian::new(vec![0.5, 0.0], vec![-0.1, 0.4]).unwrap();
    let split = kl_gaussian(&g1(0.1, 0.2f64.exp()), &g1(0.5, (-0.1f64).exp())).unwrap()
        + kl_gaussian(&g1(-0.4, (-0.3f64).exp()), &g1(0.0, 0.4f64.exp())).unwrap();
    assert!((kl_gaussian(&q, &p).unwrap() - split).abs() < 1e-14);
}

#[test]
fn tape_kl_agrees_with_plain_kl() {
    let tape = Tape::new();
    let q = gauss_leaves(&tape, Tensor::new(&[2, 2], vec![0.1, 0.2, -1.0, 0.5]).unwrap(), Tensor::new(&[2, 2], vec![0.0, -0.5, 0.3, 0.1]).unwrap());
    let p = gauss_leaves(&tape, Tensor::new(&[2, 2], vec![0.0, 0.0, 0.4, -0.2]).unwrap(), Tensor::new(&[2, 2], vec![0.2, 0.2, -0.4, 0.0]).unwrap());
    let kl = kl_gaussian_var(&q, &p).unwrap().value();
    for i in 0..2 {
        assert!((kl.data()[i] - kl_gaussian(&q.row(i), &p.row(i)).unwrap()).abs() < 1e-14);
    }
}

#[test]
fn js_of_identical_gaussians_is_zero_with_shared_noise() {
    let tape = Tape::new();
    let mean = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
    let lv = Tensor::new(&[1, 2], vec![0.1, -0.4]).unwrap();
    let q = gauss_leaves(&tape, mean.clone(), lv.clone());
    let p = gauss_leaves(&tape, mean, lv);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = tape.constant(Tensor::randn(&[64, 1, 2], 1.0, &mut rng));
    let js = js_gaussian_var(&q, &p, eps, eps).unwrap().value();
    assert!(js.data()[0].abs() < 1e-12);
}

#[test]
fn js_mc_tracks_quadrature_and_stays_below_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, q): ((f64, f64), (f64, f64)) = ((0.0, 0.0), (1.5, -0.7));
    let mp = GaussianMixture::single(g1(p.0, p.1.exp()));
    let mq = GaussianMixture::single(g1(q.0, q.1.exp()));
    let est = js_divergence_mc(&mp, &mq, 50_000, &mut rng).unwrap();
    let quad = js_quadrature(p, q);
    assert!((est.value - quad).abs() < 4.0 * est.std_err, "{} vs {quad} (se {})", est.value, est.std_err);
    assert!(quad > 0.0 && quad < std::f64::consts::LN_2);
}

#[test]
fn log_sum_exp_is_stable() {
    assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_nonnegative_and_zero_on_self(m in -3.0..3.0f64, lv in -2.0..2.0f64, m2 in -3.0..3.0f64, lv2 in -2.0..2.0f64) {
        let q = DiagonalGaussian::new(vec![m], vec![lv]).unwrap();
        let p = DiagonalGaussian::new(vec![m2], vec![lv2]).unwrap();
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= -1e-15);
        prop_assert!(kl_gaussian(&q, &q).unwrap().abs() < 1e-15);
    }

    #[test]
    fn evidence_decomposition_is_exact(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = DiscreteToy::random(&mut rng);
        let id = toy.identity();
        prop_assert!(id.residual() < 1e-12);
        prop_assert!(id.elbo <= id.log_evidence + 1e-15);
        prop_assert!(id.kl_to_posterior >= -1e-15);
    }
}
