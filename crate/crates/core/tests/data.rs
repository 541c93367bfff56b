use fovb_core::data::{
    category_counts, first_moment_probe_auc, read_dataset, synth_generate, synth_generate_mix, write_dataset, Category,
    Prepared,
};
use fovb_core::Error;
use proptest::prelude::*;

#[test]
fn generation_is_deterministic() {
    let a = synth_generate(12, 4).unwrap();
    let b = synth_generate(12, 4).unwrap();
    let c = synth_generate(12, 5).unwrap();
    let bytes = |s: &[_]| {
        let mut out = Vec::new();
        write_dataset(s, &mut out).unwrap();
        out
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn file_round_trip_and_corruption() {
    let s = synth_generate(6, 1).unwrap();
    let mut out = Vec::new();
    write_dataset(&s, &mut out).unwrap();
    let back = read_dataset(out.as_slice()).unwrap();
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(out, again);
    assert!(matches!(read_dataset(&out[..out.len() - 3]), Err(Error::Integrity(_))));
    assert!(matches!(read_dataset(&b"nope"[..]), Err(Error::Integrity(_))));
}

#[test]
fn labels_follow_categories() {
    assert_eq!(Category::Real.labels(), (0, 0, 0));
    assert_eq!(Category::Fvfa.labels().0, 1);
    for c in Category::ALL {
        assert_eq!(Category::from_code(c.code()).unwrap(), c);
        let (y, ya, yv) = c.labels();
        assert_eq!(y, ya | yv);
    }
    let s = synth_generate(8, 2).unwrap();
    let cfg = fovb_core::verify::tiny_model_config();
    let p = Prepared::new(&s, cfg.input_size, cfg.patch).unwrap();
    assert_eq!(p.labels(), s.iter().map(|x| x.y()).collect::<Vec<_>>());
    let (b, lab) = p.batch(&[0, 3]);
    assert_eq!(b.len(), 2);
    assert_eq!(lab[0], vec![s[0].y(), s[3].y()]);
}

#[test]
fn first_moments_do_not_separate_classes() {
    let train = synth_generate(400, 11).unwrap();
    let eval = synth_generate(200, 12).unwrap();
    let auc = first_moment_probe_auc(&train, &eval, 32).unwrap();
    assert!((0.35..=0.65).contains(&auc), "probe AUC {auc}");
}

#[test]
fn empty_and_bad_mix_rejected() {
    assert!(synth_generate(0, 1).is_err());
    assert!(synth_generate_mix(4, 1, &[0.0; 4]).is_err());
    assert!(category_counts(3, &[-1.0, 1.0, 1.0, 1.0]).is_err());
}

proptest! {
    #[test]
    fn counts_sum_and_stay_within_one(n in 1usize..5000, w in prop::array::uniform4(0.01..1.0f64)) {
        let c = category_counts(n, &w).unwrap();
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        let total: f64 = w.iter().sum();
        for i in 0..4 {
            prop_assert!((c[i] as f64 - w[i] / total * n as f64).abs() < 1.0);
        }
    }
}
