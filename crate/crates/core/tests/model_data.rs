mod common;

use fedpda::data::{generate_domain, load_csv, write_csv, BenchmarkSpec, CsvSchema, DomainDataset, DomainShiftSpec};
use fedpda::model::{Model, SegmentKind};
use fedpda::numerics::{Matrix, Rng};

use common::{blobs, jittered, mlp};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_non_negative_and_running_stats_get_no_gradient(
        seed in 0u64..10_000,
        n in 2usize..20,
        classes in 2usize..5,
    ) {
        let model = mlp(3, &[4, 3], classes);
        let mut rng = Rng::new(seed);
        let p = jittered(&model, &mut rng, 0.5);
        let batch = blobs(&mut rng, "b", n, 3, classes, 0.3).as_batch().unwrap();
        let (loss, grad) = model.loss_and_grad(&p, &batch).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for r in model.layout().running_stat_ranges() {
            prop_assert!(grad.as_slice()[r].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn zero_output_layer_gives_log_c(seed in 0u64..10_000, classes in 2usize..6) {
        let model = mlp(3, &[5], classes);
        let mut rng = Rng::new(seed);
        let mut p = jittered(&model, &mut rng, 0.5);
        let last = model.layout().segments().iter().map(|s| s.layer).max().unwrap();
        for s in model.layout().segments() {
            if s.layer == last && matches!(s.kind, SegmentKind::Weight | SegmentKind::Bias) {
                p.as_mut_slice()[s.range.clone()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let batch = blobs(&mut rng, "b", 9, 3, classes, 0.0).as_batch().unwrap();
        let (loss, _) = model.loss_and_grad(&p, &batch).unwrap();
        prop_assert!((loss - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_sample_order(seed in 0u64..10_000, n in 1usize..40) {
        let model = mlp(3, &[4], 3);
        let mut rng = Rng::new(seed);
        let p = jittered(&model, &mut rng, 0.5);
        let data = blobs(&mut rng, "d", n, 3, 3, 0.2);
        let shuffled = data.select(&rng.permutation(n));
        let a = model.evaluate(&p, &data).unwrap();
        let b = model.evaluate(&p, &shuffled).unwrap();
        prop_assert_eq!(&a.per_class_accuracy, &b.per_class_accuracy);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss));
        for v in [a.accuracy, a.weighted_accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn csv_roundtrip_is_exact(seed in 0u64..10_000, n in 1usize..30, dim in 1usize..6) {
        let mut rng = Rng::new(seed);
        let x = Matrix::from_vec(n, dim, rng.gaussian_vec(n * dim, 0.0, 1e3).unwrap()).unwrap();
        let y = (0..n).map(|_| rng.below(4)).collect();
        let data = DomainDataset::new("site", x, y, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("site.csv");
        write_csv(&path, &data).unwrap();
        let schema = CsvSchema {
            domain_id: "site".into(),
            num_classes: Some(4),
            feature_count: Some(dim),
        };
        prop_assert_eq!(load_csv(&path, &schema).unwrap(), data);
    }

    #[test]
    fn generated_domains_are_reproducible(seed in 0u64..10_000, angle in -3.0f64..3.0) {
        let means = BenchmarkSpec::default().class_means();
        let mut spec = DomainShiftSpec::identity(10, 4);
        spec.rotation_angle = angle;
        spec.scale = 1.3;
        let a = generate_domain(&mut Rng::new(seed), "a", &spec, 40, &means).unwrap();
        let b = generate_domain(&mut Rng::new(seed), "a", &spec, 40, &means).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(DomainDataset::new("none", Matrix::zeros(0, 3), vec![], 2).is_err());
}

#[test]
fn malformed_csv_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let schema = CsvSchema {
        domain_id: "x".into(),
        num_classes: Some(2),
        feature_count: Some(2),
    };
    for body in [
        "a,b,label\n1.0,2.0\n",
        "a,b,label\n1.0,oops,0\n",
        "a,b,label\n1.0,NaN,0\n",
        "a,b,label\n1.0,2.0,5\n",
        "a,b,label\n",
    ] {
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, body).unwrap();
        assert!(load_csv(&path, &schema).is_err(), "accepted {body:?}");
    }
    assert!(load_csv(dir.path().join("missing.csv"), &schema).is_err());
}
