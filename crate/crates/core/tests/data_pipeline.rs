use mixssl::data::*;
use mixssl::rng::stream;
use ndarray::Array3;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize, pixels: &[f64]) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((c, h, w), |(i, y, x)| pixels[(i * h + y) * w + x])).unwrap()
}

fn pair() -> impl Strategy<Value = (ImageTensor, ImageTensor)> {
    (1usize..=3, 8usize..=12, 8usize..=12).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(0.0..=1.0f64, n),
        )
            .prop_map(move |(a, b)| (image(c, h, w, &a), image(c, h, w, &b)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mix_endpoints_are_exact((t, a) in pair()) {
        prop_assert_eq!(mix(&t, &a, 0.0).unwrap(), t.clone());
        prop_assert_eq!(mix(&t, &a, 1.0).unwrap(), a);
    }

    #[test]
    fn mix_is_convex_and_linear((t, a) in pair(), lambda in 0.0..=1.0f64) {
        let m = mix(&t, &a, lambda).unwrap();
        for ((&mv, &tv), &av) in m.pixels().iter().zip(t.pixels()).zip(a.pixels()) {
            prop_assert!(mv >= tv.min(av) && mv <= tv.max(av));
            prop_assert!((mv - tv - lambda * (av - tv)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_with_itself_is_identity((t, _) in pair(), lambda in 0.0..=1.0f64) {
        prop_assert_eq!(mix(&t, &t, lambda).unwrap(), t);
    }

    #[test]
    fn augmentation_keeps_range_and_size((t, _) in pair(), seed in any::<u64>()) {
        let spec = AugmentationSpec::pretraining((10, 9));
        let out = augment(&t, &spec, &mut stream(seed, "prop", &[])).unwrap();
        prop_assert_eq!((out.height(), out.width()), (10, 9));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn mix_rejects_bad_input() {
    let t = ImageTensor::filled(3, 8, 8, 0.2).unwrap();
    let a = ImageTensor::filled(3, 8, 9, 0.2).unwrap();
    assert!(matches!(mix(&t, &a, 0.5), Err(mixssl::Error::InvalidInput(_))));
    assert!(matches!(mix(&t, &t, 1.5), Err(mixssl::Error::InvalidInput(_))));
    assert!(matches!(mix(&t, &t, f64::NAN), Err(mixssl::Error::InvalidInput(_))));
}

#[test]
fn lambda_draws_lie_in_unit_interval_with_uniform_mean() {
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerSample, 3).unwrap();
    let draws: Vec<f64> = (0..200).flat_map(|b| sampler.sample(50, b).unwrap()).collect();
    assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    let per_batch = LambdaSampler::new(1.0, LambdaMode::PerBatch, 3).unwrap().sample(8, 0).unwrap();
    assert!(per_batch.iter().all(|&l| l == per_batch[0]));
    assert_eq!(sampler.sample(8, 4).unwrap(), sampler.sample(8, 4).unwrap());
}

#[test]
fn identity_augmentation_is_a_noop() {
    let corpora = generate_synthetic(&SyntheticSpec::new(2, 2, (16, 16), 0.5, 1), Split::Train).unwrap();
    let img = &corpora.target.samples[0].image;
    let out = augment(img, &AugmentationSpec::identity((16, 16)), &mut stream(0, "x", &[])).unwrap();
    assert_eq!(&out, img);
}

#[test]
fn batches_are_reproducible_and_self_consistent() {
    let spec = SyntheticSpec::new(2, 4, (16, 16), 0.5, 2);
    let corpora = generate_synthetic(&spec, Split::Train).unwrap();
    let targets: Vec<&LabeledImage> = corpora.target.samples.iter().collect();
    let batch_spec = BatchSpec {
        target_augment: AugmentationSpec::basic((16, 16)),
        aux_augment: None,
        view_augment: Some(AugmentationSpec::basic((16, 16))),
        seed: 8,
    };
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerSample, 8).unwrap();
    let a = make_pretrain_batch(&targets, &corpora.auxiliary.samples, &batch_spec, &sampler, 3).unwrap();
    let b = make_pretrain_batch(&targets, &corpora.auxiliary.samples, &batch_spec, &sampler, 3).unwrap();
    assert_eq!(a.mixed, b.mixed);
    assert_eq!(a.lambda, b.lambda);
    assert_eq!(a.len(), 8);
    let labels = a.aux_label.as_ref().unwrap();
    for (i, &idx) in a.aux_index.iter().enumerate() {
        assert_eq!(labels[i], corpora.auxiliary.samples[idx].label.unwrap());
    }
    let (v1, v2) = a.views.as_ref().unwrap();
    assert_eq!(v1.dim(), a.mixed.dim());
    assert_ne!(v1, v2);
    let c = make_pretrain_batch(&targets, &corpora.auxiliary.samples, &batch_spec, &sampler, 4).unwrap();
    assert_ne!(a.mixed, c.mixed);
}

#[test]
fn synthetic_corpora_are_deterministic_and_roundtrip_through_png() {
    let spec = SyntheticSpec::new(3, 5, (12, 12), 0.3, 4);
    let one = generate_synthetic(&spec, Split::Train).unwrap();
    let two = generate_synthetic(&spec, Split::Train).unwrap();
    assert_eq!(one.target.samples, two.target.samples);
    assert_eq!(one.target.len(), 15);
    assert_eq!(one.target.class_count(), 3);
    let val = generate_synthetic(&spec, Split::Val).unwrap();
    assert_ne!(one.target.samples[0], val.target.samples[0]);

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), Split::Train, &one.target).unwrap();
    let loaded = load_dataset(dir.path(), Split::Train).unwrap();
    assert_eq!(loaded.class_names, one.target.class_names);
    assert_eq!(loaded.labels().unwrap(), one.target.labels().unwrap());
    for (l, o) in loaded.samples.iter().zip(&one.target.samples) {
        let err = l.image.pixels().iter().zip(o.image.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
    let hash = content_hash(dir.path()).unwrap();
    assert_eq!(hash, content_hash(dir.path()).unwrap());
}

#[test]
fn loading_reports_missing_and_empty_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), Split::Train), Err(mixssl::Error::DatasetNotFound(_))));
    std::fs::create_dir_all(dir.path().join("train/a")).unwrap();
    std::fs::write(dir.path().join("train/a/broken.png"), b"not a png").unwrap();
    assert!(matches!(load_dataset(dir.path(), Split::Train), Err(mixssl::Error::EmptyDataset(_))));
}

#[test]
fn class_count_below_two_is_rejected() {
    let spec = SyntheticSpec::new(1, 5, (12, 12), 0.3, 4);
    assert!(matches!(generate_synthetic(&spec, Split::Train), Err(mixssl::Error::Config(_))));
}
