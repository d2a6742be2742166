use ndarray::Array1;
use podcount::adversarial::{
    count_mae, da_train_step, detection_step, discriminator_step, Discriminator, DomainBatch,
    GrlConfig, RoiConfig, Sgd, ToyDetector, ToyTask,
};
use podcount::detection::{count_from_detections, Domain};
use podcount::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn overfits_ten_images() {
    let task = ToyTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = DomainBatch::new(Domain::Source, task.batch(Domain::Source, 10, &mut rng));
    let mut det = ToyDetector::build(4);
    let sgd = Sgd::default();
    for _ in 0..500 {
        detection_step(&mut det, &batch, &sgd).unwrap();
    }
    assert_eq!(count_mae(&det, &batch.samples), 0.0);
    for s in &batch.samples {
        assert_eq!(
            count_from_detections(&det.detect_array(&s.image)),
            count_from_detections(&s.labels)
        );
    }
}

#[test]
fn discriminator_separates_features_split_by_a_hyperplane() {
    // domains sit on either side of the plane normal . x = 0, with margin
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 24;
    let normal = Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0f64..1.0)));
    let unit = &normal / normal.dot(&normal).sqrt();
    let mut draw = |side: f64| {
        (0..32)
            .map(|_| {
                let x = Array1::from_iter((0..dim).map(|_| rng.random_range(-0.5..0.5)));
                let along = x.dot(&unit);
                &x - &(&unit * along) + &(&unit * side * rng.random_range(0.3..0.8))
            })
            .collect::<Vec<_>>()
    };
    let (src, tgt) = (draw(1.0), draw(-1.0));
    let mut dis = Discriminator::new(dim, Discriminator::DEFAULT_HIDDEN, 3);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = discriminator_step(&mut dis, &src, &tgt, 0.5).unwrap();
    }
    let final_loss = {
        let s: Vec<f64> = src.iter().map(|v| (1.0 - dis.score(v)).max(0.0)).collect();
        let t: Vec<f64> = tgt.iter().map(|v| (1.0 + dis.score(v)).max(0.0)).collect();
        s.iter().sum::<f64>() / s.len() as f64 + t.iter().sum::<f64>() / t.len() as f64
    };
    assert!(loss < 0.1, "loss during last step {loss}");
    assert!(final_loss < 0.1, "loss after training {final_loss}");
}

#[test]
fn frozen_detector_features_are_separable() {
    let task = ToyTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let det = ToyDetector::build(8);
    let roi = RoiConfig::default();
    let src = task.batch(Domain::Source, 16, &mut rng);
    let tgt = task.batch(Domain::Target, 16, &mut rng);
    let boxes = |v: &[podcount::adversarial::ToySample]| podcount::adversarial::labeled_rois(v, roi.top_k);
    let fs = podcount::adversarial::features(&det, &src, &boxes(&src), &roi).unwrap();
    let ft = podcount::adversarial::features(&det, &tgt, &boxes(&tgt), &roi).unwrap();
    let mut dis = Discriminator::new(fs[0].len(), Discriminator::DEFAULT_HIDDEN, 9);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = discriminator_step(&mut dis, &fs, &ft, 0.5).unwrap();
    }
    assert!(loss < 0.1, "dis_loss {loss}");
}

#[test]
fn empty_target_batch_falls_back_to_detection() {
    let task = ToyTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = DomainBatch::new(Domain::Source, task.batch(Domain::Source, 4, &mut rng));
    let empty = DomainBatch::new(Domain::Target, Vec::new());
    let sgd = Sgd::default();
    let mut a = ToyDetector::build(5);
    let mut b = a.clone();
    let mut dis = Discriminator::new(24, 8, 1);
    let before = dis.clone();
    let out = da_train_step(
        &source,
        &empty,
        &mut a,
        &mut dis,
        &GrlConfig::default(),
        &RoiConfig::default(),
        &sgd,
    )
    .unwrap();
    let det_loss = detection_step(&mut b, &source, &sgd).unwrap();
    assert_eq!(out.dis_loss, 0.0);
    assert_eq!(out.det_loss, det_loss);
    assert_eq!(out.total, det_loss);
    assert_eq!(a, b);
    assert_eq!(dis, before);
}

#[test]
fn empty_source_batch_is_an_error() {
    let task = ToyTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = DomainBatch::new(Domain::Target, task.batch(Domain::Target, 4, &mut rng));
    let empty = DomainBatch::new(Domain::Source, Vec::new());
    let mut det = ToyDetector::build(5);
    let mut dis = Discriminator::new(24, 8, 1);
    let err = da_train_step(
        &empty,
        &target,
        &mut det,
        &mut dis,
        &GrlConfig::default(),
        &RoiConfig::default(),
        &Sgd::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}
