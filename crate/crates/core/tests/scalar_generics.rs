//! The numeric kernels are generic over the scalar; exercise f32 end to end.

use rand::rngs::StdRng;
use rand::SeedableRng;

use blv_core::{
    balancing_coefficients, blv_loss_with_noise, generate_longtail_blobs, normalize, sample_noise,
    train, BlobSpec, ClassHistogram, FrequencyVectorF32, LabelBatch, LossMode, MatrixF32,
    NoiseSpecF32, TrainConfig,
};

#[test]
fn f32_pipeline_end_to_end() {
    let hist = ClassHistogram::from_counts(vec![600, 300, 100], 0);
    let freqs: FrequencyVectorF32 = normalize(&hist, 0.0f32).unwrap();
    let coeffs = balancing_coefficients(&freqs).unwrap();
    assert_eq!(coeffs.coeffs()[2], 1.0f32);
    assert!((coeffs.coeffs()[0] - 0.221_848_75f32).abs() < 1e-6);

    let spec = NoiseSpecF32::gaussian(6.0).unwrap();
    let mut rng = StdRng::seed_from_u64(9);
    let noise = sample_noise(&spec, 4, 3, &mut rng);
    assert!(noise.data().iter().all(|&v| (0.0f32..=1.0).contains(&v)));

    let logits = MatrixF32::from_rows(&vec![vec![1.0, 2.0, -0.5]; 4]);
    let targets = LabelBatch::new(vec![0, 1, 2, 255], 255);
    let out =
        blv_loss_with_noise(&logits, &targets, &coeffs, &noise, LossMode::Blv, 0.0).unwrap();
    assert!(out.loss.is_finite());
    assert_eq!(out.valid_count, 3);
    for i in 0..3 {
        let sum: f32 = out.grad.row(i).iter().sum();
        assert!(sum.abs() < 1e-5, "row {i} sums to {sum}");
    }
    assert!(out.grad.row(3).iter().all(|&v| v == 0.0));
}

#[test]
fn f32_training_runs_deterministically() {
    let blob = BlobSpec::<f32> {
        num_classes: 3,
        dims: 2,
        counts: vec![80, 40, 10],
        means: vec![vec![0.0, 1.0], vec![-0.9, -0.5], vec![0.9, -0.5]],
        stddev: 0.9,
        seed: 21,
    };
    let ds = generate_longtail_blobs(&blob).unwrap();
    let config = TrainConfig::<f32> {
        epochs: 4,
        ..TrainConfig::default()
    };
    let a = train(&config, &ds, &ds).unwrap();
    let b = train(&config, &ds, &ds).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.loss_curve.len(), 4);
    assert!(a.report.miou.is_finite());
}
