//! Cross-module invariants checked over randomized inputs.

use blv_core::{
    balancing_coefficients, blv_loss_with_noise, confusion, count_pixels, cross_entropy,
    generate_longtail_blobs, iou_report, normalize, read_label_map, sample_noise, softmax,
    split_labeled_unlabeled, write_label_map, BalancingCoefficients, BlobSpec, ClampRule,
    ClassHistogram, LabelBatch, LabelMap, LossMode, Matrix, NoiseFamily, NoiseSpec, SplitSpec,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    idx
}

proptest! {
    /// Coefficients depend only on count ratios, not on the absolute scale.
    #[test]
    fn coefficients_are_scale_invariant(
        counts in prop::collection::vec(1u64..10_000, 2..12),
        scale in 2u64..50,
    ) {
        let base = ClassHistogram::from_counts(counts.clone(), 0);
        let scaled = ClassHistogram::from_counts(
            counts.iter().map(|&c| c * scale).collect(),
            0,
        );
        let a = balancing_coefficients(&normalize::<f64>(&base, 0.0).unwrap()).unwrap();
        let b = balancing_coefficients(&normalize::<f64>(&scaled, 0.0).unwrap()).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    /// With strictly distinct counts the coefficient order exactly reverses
    /// the count order, and the rarest class sits at exactly 1.
    #[test]
    fn coefficients_are_anti_monotone(
        mut counts in prop::collection::vec(1u64..100_000, 2..12),
    ) {
        counts.sort_unstable();
        counts.dedup();
        prop_assume!(counts.len() >= 2);
        let hist = ClassHistogram::from_counts(counts.clone(), 0);
        let coeffs = balancing_coefficients(&normalize::<f64>(&hist, 1.0).unwrap()).unwrap();
        let count_order = argsort(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        let mut coeff_order = argsort(coeffs.coeffs());
        coeff_order.reverse();
        prop_assert_eq!(count_order, coeff_order);
        let min_class = (0..counts.len()).min_by_key(|&k| counts[k]).unwrap();
        prop_assert_eq!(coeffs.coeffs()[min_class], 1.0);
    }

    /// Counting a concatenation equals merging per-part histograms.
    #[test]
    fn histogram_additivity(
        a in prop::collection::vec(0u32..6, 0..200),
        b in prop::collection::vec(0u32..6, 0..200),
    ) {
        let whole: Vec<u32> = a.iter().chain(&b).copied().collect();
        let ha = count_pixels(&LabelBatch::new(a, 255), 6).unwrap();
        let hb = count_pixels(&LabelBatch::new(b, 255), 6).unwrap();
        let hw = count_pixels(&LabelBatch::new(whole, 255), 6).unwrap();
        let mut merged = ha.clone();
        merged.merge(&hb).unwrap();
        prop_assert_eq!(merged, hw);
    }

    /// Every sampled value stays in [0, 1] for every family and clamp rule.
    #[test]
    fn noise_is_bounded(
        family in 0usize..4,
        clamp in 0usize..2,
        sigma in 0.0f64..20.0,
        alpha in 0.05f64..5.0,
        beta in 0.05f64..5.0,
        lambda in 0.05f64..10.0,
        seed in any::<u64>(),
    ) {
        let family = [
            NoiseFamily::Gaussian,
            NoiseFamily::Uniform,
            NoiseFamily::Beta,
            NoiseFamily::Exponential,
        ][family];
        let clamp = [ClampRule::ClampRaw, ClampRule::AbsThenClamp][clamp];
        let spec = NoiseSpec::<f64>::new(family, sigma, alpha, beta, lambda, clamp).unwrap();
        let mut rng = StdRng::seed_from_u64(seed);
        let t = sample_noise(&spec, 16, 4, &mut rng);
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// softmax(z + c) == softmax(z) and rows sum to one.
    #[test]
    fn softmax_shift_invariance(
        row in prop::collection::vec(-30.0f64..30.0, 2..8),
        shift in -100.0f64..100.0,
    ) {
        let z = Matrix::from_rows(std::slice::from_ref(&row));
        let shifted = Matrix::from_rows(&[row.iter().map(|&v| v + shift).collect::<Vec<_>>()]);
        let p = softmax(&z).unwrap();
        let q = softmax(&shifted).unwrap();
        let sum: f64 = p.row(0).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in p.row(0).iter().zip(q.row(0)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Non-ignored gradient rows sum to zero; ignored rows are zero.
    #[test]
    fn gradient_row_sums(
        rows in prop::collection::vec(
            prop::collection::vec(-10.0f64..10.0, 4),
            1..10,
        ),
        labels in prop::collection::vec(0u32..5, 10),
    ) {
        let n = rows.len();
        let logits = Matrix::from_rows(&rows);
        let labels: Vec<u32> = labels[..n]
            .iter()
            .map(|&l| if l == 4 { 255 } else { l })
            .collect();
        prop_assume!(labels.iter().any(|&l| l != 255));
        let targets = LabelBatch::new(labels.clone(), 255);
        let (_, grad) = cross_entropy(&logits, &targets).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let s: f64 = grad.row(i).iter().sum();
            if label == 255 {
                prop_assert!(grad.row(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }

    /// When the target class receives the smallest perturbation in each row,
    /// the perturbed loss cannot drop below the clean loss.
    #[test]
    fn adversarial_perturbation_never_reduces_loss(
        rows in prop::collection::vec(
            prop::collection::vec(-5.0f64..5.0, 3),
            1..8,
        ),
        labels in prop::collection::vec(0u32..3, 8),
        floor in 0.0f64..0.4,
    ) {
        let n = rows.len();
        let logits = Matrix::from_rows(&rows);
        let labels = labels[..n].to_vec();
        let targets = LabelBatch::new(labels.clone(), 255);
        let mut noise = Matrix::zeros(n, 3);
        for i in 0..n {
            for j in 0..3 {
                noise[(i, j)] = if j == labels[i] as usize { floor } else { floor + 0.5 };
            }
        }
        let coeffs = BalancingCoefficients::from_parts(vec![1.0; 3], vec![1.0; 3]);
        let (clean, _) = cross_entropy(&logits, &targets).unwrap();
        let out = blv_loss_with_noise(&logits, &targets, &coeffs, &noise, LossMode::Blv, 0.0)
            .unwrap();
        prop_assert!(out.loss >= clean - 1e-12, "{} < {}", out.loss, clean);
    }

    /// Canonical PGM serialization is a fixed point of read -> write.
    #[test]
    fn pgm_round_trip_is_idempotent(
        width in 1usize..12,
        height in 1usize..12,
        seed in any::<u32>(),
    ) {
        let pixels: Vec<u8> = (0..width * height)
            .map(|i| ((seed as usize).wrapping_mul(31).wrapping_add(i * 7) % 256) as u8)
            .collect();
        let map = LabelMap { width, height, maxval: 255, pixels };
        let bytes = write_label_map(&map);
        let reparsed = read_label_map(&bytes).unwrap();
        prop_assert_eq!(&reparsed, &map);
        prop_assert_eq!(write_label_map(&reparsed), bytes);
    }

    /// Confusion matrices are invariant to shuffling the (pred, gt) pairs.
    #[test]
    fn confusion_permutation_invariance(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..100),
        rot in 0usize..100,
    ) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let k = rot % pairs.len();
        let mut rotated = pairs.clone();
        rotated.rotate_left(k);
        let pred_r: Vec<u32> = rotated.iter().map(|p| p.0).collect();
        let gt_r: Vec<u32> = rotated.iter().map(|p| p.1).collect();
        let a = confusion(&pred, &gt, 4, 255).unwrap();
        let b = confusion(&pred_r, &gt_r, 4, 255).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Defined IoUs stay in [0, 1]; IoU hits 1 exactly when the class's
    /// row and column are purely diagonal (recall = precision = 1).
    #[test]
    fn iou_bounds_and_diagonal_equivalence(
        pairs in prop::collection::vec((0u32..3, 0u32..3), 1..80),
    ) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&pred, &gt, 3, 255).unwrap();
        let report = iou_report::<f64>(&cm, &[]).unwrap();
        for (k, iou) in report.per_class_iou.iter().enumerate() {
            if let Some(v) = iou {
                prop_assert!((0.0..=1.0).contains(v));
                let off_row: u64 = (0..3).filter(|&j| j != k).map(|j| cm.cell(k, j)).sum();
                let off_col: u64 = (0..3).filter(|&i| i != k).map(|i| cm.cell(i, k)).sum();
                prop_assert_eq!(*v == 1.0, off_row == 0 && off_col == 0);
                if *v == 1.0 {
                    prop_assert_eq!(report.per_class_recall[k], Some(1.0));
                }
            }
        }
    }
}

/// Under the raw clamp, a wider gaussian pushes more mass toward 1, so the
/// empirical mean over 1e5 draws rises with sigma across the grid.
#[test]
fn clamped_gaussian_mean_is_monotone_in_sigma() {
    let mut last = 0.0f64;
    for sigma in [1.0, 2.0, 4.0, 6.0, 8.0] {
        let spec = NoiseSpec::<f64>::gaussian(sigma).unwrap();
        let mut rng = StdRng::seed_from_u64(2024);
        let t = sample_noise(&spec, 1000, 100, &mut rng);
        let mean = t.data().iter().sum::<f64>() / t.data().len() as f64;
        assert!(mean > last, "mean {mean} at sigma {sigma} not above {last}");
        last = mean;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Random split: labeled and unlabeled indices cover the input exactly.
    #[test]
    fn split_is_a_partition(fraction in 0.05f64..1.0, seed in any::<u64>()) {
        let ds = generate_longtail_blobs(&BlobSpec {
            num_classes: 2,
            dims: 2,
            counts: vec![23, 17],
            means: vec![vec![0.0, 0.0], vec![4.0, 4.0]],
            stddev: 1.0,
            seed: 7,
        })
        .unwrap();
        let (labeled, unlabeled) = split_labeled_unlabeled(
            &ds,
            &SplitSpec { labeled_fraction: fraction, seed },
        )
        .unwrap();
        prop_assert_eq!(labeled.len() + unlabeled.len(), ds.len());
        prop_assert_eq!(labeled.len(), (fraction * 40.0).round() as usize);

        // Multiset equality over feature rows: each input row appears once.
        let mut seen: Vec<&[f64]> = labeled
            .features
            .iter_rows()
            .chain(unlabeled.features.iter_rows())
            .collect();
        let mut expected: Vec<&[f64]> = ds.features.iter_rows().collect();
        let key = |r: &&[f64]| (r[0].to_bits(), r[1].to_bits());
        seen.sort_by_key(key);
        expected.sort_by_key(key);
        prop_assert_eq!(seen, expected);
    }
}
