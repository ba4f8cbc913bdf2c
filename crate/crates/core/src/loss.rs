//! Softmax cross-entropy over perturbed logits, with the analytic gradient
//! taken with respect to the original logits.
//!
//! The perturbation adds `coeffs[k] * noise[i][k]` to each logit during
//! training only. Noise and coefficients are constants on the gradient path,
//! so the gradient is `(softmax(perturbed) - onehot) / valid_count` row by
//! row. All log-probabilities go through max-subtracted log-sum-exp.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::LabelBatch;
use crate::histogram::BalancingCoefficients;
use crate::matrix::Matrix;
use crate::num::Real;
use crate::variation::{clamped_mean, sample_noise, NoiseSpec, SigmaSchedule, VariationError};

/// Dense per-instance logits, N instances by C classes.
pub type LogitBatch<T> = Matrix<T>;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("logit at row {row}, column {col} is not finite")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("need at least 2 classes, got {cols}")]
    TooFewClasses { cols: usize },
    #[error("expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("coefficient vector has length {got}, expected {expected}")]
    CoefficientLength { expected: usize, got: usize },
    #[error("label batch has {got} labels for {expected} logit rows")]
    LabelLength { expected: usize, got: usize },
    #[error("label {label} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("every instance is ignored; loss is undefined")]
    NoValidInstances,
    #[error(transparent)]
    Variation(#[from] VariationError),
}

/// Which pieces of the perturbation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// No perturbation at all.
    PlainCe,
    /// Per-class coefficient times stochastic noise.
    Blv,
    /// Per-class coefficient times the constant mean of the clamped family.
    NoVariation,
    /// Stochastic noise with the per-class coefficient removed.
    NoBalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput<T> {
    /// Mean loss over non-ignored instances.
    pub loss: T,
    /// d(loss)/d(logits); zero rows for ignored instances.
    pub grad: Matrix<T>,
    pub valid_count: usize,
    /// The logits the loss actually saw, for diagnostics.
    pub perturbed_logits: Option<Matrix<T>>,
}

fn check_finite<T: Real>(logits: &Matrix<T>) -> Result<(), LossError> {
    if logits.cols() < 2 {
        return Err(LossError::TooFewClasses {
            cols: logits.cols(),
        });
    }
    for i in 0..logits.rows() {
        if let Some(j) = logits.row(i).iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteLogit { row: i, col: j });
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &LogitBatch<T>) -> Result<Matrix<T>, LossError> {
    check_finite(logits)?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_row_in_place(out.row_mut(i));
    }
    Ok(out)
}

fn softmax_row_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Mean negative log-likelihood over non-ignored instances, and its gradient.
pub fn cross_entropy<T: Real>(
    logits: &LogitBatch<T>,
    targets: &LabelBatch,
) -> Result<(T, Matrix<T>), LossError> {
    check_finite(logits)?;
    let (n, c) = logits.shape();
    if targets.len() != n {
        return Err(LossError::LabelLength {
            expected: n,
            got: targets.len(),
        });
    }
    if let Some((index, label)) = targets.first_invalid(c) {
        return Err(LossError::LabelOutOfRange {
            index,
            label,
            num_classes: c,
        });
    }
    let valid_count = targets
        .labels
        .iter()
        .filter(|&&l| l != targets.ignore_index)
        .count();
    if valid_count == 0 {
        return Err(LossError::NoValidInstances);
    }
    let inv_valid = T::one() / T::from_len(valid_count);

    let mut grad = Matrix::zeros(n, c);
    let mut loss = T::zero();
    for i in 0..n {
        let label = targets.labels[i];
        if label == targets.ignore_index {
            continue;
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[label as usize];
        let grow = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            grow[j] = (z - lse).exp() * inv_valid;
        }
        grow[label as usize] -= inv_valid;
    }
    Ok((loss * inv_valid, grad))
}

/// Add the mode's perturbation to the logits.
///
/// `kappa` is the constant used by the no-variation mode; callers derive it
/// from the clamped mean of the active noise family.
pub fn perturb_logits<T: Real>(
    logits: &LogitBatch<T>,
    coeffs: &BalancingCoefficients<T>,
    noise: &Matrix<T>,
    mode: LossMode,
    kappa: T,
) -> Result<LogitBatch<T>, LossError> {
    if noise.shape() != logits.shape() {
        return Err(LossError::ShapeMismatch {
            expected: logits.shape(),
            got: noise.shape(),
        });
    }
    if coeffs.len() != logits.cols() {
        return Err(LossError::CoefficientLength {
            expected: logits.cols(),
            got: coeffs.len(),
        });
    }
    let mut out = logits.clone();
    match mode {
        LossMode::PlainCe => {}
        LossMode::Blv => {
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let nrow = noise.row(i);
                for ((v, &c), &e) in row.iter_mut().zip(coeffs.coeffs()).zip(nrow) {
                    *v += c * e;
                }
            }
        }
        LossMode::NoVariation => {
            for i in 0..out.rows() {
                for (v, &c) in out.row_mut(i).iter_mut().zip(coeffs.coeffs()) {
                    *v += c * kappa;
                }
            }
        }
        LossMode::NoBalance => {
            for i in 0..out.rows() {
                for (v, &e) in out.row_mut(i).iter_mut().zip(noise.row(i)) {
                    *v += e;
                }
            }
        }
    }
    Ok(out)
}

/// Perturbed cross-entropy with the noise tensor supplied by the caller.
pub fn blv_loss_with_noise<T: Real>(
    logits: &LogitBatch<T>,
    targets: &LabelBatch,
    coeffs: &BalancingCoefficients<T>,
    noise: &Matrix<T>,
    mode: LossMode,
    kappa: T,
) -> Result<LossOutput<T>, LossError> {
    let perturbed = perturb_logits(logits, coeffs, noise, mode, kappa)?;
    let (loss, grad) = cross_entropy(&perturbed, targets)?;
    Ok(LossOutput {
        loss,
        grad,
        valid_count: targets
            .labels
            .iter()
            .filter(|&&l| l != targets.ignore_index)
            .count(),
        perturbed_logits: Some(perturbed),
    })
}

/// Sample noise once at the scheduled sigma, perturb, and take cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn blv_loss<T: Real, R: Rng + ?Sized>(
    logits: &LogitBatch<T>,
    targets: &LabelBatch,
    coeffs: &BalancingCoefficients<T>,
    noise_spec: &NoiseSpec<T>,
    schedule: &SigmaSchedule<T>,
    t: u64,
    mode: LossMode,
    rng: &mut R,
) -> Result<LossOutput<T>, LossError> {
    let sigma = schedule.sigma_at(t)?;
    let spec = noise_spec.with_sigma(sigma);
    let (rows, cols) = logits.shape();
    let noise = sample_noise(&spec, rows, cols, rng);
    let kappa = clamped_mean(&spec);
    blv_loss_with_noise(logits, targets, coeffs, &noise, mode, kappa)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::batch::DEFAULT_IGNORE_INDEX;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn targets(labels: &[u32]) -> LabelBatch {
        LabelBatch::new(labels.to_vec(), DEFAULT_IGNORE_INDEX)
    }

    fn unit_coeffs(c: usize) -> BalancingCoefficients<f64> {
        BalancingCoefficients::from_parts(vec![1.0; c], vec![1.0; c])
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let p = softmax(&Matrix::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]])).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Matrix::from_rows(&[vec![0.0, 2.0f64.ln()]])).unwrap();
        assert!((p[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&Matrix::from_rows(&[vec![1000.0, 1000.0]])).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = softmax(&Matrix::from_rows(&[vec![0.0, f64::NAN]])).unwrap_err();
        assert_eq!(err, LossError::NonFiniteLogit { row: 0, col: 1 });
    }

    #[test]
    fn cross_entropy_single_instance() {
        let (loss, grad) =
            cross_entropy(&Matrix::from_rows(&[vec![0.0, 0.0]]), &targets(&[0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((grad[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let (loss, _) =
            cross_entropy(&Matrix::from_rows(&[vec![50.0, 0.0]]), &targets(&[0])).unwrap();
        assert!(loss < 1e-12);
        let (loss, _) = cross_entropy(&Matrix::from_rows(&[vec![0.0; 4]]), &targets(&[1])).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_ignores_marked_rows() {
        let logits = Matrix::from_rows(&[vec![3.0, -1.0], vec![0.0, 0.0]]);
        let (loss, grad) = cross_entropy(&logits, &targets(&[255, 0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert_eq!(
            cross_entropy(&logits, &targets(&[255])).unwrap_err(),
            LossError::NoValidInstances
        );
    }

    #[test]
    fn perturb_matches_hand_arithmetic() {
        let logits = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let coeffs = BalancingCoefficients::from_parts(vec![0.2, 1.0], vec![0.2, 1.0]);
        let noise = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let z = perturb_logits(&logits, &coeffs, &noise, LossMode::Blv, 0.0).unwrap();
        assert_eq!(z.row(0), &[1.1, 2.5]);

        let z = perturb_logits(&logits, &coeffs, &noise, LossMode::PlainCe, 0.0).unwrap();
        assert_eq!(z, logits);

        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let noise = Matrix::from_rows(&[vec![0.3, 0.7]]);
        let z = perturb_logits(&logits, &unit_coeffs(2), &noise, LossMode::NoBalance, 0.0).unwrap();
        assert_eq!(z.row(0), &[0.3, 0.7]);
    }

    #[test]
    fn perturb_rejects_shape_mismatch() {
        let logits = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let noise = Matrix::<f64>::zeros(2, 2);
        assert!(matches!(
            perturb_logits(&logits, &unit_coeffs(2), &noise, LossMode::Blv, 0.0),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn frozen_noise_loss_matches_scalar_log_sum_exp_oracle() {
        // -log softmax([1.1, 2.5])[1] = ln(1 + e^-1.4), mpmath at 40 digits.
        let logits = Matrix::<f64>::from_rows(&[vec![1.0, 2.0]]);
        let coeffs = BalancingCoefficients::from_parts(vec![0.2, 1.0], vec![0.2, 1.0]);
        let noise = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let out = blv_loss_with_noise(&logits, &targets(&[1]), &coeffs, &noise, LossMode::Blv, 0.0)
            .unwrap();
        assert!((out.loss - 0.220417409918450926604832656431063939168).abs() < 1e-15);
        assert_eq!(out.valid_count, 1);
    }

    #[test]
    fn disabled_noise_reduces_to_cross_entropy_for_every_mode() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![-0.5, 0.1, 0.4]]);
        let t = targets(&[2, 1]);
        let coeffs = BalancingCoefficients::from_parts(vec![0.1, 0.6, 1.0], vec![0.2, 1.2, 2.0]);
        let (ce_loss, ce_grad) = cross_entropy(&logits, &t).unwrap();
        let spec = NoiseSpec::<f64>::none();
        let schedule = SigmaSchedule::constant(6.0);
        for mode in [
            LossMode::PlainCe,
            LossMode::Blv,
            LossMode::NoVariation,
            LossMode::NoBalance,
        ] {
            let mut rng = StdRng::seed_from_u64(3);
            let out = blv_loss(&logits, &t, &coeffs, &spec, &schedule, 0, mode, &mut rng).unwrap();
            assert_eq!(out.loss, ce_loss, "{mode:?}");
            assert_eq!(out.grad, ce_grad, "{mode:?}");
        }
    }

    #[test]
    fn all_ignored_propagates_degenerate_error() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let spec = NoiseSpec::<f64>::gaussian(6.0).unwrap();
        let schedule = SigmaSchedule::constant(6.0);
        let mut rng = StdRng::seed_from_u64(0);
        let err = blv_loss(
            &logits,
            &targets(&[255]),
            &unit_coeffs(2),
            &spec,
            &schedule,
            0,
            LossMode::Blv,
            &mut rng,
        )
        .unwrap_err();
        assert_eq!(err, LossError::NoValidInstances);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![-0.5, 0.1, 0.4]]);
        let (_, grad) = cross_entropy(&logits, &targets(&[2, 1])).unwrap();
        for i in 0..grad.rows() {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-9);
        }
    }
}
