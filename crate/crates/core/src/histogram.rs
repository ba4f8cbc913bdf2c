//! Per-class pixel counting and the log-inverse-frequency balancing coefficients.
//!
//! Counting feeds a smoothed frequency vector, and each class k then receives
//! the coefficient `ln(1/q_k)` normalized so the rarest class maps to exactly 1.
//! Rarer classes always receive strictly larger coefficients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::LabelBatch;
use crate::num::Real;

#[derive(Debug, Error, PartialEq)]
pub enum HistogramError {
    #[error("label {label} at index {index} is out of range for {num_classes} classes (ignore index {ignore_index})")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: usize,
        ignore_index: u32,
    },
    #[error("smoothing must be finite and >= 0, got {value}")]
    InvalidSmoothing { value: f64 },
    #[error("all counts are zero and smoothing is zero; frequencies are undefined")]
    DegenerateHistogram,
    #[error("num_classes must be positive")]
    NoClasses,
    #[error("frequency {value} for class {class} must be strictly positive")]
    NonPositiveFrequency { class: usize, value: f64 },
    #[error("frequencies are invalid: {reason}")]
    InvalidFrequencies { reason: String },
    #[error("cannot merge histograms with {left} and {right} classes")]
    ClassCountMismatch { left: usize, right: usize },
}

/// Per-class pixel counts plus the number of ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    counts: Vec<u64>,
    ignored: u64,
}

impl ClassHistogram {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
            ignored: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>, ignored: u64) -> Self {
        Self { counts, ignored }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total_valid(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise accumulation; counting a concatenation equals merging parts.
    pub fn merge(&mut self, other: &Self) -> Result<(), HistogramError> {
        if self.counts.len() != other.counts.len() {
            return Err(HistogramError::ClassCountMismatch {
                left: self.counts.len(),
                right: other.counts.len(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Per-class frequencies in [0, 1] summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector<T> {
    freqs: Vec<T>,
}

impl<T: Real> FrequencyVector<T> {
    pub fn new(freqs: Vec<T>) -> Result<Self, HistogramError> {
        if freqs.is_empty() {
            return Err(HistogramError::InvalidFrequencies {
                reason: "empty vector".into(),
            });
        }
        let mut sum = T::zero();
        for (k, &f) in freqs.iter().enumerate() {
            if !f.is_finite() || f < T::zero() || f > T::one() {
                return Err(HistogramError::InvalidFrequencies {
                    reason: format!("entry {k} = {f} outside [0, 1]"),
                });
            }
            sum += f;
        }
        let tol = T::cast(1e-9).max(T::epsilon() * T::from_len(8 * freqs.len()));
        if (sum - T::one()).abs() > tol {
            return Err(HistogramError::InvalidFrequencies {
                reason: format!("entries sum to {sum}, not 1"),
            });
        }
        Ok(Self { freqs })
    }

    pub fn freqs(&self) -> &[T] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// The normalized balancing coefficients `ln(1/q_k) / max_j ln(1/q_j)`.
///
/// `raw` keeps the unnormalized logs; `coeffs` has maximum exactly 1 and the
/// ordering is strictly inverse to the frequency ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingCoefficients<T> {
    coeffs: Vec<T>,
    raw: Vec<T>,
}

impl<T: Real> BalancingCoefficients<T> {
    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Coefficients without input validation, for tests and fixed pipelines.
    pub fn from_parts(coeffs: Vec<T>, raw: Vec<T>) -> Self {
        Self { coeffs, raw }
    }
}

/// Count occurrences of each class in the batch at pixel granularity.
pub fn count_pixels(
    labels: &LabelBatch,
    num_classes: usize,
) -> Result<ClassHistogram, HistogramError> {
    if num_classes == 0 {
        return Err(HistogramError::NoClasses);
    }
    let mut hist = ClassHistogram::new(num_classes);
    for (index, &label) in labels.labels.iter().enumerate() {
        if label == labels.ignore_index {
            hist.ignored += 1;
        } else if (label as usize) < num_classes {
            hist.counts[label as usize] += 1;
        } else {
            return Err(HistogramError::LabelOutOfRange {
                index,
                label,
                num_classes,
                ignore_index: labels.ignore_index,
            });
        }
    }
    Ok(hist)
}

/// Additively smoothed frequencies: `(counts[k] + s) / (total + C*s)`.
pub fn normalize<T: Real>(
    hist: &ClassHistogram,
    smoothing: T,
) -> Result<FrequencyVector<T>, HistogramError> {
    if !smoothing.is_finite() || smoothing < T::zero() {
        return Err(HistogramError::InvalidSmoothing {
            value: smoothing.widen(),
        });
    }
    let total = T::from_count(hist.total_valid()) + smoothing * T::from_len(hist.num_classes());
    if total <= T::zero() {
        return Err(HistogramError::DegenerateHistogram);
    }
    let freqs = hist
        .counts
        .iter()
        .map(|&c| (T::from_count(c) + smoothing) / total)
        .collect();
    FrequencyVector::new(freqs)
}

/// Pool the pixel counts of several pseudo-label batches, then normalize.
///
/// Counts stay in integer arithmetic until the final division. Intended to
/// run once per epoch on the current model's pseudo-labels.
pub fn update_from_pseudo_labels<T: Real>(
    pseudo_label_batches: &[LabelBatch],
    num_classes: usize,
    smoothing: T,
) -> Result<FrequencyVector<T>, HistogramError> {
    let mut pooled = ClassHistogram::new(num_classes);
    for batch in pseudo_label_batches {
        pooled.merge(&count_pixels(batch, num_classes)?)?;
    }
    normalize(&pooled, smoothing)
}

/// Eq-style coefficients `c_k = ln(1/q_k)`, normalized by their maximum.
///
/// All frequencies must be strictly positive; callers smooth zero counts
/// first. Uniform frequencies give every class the coefficient 1.
pub fn balancing_coefficients<T: Real>(
    freqs: &FrequencyVector<T>,
) -> Result<BalancingCoefficients<T>, HistogramError> {
    let mut raw = Vec::with_capacity(freqs.len());
    for (class, &f) in freqs.freqs().iter().enumerate() {
        if !f.is_finite() || f <= T::zero() {
            return Err(HistogramError::NonPositiveFrequency {
                class,
                value: f.widen(),
            });
        }
        raw.push(-f.ln());
    }
    let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
    if max <= T::zero() {
        // Only reachable if every frequency is 1, which new() rules out for C >= 2.
        return Err(HistogramError::InvalidFrequencies {
            reason: "coefficients degenerate: all frequencies at 1".into(),
        });
    }
    let coeffs = raw.iter().map(|&r| r / max).collect();
    Ok(BalancingCoefficients { coeffs, raw })
}
