//! Desk-scale training harness: a linear (optionally one-hidden-layer tanh)
//! softmax classifier with hand-derived gradients, momentum SGD, and the
//! plain/perturbed training loops including epoch-based self-training.
//!
//! Inference never touches the noise path: predictions are a pure function
//! of the model and features, and no generator is consumed there.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::LabelBatch;
use crate::data::{DataError, Dataset};
use crate::histogram::{
    balancing_coefficients, count_pixels, normalize, update_from_pseudo_labels,
    BalancingCoefficients, ClassHistogram, FrequencyVector, HistogramError,
};
use crate::loss::{blv_loss_with_noise, LossError, LossMode};
use crate::matrix::Matrix;
use crate::metrics::{confusion, iou_report, MetricsError, MetricsReport};
use crate::num::Real;
use crate::variation::{
    clamped_mean, sample_noise, NoiseSpec, NormalSource, ScheduleMode, SigmaSchedule,
    VariationError,
};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("train config invalid: {reason}")]
    InvalidConfig { reason: String },
    #[error("{op} does not support frequency source {frequency_source:?}")]
    WrongFrequencySource {
        op: &'static str,
        frequency_source: FrequencySource,
    },
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("features have {got} dims, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("temporal schedule ends at {t_end} but training needs {needed} iterations")]
    ScheduleTooShort { needed: u64, t_end: u64 },
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Variation(#[from] VariationError),
}

/// Where the class frequencies behind the coefficients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencySource {
    /// Fixed counts from the training labels, computed before training.
    GroundTruth,
    /// Recounted from the model's pseudo-labels after every epoch.
    PseudoEpoch,
    /// Fixed counts from a designated source-domain histogram.
    SourceProxy,
    /// Fixed counts from the labeled subset only.
    LabeledOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

/// Linear softmax head, optionally behind one tanh hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub hidden: Option<HiddenLayer<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn zeros(dims: usize, classes: usize) -> Self {
        Self {
            hidden: None,
            head_w: Matrix::zeros(dims, classes),
            head_b: vec![T::zero(); classes],
        }
    }

    /// Random tanh hidden layer scaled by 1/sqrt(fan-in), random head.
    pub fn with_hidden<R: Rng + ?Sized>(
        dims: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut normal = NormalSource::new();
        let mut init = |rows: usize, cols: usize, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::cast(scale * normal.next(rng)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        Self {
            hidden: Some(HiddenLayer {
                w: init(dims, hidden, dims),
                b: vec![T::zero(); hidden],
            }),
            head_w: init(hidden, classes, hidden),
            head_b: vec![T::zero(); classes],
        }
    }

    pub fn input_dims(&self) -> usize {
        match &self.hidden {
            Some(h) => h.w.rows(),
            None => self.head_w.rows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.cols()
    }

    fn hidden_activations(&self, features: &Matrix<T>) -> Option<Matrix<T>> {
        self.hidden.as_ref().map(|h| {
            let mut act = features.matmul(&h.w);
            for i in 0..act.rows() {
                for (v, &b) in act.row_mut(i).iter_mut().zip(&h.b) {
                    *v = (*v + b).tanh();
                }
            }
            act
        })
    }

    /// Deterministic logits; the perturbation never runs on this path.
    pub fn forward(&self, features: &Matrix<T>) -> Result<Matrix<T>, TrainError> {
        if features.cols() != self.input_dims() {
            return Err(TrainError::DimMismatch {
                expected: self.input_dims(),
                got: features.cols(),
            });
        }
        let head_in = self.hidden_activations(features);
        let head_in = head_in.as_ref().unwrap_or(features);
        let mut logits = head_in.matmul(&self.head_w);
        for i in 0..logits.rows() {
            for (v, &b) in logits.row_mut(i).iter_mut().zip(&self.head_b) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Chain rule through the head (and tanh layer when present).
    /// `loss_grad` is d(loss)/d(logits) for this batch.
    pub fn backward(
        &self,
        features: &Matrix<T>,
        loss_grad: &Matrix<T>,
    ) -> Result<ModelGrads<T>, TrainError> {
        if features.cols() != self.input_dims() {
            return Err(TrainError::DimMismatch {
                expected: self.input_dims(),
                got: features.cols(),
            });
        }
        if loss_grad.shape() != (features.rows(), self.num_classes()) {
            return Err(TrainError::InvalidConfig {
                reason: format!(
                    "loss gradient shape {:?} does not match batch {} x {}",
                    loss_grad.shape(),
                    features.rows(),
                    self.num_classes()
                ),
            });
        }
        match &self.hidden {
            None => Ok(ModelGrads {
                hidden: None,
                head_w: features.matmul_tn(loss_grad),
                head_b: loss_grad.col_sums(),
            }),
            Some(_) => {
                let act = self.hidden_activations(features).expect("hidden layer");
                let head_w = act.matmul_tn(loss_grad);
                let head_b = loss_grad.col_sums();
                // d/da tanh(a) = 1 - tanh(a)^2, with act already tanh(a).
                let mut hidden_grad = loss_grad.matmul_nt(&self.head_w);
                for i in 0..hidden_grad.rows() {
                    let arow = act.row(i);
                    for (g, &a) in hidden_grad.row_mut(i).iter_mut().zip(arow) {
                        *g *= T::one() - a * a;
                    }
                }
                Ok(ModelGrads {
                    hidden: Some((features.matmul_tn(&hidden_grad), hidden_grad.col_sums())),
                    head_w,
                    head_b,
                })
            }
        }
    }

    /// Noise-free argmax labels; ties resolve to the lowest class index.
    pub fn predict(&self, features: &Matrix<T>) -> Result<Vec<u32>, TrainError> {
        let logits = self.forward(features)?;
        Ok(logits
            .iter_rows()
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect())
    }
}

/// Per-parameter gradients, also reused as the momentum velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub hidden: Option<(Matrix<T>, Vec<T>)>,
    pub head_w: Matrix<T>,
    pub head_b: Vec<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            hidden: model.hidden.as_ref().map(|h| {
                (
                    Matrix::zeros(h.w.rows(), h.w.cols()),
                    vec![T::zero(); h.b.len()],
                )
            }),
            head_w: Matrix::zeros(model.head_w.rows(), model.head_w.cols()),
            head_b: vec![T::zero(); model.head_b.len()],
        }
    }
}

fn momentum_update<T: Real>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD: `v <- momentum * v + g`, `theta <- theta - lr * v`.
pub fn sgd_step<T: Real>(
    model: &mut Model<T>,
    grads: &ModelGrads<T>,
    lr: T,
    momentum: T,
    velocity: &mut ModelGrads<T>,
) {
    if let (Some(h), Some((gw, gb)), Some((vw, vb))) = (
        model.hidden.as_mut(),
        grads.hidden.as_ref(),
        velocity.hidden.as_mut(),
    ) {
        momentum_update(h.w.data_mut(), gw.data(), vw.data_mut(), lr, momentum);
        momentum_update(&mut h.b, gb, vb, lr, momentum);
    }
    momentum_update(
        model.head_w.data_mut(),
        grads.head_w.data(),
        velocity.head_w.data_mut(),
        lr,
        momentum,
    );
    momentum_update(
        &mut model.head_b,
        &grads.head_b,
        &mut velocity.head_b,
        lr,
        momentum,
    );
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub mode: LossMode,
    pub noise: NoiseSpec<T>,
    pub schedule: SigmaSchedule<T>,
    pub frequency_source: FrequencySource,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub momentum: T,
    pub seed: u64,
    pub tail_classes: Vec<usize>,
    /// Self-training epochs spent on labeled data before pseudo-labeling.
    pub warmup_epochs: usize,
    /// Whether the warmup phase itself perturbs logits.
    pub warmup_blv: bool,
    /// Add labeled ground-truth counts to the per-epoch pseudo histogram.
    pub include_labeled_counts: bool,
    pub smoothing: T,
    pub ignore_index: u32,
    /// Width of the optional tanh hidden layer.
    pub hidden: Option<usize>,
    /// Fixed per-class counts consumed by the source-proxy strategy.
    pub source_counts: Option<Vec<u64>>,
    /// Override for the constant-adjustment mode; defaults to the analytic
    /// mean of the clamped noise family.
    pub no_variation_kappa: Option<T>,
    /// Keep the last batch's perturbed logits for diagnostics.
    pub debug_logits: bool,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            mode: LossMode::Blv,
            noise: NoiseSpec::default(),
            schedule: SigmaSchedule::constant(T::cast(6.0)),
            frequency_source: FrequencySource::GroundTruth,
            num_classes: 3,
            epochs: 100,
            batch_size: 64,
            learning_rate: T::cast(0.05),
            momentum: T::cast(0.9),
            seed: 0,
            tail_classes: vec![2],
            warmup_epochs: 5,
            warmup_blv: true,
            include_labeled_counts: false,
            smoothing: T::one(),
            ignore_index: crate::batch::DEFAULT_IGNORE_INDEX,
            hidden: None,
            source_counts: None,
            no_variation_kappa: None,
            debug_logits: false,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= T::zero() {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !self.momentum.is_finite() || self.momentum < T::zero() || self.momentum >= T::one() {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Some(&bad) = self.tail_classes.iter().find(|&&t| t >= self.num_classes) {
            return fail(format!(
                "tail class {bad} out of range for {} classes",
                self.num_classes
            ));
        }
        if !self.smoothing.is_finite() || self.smoothing < T::zero() {
            return fail(format!("smoothing must be >= 0, got {}", self.smoothing));
        }
        if self.hidden == Some(0) {
            return fail("hidden width must be positive when set".into());
        }
        if let Some(kappa) = self.no_variation_kappa {
            if !kappa.is_finite() || kappa < T::zero() {
                return fail(format!("no_variation_kappa must be >= 0, got {kappa}"));
            }
        }
        if let Some(counts) = &self.source_counts {
            if counts.len() != self.num_classes {
                return fail(format!(
                    "source_counts has {} entries for {} classes",
                    counts.len(),
                    self.num_classes
                ));
            }
        }
        self.noise.validate()?;
        self.schedule.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult<T> {
    pub model: Model<T>,
    /// Mean loss per epoch, weighted by valid instances.
    pub loss_curve: Vec<T>,
    /// The frequency vector in force during each epoch.
    pub frequency_history: Vec<FrequencyVector<T>>,
    /// Held-out tail mIoU after each epoch, noise-free.
    pub tail_miou_curve: Vec<Option<T>>,
    pub report: MetricsReport<T>,
    pub seed: u64,
    /// Perturbed logits of the final batch when `debug_logits` is set.
    pub perturbed_sample: Option<Matrix<T>>,
}

fn check_dataset<T: Real>(
    ds: &Dataset<T>,
    which: &'static str,
    config: &TrainConfig<T>,
) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset { which });
    }
    let batch = LabelBatch::new(ds.labels.clone(), config.ignore_index);
    if let Some((index, label)) = batch.first_invalid(config.num_classes) {
        return Err(TrainError::InvalidConfig {
            reason: format!("{which} label {label} at index {index} out of range"),
        });
    }
    Ok(())
}

fn check_schedule_budget<T: Real>(
    config: &TrainConfig<T>,
    total_iterations: u64,
) -> Result<(), TrainError> {
    if config.schedule.mode == ScheduleMode::Temporal && total_iterations > 0 {
        let last = total_iterations - 1;
        if last > config.schedule.t_end {
            return Err(TrainError::ScheduleTooShort {
                needed: total_iterations,
                t_end: config.schedule.t_end,
            });
        }
    }
    Ok(())
}

fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    (n.div_ceil(batch_size)) as u64
}

struct EpochState<'a, T> {
    model: &'a mut Model<T>,
    velocity: &'a mut ModelGrads<T>,
    rng: &'a mut StdRng,
    t: u64,
}

/// One pass of shuffled mini-batch SGD; returns the mean loss over instances.
fn run_epoch<T: Real>(
    state: &mut EpochState<'_, T>,
    features: &Matrix<T>,
    labels: &[u32],
    coeffs: &BalancingCoefficients<T>,
    config: &TrainConfig<T>,
    mode: LossMode,
    keep_last_perturbed: &mut Option<Matrix<T>>,
) -> Result<T, TrainError> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(state.rng);
    let mut loss_sum = T::zero();
    let mut weight = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let batch_x = features.gather_rows(chunk);
        let batch_y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
        let targets = LabelBatch::new(batch_y, config.ignore_index);
        let logits = state.model.forward(&batch_x)?;
        let sigma = config.schedule.sigma_at(state.t)?;
        let spec = config.noise.with_sigma(sigma);
        let noise = sample_noise(&spec, logits.rows(), logits.cols(), state.rng);
        let kappa = config
            .no_variation_kappa
            .unwrap_or_else(|| clamped_mean(&spec));
        let out = blv_loss_with_noise(&logits, &targets, coeffs, &noise, mode, kappa)?;
        let grads = state.model.backward(&batch_x, &out.grad)?;
        sgd_step(
            state.model,
            &grads,
            config.learning_rate,
            config.momentum,
            state.velocity,
        );
        loss_sum += out.loss * T::from_len(out.valid_count);
        weight += out.valid_count;
        if config.debug_logits {
            *keep_last_perturbed = out.perturbed_logits;
        }
        state.t += 1;
    }
    Ok(loss_sum / T::from_len(weight.max(1)))
}

fn eval_report<T: Real>(
    model: &Model<T>,
    eval: &Dataset<T>,
    config: &TrainConfig<T>,
) -> Result<MetricsReport<T>, TrainError> {
    let pred = model.predict(&eval.features)?;
    let cm = confusion(&pred, &eval.labels, config.num_classes, config.ignore_index)?;
    Ok(iou_report(&cm, &config.tail_classes)?)
}

fn fixed_frequencies<T: Real>(
    config: &TrainConfig<T>,
    labeled: &Dataset<T>,
) -> Result<FrequencyVector<T>, TrainError> {
    let hist = match (config.frequency_source, &config.source_counts) {
        (FrequencySource::SourceProxy, Some(counts)) => {
            ClassHistogram::from_counts(counts.clone(), 0)
        }
        _ => count_pixels(
            &LabelBatch::new(labeled.labels.clone(), config.ignore_index),
            config.num_classes,
        )?,
    };
    Ok(normalize(&hist, config.smoothing)?)
}

fn init_model<T: Real>(config: &TrainConfig<T>, dims: usize, rng: &mut StdRng) -> Model<T> {
    match config.hidden {
        Some(h) => Model::with_hidden(dims, h, config.num_classes, rng),
        None => Model::zeros(dims, config.num_classes),
    }
}

/// Fully-supervised training with a fixed class distribution.
pub fn train<T: Real>(
    config: &TrainConfig<T>,
    labeled: &Dataset<T>,
    eval: &Dataset<T>,
) -> Result<TrainResult<T>, TrainError> {
    config.validate()?;
    if !matches!(
        config.frequency_source,
        FrequencySource::GroundTruth | FrequencySource::SourceProxy
    ) {
        return Err(TrainError::WrongFrequencySource {
            op: "train",
            frequency_source: config.frequency_source,
        });
    }
    check_dataset(labeled, "labeled", config)?;
    check_dataset(eval, "eval", config)?;
    check_schedule_budget(
        config,
        config.epochs as u64 * batches_per_epoch(labeled.len(), config.batch_size),
    )?;

    let freqs = fixed_frequencies(config, labeled)?;
    let coeffs = balancing_coefficients(&freqs)?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut model = init_model(config, labeled.features.cols(), &mut rng);
    let mut velocity = ModelGrads::zeros_like(&model);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut tail_curve = Vec::with_capacity(config.epochs);
    let mut history = Vec::with_capacity(config.epochs);
    let mut perturbed_sample = None;
    let mut state = EpochState {
        model: &mut model,
        velocity: &mut velocity,
        rng: &mut rng,
        t: 0,
    };
    for _ in 0..config.epochs {
        let loss = run_epoch(
            &mut state,
            &labeled.features,
            &labeled.labels,
            &coeffs,
            config,
            config.mode,
            &mut perturbed_sample,
        )?;
        loss_curve.push(loss);
        history.push(freqs.clone());
        tail_curve.push(eval_report(state.model, eval, config)?.tail_miou);
    }
    let report = eval_report(&model, eval, config)?;
    Ok(TrainResult {
        model,
        loss_curve,
        frequency_history: history,
        tail_miou_curve: tail_curve,
        report,
        seed: config.seed,
        perturbed_sample,
    })
}

/// Self-training: warm up on labeled data, then per epoch pseudo-label the
/// unlabeled pool, re-estimate frequencies (in pseudo-epoch mode), and train
/// on the uniform mix of true and pseudo labels.
pub fn self_train<T: Real>(
    config: &TrainConfig<T>,
    labeled: &Dataset<T>,
    unlabeled: &Dataset<T>,
    eval: &Dataset<T>,
) -> Result<TrainResult<T>, TrainError> {
    config.validate()?;
    if !matches!(
        config.frequency_source,
        FrequencySource::PseudoEpoch | FrequencySource::LabeledOnly | FrequencySource::SourceProxy
    ) {
        return Err(TrainError::WrongFrequencySource {
            op: "self_train",
            frequency_source: config.frequency_source,
        });
    }
    if config.warmup_epochs == 0 {
        return Err(TrainError::InvalidConfig {
            reason: "self-training requires warmup_epochs >= 1".into(),
        });
    }
    if config.frequency_source == FrequencySource::PseudoEpoch && unlabeled.is_empty() {
        return Err(TrainError::EmptyDataset { which: "unlabeled" });
    }
    check_dataset(labeled, "labeled", config)?;
    check_dataset(eval, "eval", config)?;
    let warmup = config.warmup_epochs.min(config.epochs);
    let mixed_len = labeled.len() + unlabeled.len();
    check_schedule_budget(
        config,
        warmup as u64 * batches_per_epoch(labeled.len(), config.batch_size)
            + (config.epochs - warmup) as u64 * batches_per_epoch(mixed_len, config.batch_size),
    )?;

    let labeled_freqs = fixed_frequencies(config, labeled)?;
    let labeled_batch = LabelBatch::new(labeled.labels.clone(), config.ignore_index);

    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut model = init_model(config, labeled.features.cols(), &mut rng);
    let mut velocity = ModelGrads::zeros_like(&model);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut tail_curve = Vec::with_capacity(config.epochs);
    let mut history = Vec::with_capacity(config.epochs);
    let mut perturbed_sample = None;

    // The mixed pool's features never change; labels are refreshed per epoch.
    let mut mixed_features = None;
    let mut state = EpochState {
        model: &mut model,
        velocity: &mut velocity,
        rng: &mut rng,
        t: 0,
    };
    for epoch in 0..config.epochs {
        let (loss, freqs) = if epoch < warmup {
            let mode = if config.warmup_blv {
                config.mode
            } else {
                LossMode::PlainCe
            };
            let coeffs = balancing_coefficients(&labeled_freqs)?;
            let loss = run_epoch(
                &mut state,
                &labeled.features,
                &labeled.labels,
                &coeffs,
                config,
                mode,
                &mut perturbed_sample,
            )?;
            (loss, labeled_freqs.clone())
        } else {
            let pseudo = state.model.predict(&unlabeled.features)?;
            let freqs = match config.frequency_source {
                FrequencySource::PseudoEpoch => {
                    let mut batches = vec![LabelBatch::new(pseudo.clone(), config.ignore_index)];
                    if config.include_labeled_counts {
                        batches.push(labeled_batch.clone());
                    }
                    update_from_pseudo_labels(&batches, config.num_classes, config.smoothing)?
                }
                _ => labeled_freqs.clone(),
            };
            let coeffs = balancing_coefficients(&freqs)?;
            let features = mixed_features.get_or_insert_with(|| {
                let mut data = labeled.features.data().to_vec();
                data.extend_from_slice(unlabeled.features.data());
                Matrix::from_vec(mixed_len, labeled.features.cols(), data)
            });
            let mut labels = labeled.labels.clone();
            labels.extend_from_slice(&pseudo);
            let loss = run_epoch(
                &mut state,
                features,
                &labels,
                &coeffs,
                config,
                config.mode,
                &mut perturbed_sample,
            )?;
            (loss, freqs)
        };
        loss_curve.push(loss);
        history.push(freqs);
        tail_curve.push(eval_report(state.model, eval, config)?.tail_miou);
    }
    let report = eval_report(&model, eval, config)?;
    Ok(TrainResult {
        model,
        loss_curve,
        frequency_history: history,
        tail_miou_curve: tail_curve,
        report,
        seed: config.seed,
        perturbed_sample,
    })
}
