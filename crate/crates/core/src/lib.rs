//! Balancing logit variation for long-tailed classification, desk scale.
//!
//! Class frequencies map to log-inverse-frequency coefficients that scale a
//! clamped random perturbation of the training-time logits; rarer classes
//! receive larger perturbations and inference runs on clean logits. The crate
//! bundles the frequency estimators, noise samplers, perturbed cross-entropy
//! with analytic gradients, IoU metrics, synthetic long-tail datasets, and a
//! small training harness for supervised and self-training runs.
//!
//! All numeric kernels are generic over the scalar type (f32 or f64) through
//! [`num::Real`]; the `*F64`/`*F32` aliases below pin the common choices.

pub mod batch;
pub mod data;
pub mod histogram;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod num;
pub mod trainer;
pub mod variation;

pub use batch::{LabelBatch, DEFAULT_IGNORE_INDEX};
pub use data::{
    generate_longtail_blobs, read_label_map, split_labeled_unlabeled, write_label_map, BlobSpec,
    DataError, Dataset, LabelMap, PgmError, SplitSpec,
};
pub use histogram::{
    balancing_coefficients, count_pixels, normalize, update_from_pseudo_labels,
    BalancingCoefficients, ClassHistogram, FrequencyVector, HistogramError,
};
pub use loss::{
    blv_loss, blv_loss_with_noise, cross_entropy, perturb_logits, softmax, LogitBatch, LossError,
    LossMode, LossOutput,
};
pub use matrix::Matrix;
pub use metrics::{confusion, iou_report, ConfusionMatrix, MetricsError, MetricsReport};
pub use num::Real;
pub use trainer::{
    self_train, sgd_step, train, FrequencySource, Model, ModelGrads, TrainConfig, TrainError,
    TrainResult,
};
pub use variation::{
    clamped_mean, sample_noise, ClampRule, NoiseFamily, NoiseSpec, NoiseTensor, NormalSource,
    ScheduleMode, SigmaSchedule, VariationError,
};

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type FrequencyVectorF64 = FrequencyVector<f64>;
pub type FrequencyVectorF32 = FrequencyVector<f32>;
pub type BalancingCoefficientsF64 = BalancingCoefficients<f64>;
pub type BalancingCoefficientsF32 = BalancingCoefficients<f32>;
pub type NoiseSpecF64 = NoiseSpec<f64>;
pub type NoiseSpecF32 = NoiseSpec<f32>;
pub type SigmaScheduleF64 = SigmaSchedule<f64>;
pub type SigmaScheduleF32 = SigmaSchedule<f32>;
pub type LossOutputF64 = LossOutput<f64>;
pub type LossOutputF32 = LossOutput<f32>;
pub type BlobSpecF64 = BlobSpec<f64>;
pub type DatasetF64 = Dataset<f64>;
pub type ModelF64 = Model<f64>;
pub type TrainConfigF64 = TrainConfig<f64>;
pub type TrainResultF64 = TrainResult<f64>;
pub type MetricsReportF64 = MetricsReport<f64>;
