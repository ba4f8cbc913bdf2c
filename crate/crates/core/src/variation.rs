//! Clamped per-element noise in [0, 1]: the variation term added to logits.
//!
//! Four families (gaussian, uniform, beta, exponential) plus a disabled mode,
//! two clamp rules, the analytic mean of each clamped family, and an optional
//! rise-then-decay sigma schedule over training iterations.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::num::Real;

#[derive(Debug, Error, PartialEq)]
pub enum VariationError {
    #[error("{parameter} must be finite and {requirement}, got {value}")]
    InvalidParameter {
        parameter: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("temporal schedule requires 0 < t_mid < t_end, got t_mid={t_mid}, t_end={t_end}")]
    InvalidSchedule { t_mid: u64, t_end: u64 },
    #[error("iteration {t} exceeds schedule end {t_end}")]
    IterationPastEnd { t: u64, t_end: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    Beta,
    Exponential,
    None,
}

/// How a raw draw is mapped into [0, 1].
///
/// `ClampRaw` zeroes negative draws before anything else can see them, so a
/// later absolute value is a no-op; `AbsThenClamp` folds negative draws back
/// onto the positive axis first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampRule {
    ClampRaw,
    AbsThenClamp,
}

/// Distribution family plus parameters for the variation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec<T> {
    pub family: NoiseFamily,
    /// Gaussian standard deviation; ignored by the other families.
    pub sigma: T,
    pub alpha: T,
    pub beta: T,
    pub lambda: T,
    pub clamp_rule: ClampRule,
}

impl<T: Real> Default for NoiseSpec<T> {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            sigma: T::cast(6.0),
            alpha: T::cast(0.5),
            beta: T::cast(0.5),
            lambda: T::one(),
            clamp_rule: ClampRule::ClampRaw,
        }
    }
}

impl<T: Real> NoiseSpec<T> {
    pub fn new(
        family: NoiseFamily,
        sigma: T,
        alpha: T,
        beta: T,
        lambda: T,
        clamp_rule: ClampRule,
    ) -> Result<Self, VariationError> {
        let spec = Self {
            family,
            sigma,
            alpha,
            beta,
            lambda,
            clamp_rule,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(sigma: T) -> Result<Self, VariationError> {
        Self::new(
            NoiseFamily::Gaussian,
            sigma,
            T::cast(0.5),
            T::cast(0.5),
            T::one(),
            ClampRule::ClampRaw,
        )
    }

    pub fn uniform() -> Self {
        Self {
            family: NoiseFamily::Uniform,
            ..Self::default()
        }
    }

    pub fn beta(alpha: T, beta: T) -> Result<Self, VariationError> {
        Self::new(
            NoiseFamily::Beta,
            T::cast(6.0),
            alpha,
            beta,
            T::one(),
            ClampRule::ClampRaw,
        )
    }

    pub fn exponential(lambda: T) -> Result<Self, VariationError> {
        Self::new(
            NoiseFamily::Exponential,
            T::cast(6.0),
            T::cast(0.5),
            T::cast(0.5),
            lambda,
            ClampRule::ClampRaw,
        )
    }

    pub fn none() -> Self {
        Self {
            family: NoiseFamily::None,
            ..Self::default()
        }
    }

    pub fn with_clamp(mut self, clamp_rule: ClampRule) -> Self {
        self.clamp_rule = clamp_rule;
        self
    }

    /// Same family and parameters with sigma replaced, e.g. by a schedule.
    pub fn with_sigma(mut self, sigma: T) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<(), VariationError> {
        let check =
            |parameter: &'static str, value: T, positive: bool| -> Result<(), VariationError> {
                let ok =
                    value.is_finite() && (!positive && value >= T::zero() || value > T::zero());
                if ok {
                    Ok(())
                } else {
                    Err(VariationError::InvalidParameter {
                        parameter,
                        requirement: if positive { "> 0" } else { ">= 0" },
                        value: value.widen(),
                    })
                }
            };
        match self.family {
            NoiseFamily::Gaussian => check("sigma", self.sigma, false),
            NoiseFamily::Beta => {
                check("alpha", self.alpha, true)?;
                check("beta", self.beta, true)
            }
            NoiseFamily::Exponential => check("lambda", self.lambda, true),
            NoiseFamily::Uniform | NoiseFamily::None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Constant,
    Temporal,
}

/// Iteration-dependent sigma: constant, or piecewise linear through
/// (0, 0), (t_mid, sigma0), (t_end, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule<T> {
    pub mode: ScheduleMode,
    pub sigma0: T,
    pub t_mid: u64,
    pub t_end: u64,
}

impl<T: Real> SigmaSchedule<T> {
    pub fn constant(sigma0: T) -> Self {
        Self {
            mode: ScheduleMode::Constant,
            sigma0,
            t_mid: 30_000,
            t_end: 40_000,
        }
    }

    pub fn temporal(sigma0: T, t_mid: u64, t_end: u64) -> Result<Self, VariationError> {
        let schedule = Self {
            mode: ScheduleMode::Temporal,
            sigma0,
            t_mid,
            t_end,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), VariationError> {
        if !self.sigma0.is_finite() || self.sigma0 < T::zero() {
            return Err(VariationError::InvalidParameter {
                parameter: "sigma0",
                requirement: ">= 0",
                value: self.sigma0.widen(),
            });
        }
        if self.mode == ScheduleMode::Temporal && !(0 < self.t_mid && self.t_mid < self.t_end) {
            return Err(VariationError::InvalidSchedule {
                t_mid: self.t_mid,
                t_end: self.t_end,
            });
        }
        Ok(())
    }

    /// Sigma at iteration `t`; in temporal mode `t` must not exceed `t_end`.
    pub fn sigma_at(&self, t: u64) -> Result<T, VariationError> {
        self.validate()?;
        match self.mode {
            ScheduleMode::Constant => Ok(self.sigma0),
            ScheduleMode::Temporal => {
                if t > self.t_end {
                    return Err(VariationError::IterationPastEnd {
                        t,
                        t_end: self.t_end,
                    });
                }
                let frac = if t <= self.t_mid {
                    T::from_count(t) / T::from_count(self.t_mid)
                } else {
                    T::from_count(self.t_end - t) / T::from_count(self.t_end - self.t_mid)
                };
                Ok(self.sigma0 * frac)
            }
        }
    }
}

/// Standard-normal draws via the Box-Muller transform, caching the spare.
#[derive(Debug, Default)]
pub struct NormalSource {
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u maps [0, 1) onto (0, 1] so the log stays finite.
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// A noise tensor holds one independent clamped draw per element.
pub type NoiseTensor<T> = Matrix<T>;

fn apply_clamp(x: f64, rule: ClampRule) -> f64 {
    match rule {
        ClampRule::ClampRaw => x.clamp(0.0, 1.0),
        ClampRule::AbsThenClamp => x.abs().min(1.0),
    }
}

/// Sample an i.i.d. clamped noise tensor of the given shape.
///
/// Draws run in f64 and each element lands in [0, 1]. The disabled family
/// returns zeros without consuming the generator.
pub fn sample_noise<T: Real, R: Rng + ?Sized>(
    spec: &NoiseSpec<T>,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> NoiseTensor<T> {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    match spec.family {
        NoiseFamily::None => data.resize(n, T::zero()),
        NoiseFamily::Uniform => {
            for _ in 0..n {
                data.push(T::cast(rng.random::<f64>()));
            }
        }
        NoiseFamily::Gaussian => {
            let sigma = spec.sigma.widen();
            let mut normal = NormalSource::new();
            for _ in 0..n {
                let x = sigma * normal.next(rng);
                data.push(T::cast(apply_clamp(x, spec.clamp_rule)));
            }
        }
        NoiseFamily::Beta => {
            let (a, b) = (spec.alpha.widen(), spec.beta.widen());
            if a == 0.5 && b == 0.5 {
                // Arcsine inverse CDF: x = sin^2(pi * u / 2).
                for _ in 0..n {
                    let u = rng.random::<f64>();
                    let s = (std::f64::consts::FRAC_PI_2 * u).sin();
                    data.push(T::cast(apply_clamp(s * s, spec.clamp_rule)));
                }
            } else {
                let dist = rand_distr::Beta::new(a, b).expect("validated beta parameters");
                for _ in 0..n {
                    data.push(T::cast(apply_clamp(dist.sample(rng), spec.clamp_rule)));
                }
            }
        }
        NoiseFamily::Exponential => {
            let lambda = spec.lambda.widen();
            for _ in 0..n {
                let u = rng.random::<f64>();
                // -ln(u)/lambda; u == 0 yields +inf, which the clamp sends to 1.
                data.push(T::cast(apply_clamp(-u.ln() / lambda, spec.clamp_rule)));
            }
        }
    }
    Matrix::from_vec(rows, cols, data)
}

/// Analytic mean of the clamped family, the constant used when the
/// stochastic variation is replaced by a fixed per-class adjustment.
pub fn clamped_mean<T: Real>(spec: &NoiseSpec<T>) -> T {
    let mean = match spec.family {
        NoiseFamily::None => 0.0,
        NoiseFamily::Uniform => 0.5,
        NoiseFamily::Beta => {
            let (a, b) = (spec.alpha.widen(), spec.beta.widen());
            a / (a + b)
        }
        NoiseFamily::Exponential => {
            // E[min(X, 1)] = (1 - e^-lambda) / lambda for X ~ Exp(lambda).
            let l = spec.lambda.widen();
            (1.0 - (-l).exp()) / l
        }
        NoiseFamily::Gaussian => {
            let sigma = spec.sigma.widen();
            if sigma == 0.0 {
                0.0
            } else {
                // One-sided piece: int_0^1 x phi(x) dx = sigma^2 (phi(0) - phi(1)),
                // plus the clamp mass P(X > 1) concentrated at 1.
                let phi0 = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                let phi1 = phi0 * (-1.0 / (2.0 * sigma * sigma)).exp();
                let body = sigma * sigma * (phi0 - phi1);
                let upper = 0.5 * libm::erfc(1.0 / (sigma * std::f64::consts::SQRT_2));
                match spec.clamp_rule {
                    ClampRule::ClampRaw => body + upper,
                    ClampRule::AbsThenClamp => 2.0 * (body + upper),
                }
            }
        }
    };
    T::cast(mean)
}
