//! The freq / train / ablate commands behind the `blv` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use blv_core::{
    balancing_coefficients, count_pixels, generate_longtail_blobs, normalize, read_label_map,
    self_train, split_labeled_unlabeled, train, ClassHistogram, FrequencySource, LossMode,
    NoiseFamily, TrainResultF64,
};

use crate::config::ExperimentConfig;
use crate::plot::{line_plot, Series};
use crate::report::{
    median, run_dir, write_json, AblateCell, AblateSummary, FreqReport, RunReport, SCHEMA_VERSION,
};

/// Frequency analysis of a PGM label-map corpus.
pub fn cmd_freq(
    paths: &[PathBuf],
    num_classes: usize,
    ignore_index: u32,
    smoothing: f64,
    out: &Path,
) -> Result<FreqReport> {
    if paths.is_empty() {
        bail!("freq requires at least one PGM file");
    }
    let mut pooled = ClassHistogram::new(num_classes);
    let mut failures = Vec::new();
    for path in paths {
        match std::fs::read(path) {
            Err(e) => failures.push(format!("{}: {e}", path.display())),
            Ok(bytes) => match read_label_map(&bytes) {
                Err(e) => failures.push(format!("{}: {e}", path.display())),
                Ok(map) => match count_pixels(&map.to_label_batch(ignore_index), num_classes) {
                    Err(e) => failures.push(format!("{}: {e}", path.display())),
                    Ok(hist) => pooled.merge(&hist).expect("same class count"),
                },
            },
        }
    }
    if !failures.is_empty() {
        bail!("{}", failures.join("\n"));
    }
    let freqs = normalize::<f64>(&pooled, smoothing)?;
    let coeffs = balancing_coefficients(&freqs)?;
    let mut ranking: Vec<usize> = (0..num_classes).collect();
    ranking.sort_by(|&a, &b| coeffs.coeffs()[b].partial_cmp(&coeffs.coeffs()[a]).unwrap());

    let report = FreqReport {
        schema: SCHEMA_VERSION,
        command: "freq".into(),
        num_classes,
        ignore_index,
        smoothing,
        files: paths.iter().map(|p| p.display().to_string()).collect(),
        counts: pooled.counts().to_vec(),
        ignored: pooled.ignored(),
        frequencies: freqs.freqs().to_vec(),
        raw_coefficients: coeffs.raw().to_vec(),
        coefficients: coeffs.coeffs().to_vec(),
        tail_ranking: ranking,
    };

    println!("class  count  frequency  coefficient");
    for k in 0..num_classes {
        println!(
            "{k:>5}  {:>5}  {:>9.6}  {:>11.6}",
            report.counts[k], report.frequencies[k], report.coefficients[k]
        );
    }
    println!("ignored pixels: {}", report.ignored);
    println!("tail ranking (rarest first): {:?}", report.tail_ranking);

    let dir = run_dir(out, "freq", 0, &report);
    write_json(&dir.join("report.json"), &report)
        .with_context(|| format!("writing {}", dir.display()))?;
    println!("report: {}", dir.join("report.json").display());
    Ok(report)
}

/// Run the configured experiment end to end and return the report.
pub fn run_pipeline(config: &ExperimentConfig, seed: u64) -> Result<(TrainResultF64, String)> {
    let blob = config.assemble_blob_spec()?;
    let eval_spec = config.assemble_eval_spec()?;
    let train_config = config.assemble_train_config(seed)?;
    let dataset = generate_longtail_blobs(&blob)?;
    let eval = generate_longtail_blobs(&eval_spec)?;
    let result = match train_config.frequency_source {
        FrequencySource::GroundTruth | FrequencySource::SourceProxy => {
            train(&train_config, &dataset, &eval)?
        }
        FrequencySource::PseudoEpoch | FrequencySource::LabeledOnly => {
            let (labeled, unlabeled) = split_labeled_unlabeled(&dataset, &config.assemble_split())?;
            self_train(&train_config, &labeled, &unlabeled, &eval)?
        }
    };
    let mode = mode_name(config.train.mode);
    Ok((result, mode))
}

pub fn mode_name(mode: LossMode) -> String {
    kebab_name(&mode)
}

pub fn family_name(family: NoiseFamily) -> String {
    kebab_name(&family)
}

fn kebab_name<S: Serialize>(value: &S) -> String {
    serde_json::to_value(value)
        .expect("enum serializes")
        .as_str()
        .expect("kebab-case enum")
        .to_string()
}

fn build_report(
    config: &ExperimentConfig,
    seed: u64,
    result: &TrainResultF64,
    mode: &str,
    wall_clock_seconds: f64,
) -> RunReport {
    RunReport {
        schema: SCHEMA_VERSION,
        command: "train".into(),
        mode: mode.to_string(),
        seed,
        config: config.clone(),
        frequency_history: result
            .frequency_history
            .iter()
            .map(|f| f.freqs().to_vec())
            .collect(),
        loss_curve: result.loss_curve.clone(),
        tail_miou_curve: result.tail_miou_curve.clone(),
        metrics: result.report.clone(),
        wall_clock_seconds,
        perturbed_logits_sample: result
            .perturbed_sample
            .as_ref()
            .map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect()),
    }
}

fn write_plots(dir: &Path, report: &RunReport) -> Result<()> {
    let loss: Vec<(f64, f64)> = report
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64, v))
        .collect();
    let svg = line_plot(
        "training loss",
        "epoch",
        "mean loss",
        &[Series {
            name: "loss",
            points: loss,
            color: "#1f77b4",
        }],
    );
    std::fs::write(dir.join("loss.svg"), svg)?;
    let tail: Vec<(f64, f64)> = report
        .tail_miou_curve
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i as f64, v)))
        .collect();
    let svg = line_plot(
        "held-out tail mIoU",
        "epoch",
        "tail mIoU",
        &[Series {
            name: "tail mIoU",
            points: tail,
            color: "#d62728",
        }],
    );
    std::fs::write(dir.join("tail_miou.svg"), svg)?;
    Ok(())
}

/// Execute one configured run, write its report directory, return the report.
pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    plot: bool,
) -> Result<(PathBuf, RunReport)> {
    let seed = crate::config::resolve_seed(config);
    let started = Instant::now();
    let (result, mode) = run_pipeline(config, seed)?;
    let report = build_report(
        config,
        seed,
        &result,
        &mode,
        started.elapsed().as_secs_f64(),
    );
    let dir = run_dir(out, "train", seed, config);
    write_json(&dir.join("report.json"), &report)
        .with_context(|| format!("writing {}", dir.display()))?;
    if plot {
        write_plots(&dir, &report)?;
    }
    let tail = report
        .metrics
        .tail_miou
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mode={mode} seed={seed} miou={:.4} tail_miou={tail} -> {}",
        report.metrics.miou,
        dir.display()
    );
    Ok((dir, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    VariationFamily,
    Sigma,
    Components,
}

impl AblateAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblateAxis::VariationFamily => "variation-family",
            AblateAxis::Sigma => "sigma",
            AblateAxis::Components => "components",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let values: &[&str] = match self {
            AblateAxis::VariationFamily => &["gaussian", "uniform", "beta", "exponential"],
            AblateAxis::Sigma => &["3", "4", "5", "6", "7"],
            AblateAxis::Components => &["blv", "no-variation", "no-balance", "plain-ce"],
        };
        values.iter().map(|s| s.to_string()).collect()
    }

    /// Derive the cell configuration for one axis value.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut config = base.clone();
        match self {
            AblateAxis::Sigma => {
                let sigma: f64 = value
                    .parse()
                    .with_context(|| format!("sigma value `{value}` is not a number"))?;
                if !sigma.is_finite() || sigma < 0.0 {
                    bail!("sigma value `{value}` must be >= 0");
                }
                config.noise.sigma = sigma;
                if let Some(schedule) = &mut config.schedule {
                    schedule.sigma0 = Some(sigma);
                }
            }
            AblateAxis::VariationFamily => {
                config.noise.family =
                    serde_json::from_value(serde_json::Value::String(value.into()))
                        .with_context(|| format!("unknown variation family `{value}`"))?;
            }
            AblateAxis::Components => {
                config.train.mode = serde_json::from_value(serde_json::Value::String(value.into()))
                    .with_context(|| format!("unknown loss mode `{value}`"))?;
            }
        }
        Ok(config)
    }
}

/// One run per (axis value, seed); summarize median tail mIoU per cell.
/// A failing run aborts the sweep; completed run directories are preserved.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    axis: AblateAxis,
    values: Option<Vec<String>>,
    out: &Path,
    plot: bool,
) -> Result<(PathBuf, AblateSummary)> {
    let values = values.unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        bail!("ablate requires at least one axis value");
    }
    let seeds = config.sweep_seeds();
    let sweep_dir = run_dir(out, "ablate", seeds[0], &(axis.name(), &values, config));
    let runs_dir = sweep_dir.join("runs");

    let mut cells = Vec::with_capacity(values.len());
    for value in &values {
        let cell_config = axis.apply(config, value)?;
        let mut run_dirs = Vec::with_capacity(seeds.len());
        let mut tail_mious = Vec::with_capacity(seeds.len());
        let mut mious = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut seeded = cell_config.clone();
            seeded.train.seed = Some(seed);
            seeded.train.seeds = None;
            let started = Instant::now();
            let (result, mode) = run_pipeline(&seeded, seed)
                .with_context(|| format!("{} = {value}, seed {seed}", axis.name()))?;
            let report = build_report(
                &seeded,
                seed,
                &result,
                &mode,
                started.elapsed().as_secs_f64(),
            );
            let dir = run_dir(&runs_dir, "train", seed, &seeded);
            write_json(&dir.join("report.json"), &report)
                .with_context(|| format!("writing {}", dir.display()))?;
            if plot {
                write_plots(&dir, &report)?;
            }
            run_dirs.push(dir.display().to_string());
            tail_mious.push(report.metrics.tail_miou);
            mious.push(report.metrics.miou);
        }
        let defined: Vec<f64> = tail_mious.iter().flatten().copied().collect();
        cells.push(AblateCell {
            value: value.clone(),
            run_dirs,
            median_tail_miou: median(&defined),
            median_miou: median(&mious).expect("at least one seed"),
            tail_mious,
            mious,
        });
    }
    let summary = AblateSummary {
        schema: SCHEMA_VERSION,
        command: "ablate".into(),
        axis: axis.name().into(),
        seeds,
        cells,
    };
    write_json(&sweep_dir.join("summary.json"), &summary)?;
    std::fs::write(sweep_dir.join("summary.csv"), summary.to_csv())?;

    println!("axis: {}", summary.axis);
    println!("value           median mIoU  median tail mIoU");
    for cell in &summary.cells {
        let tail = cell
            .median_tail_miou
            .map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<15} {:>11.4}  {:>16}",
            cell.value, cell.median_miou, tail
        );
    }
    println!("summary: {}", sweep_dir.join("summary.json").display());
    Ok((sweep_dir, summary))
}
