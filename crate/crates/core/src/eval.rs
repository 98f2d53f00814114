//! Density-of-densities comparison, per-joint marginals in rotation-vector
//! space, and the augmentation ablation.
//!
//! CSV schemas (all log-densities in nats):
//!
//! * histogram: `bin_left,bin_right,model_raw,model_ortho,data` with
//!   normalized densities per bin
//! * marginals: `source,x,y,z` where `source` is `model` or `data`
//! * ablation: `model,raw_logprob,ortho_logprob,above_diagonal` where
//!   `model` is `augmented` or `raw`

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PoseDataset};
use crate::flow::{FlowError, FlowModel};
use crate::rng::{stream_rng, Stream};
use crate::rotation::{gram_schmidt, joint_from_flat, orthonormalize_flat_pose, rotvec_from_6d, RotationError, Vec3};
use crate::training::{train, TrainConfig, TrainError, TrainReport};

/// Default sample count for density comparisons.
pub const DEFAULT_EVAL_SAMPLES: usize = 10_000;
/// Slack below the diagonal still counted as "ortho at least raw".
pub const DIAGONAL_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("requested {requested} samples but only {available} records are available")]
    SampleSize { requested: usize, available: usize },
    #[error("joint index {index} out of range for {joints} joints")]
    JointIndex { index: usize, joints: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical CDFs, evaluated after every distinct value of the pooled sample.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] == v {
            i += 1;
        }
        while j < nb && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    // one side exhausted: the other CDF still rises to 1
    if i < na || j < nb {
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    Ok(KsResult {
        statistic: d,
        n_a: na,
        n_b: nb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Model,
    Data,
}

/// Log-density of a model sample before and after orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensitySample {
    pub raw_logprob: f64,
    pub ortho_logprob: f64,
    pub source: SourceTag,
}

impl DensitySample {
    pub fn above_diagonal(&self) -> bool {
        self.ortho_logprob >= self.raw_logprob - DIAGONAL_SLACK
    }
}

/// Orthonormalizes every joint of every row. Rows whose width is not a
/// multiple of 6 (toy models) are returned unchanged.
pub fn orthonormalize_rows(x: &ArrayView2<f64>) -> Result<Array2<f64>, EvalError> {
    let mut out = x.to_owned();
    if x.ncols() % 6 == 0 {
        for mut row in out.rows_mut() {
            orthonormalize_flat_pose(row.as_slice_mut().expect("standard layout"))?;
        }
    }
    Ok(out)
}

/// Draws `n` model samples and records their attached (raw) log-density and
/// the log-density of their orthonormalization, both from `model`.
pub fn model_density_samples(model: &FlowModel, n: usize, seed: u64) -> Result<(Array2<f64>, Vec<DensitySample>), EvalError> {
    let samples = model.sample(n, &mut stream_rng(seed, Stream::Sample))?;
    let ortho_x = orthonormalize_rows(&samples.x.view())?;
    let ortho = model.log_prob_batch(&ortho_x.view())?.log_prob;
    let out = samples
        .log_prob
        .iter()
        .zip(&ortho)
        .map(|(&raw_logprob, &ortho_logprob)| DensitySample {
            raw_logprob,
            ortho_logprob,
            source: SourceTag::Model,
        })
        .collect();
    Ok((samples.x, out))
}

fn draw_rows(data: &ArrayView2<f64>, n: usize, seed: u64) -> Result<Array2<f64>, EvalError> {
    if n == 0 {
        return Err(EvalError::EmptySample);
    }
    if n > data.nrows() {
        return Err(EvalError::SampleSize {
            requested: n,
            available: data.nrows(),
        });
    }
    let picks = index::sample(&mut stream_rng(seed, Stream::DataDraw), data.nrows(), n).into_vec();
    Ok(data.select(Axis(0), &picks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityComparison {
    /// KS between attached sample densities and data densities.
    pub raw: KsResult,
    /// KS between orthonormalized sample densities and data densities.
    pub ortho: KsResult,
    pub model_raw: Vec<f64>,
    pub model_ortho: Vec<f64>,
    pub data: Vec<f64>,
}

/// Compares the model's density of its own samples against its density of
/// `n` data records drawn without replacement.
pub fn density_comparison_rows(model: &FlowModel, data: &ArrayView2<f64>, n: usize, seed: u64) -> Result<DensityComparison, EvalError> {
    let picked = draw_rows(data, n, seed)?;
    let (_, samples) = model_density_samples(model, n, seed)?;
    let data_lp = model.log_prob_batch(&picked.view())?.log_prob.to_vec();
    let model_raw: Vec<f64> = samples.iter().map(|s| s.raw_logprob).collect();
    let model_ortho: Vec<f64> = samples.iter().map(|s| s.ortho_logprob).collect();
    Ok(DensityComparison {
        raw: ks_two_sample(&model_raw, &data_lp)?,
        ortho: ks_two_sample(&model_ortho, &data_lp)?,
        model_raw,
        model_ortho,
        data: data_lp,
    })
}

pub fn density_comparison(model: &FlowModel, ds: &PoseDataset, n: usize, seed: u64) -> Result<DensityComparison, EvalError> {
    density_comparison_rows(model, &ds.to_matrix().view(), n, seed)
}

/// Type-7 (linear interpolation) sample quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bin edges by the Freedman-Diaconis rule on the pooled values, capped at
/// `max_bins`.
pub fn freedman_diaconis_edges(pooled: &[f64], max_bins: usize) -> Result<Vec<f64>, EvalError> {
    if pooled.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut s = pooled.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (s[0], s[s.len() - 1]);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let width = 2.0 * iqr / (s.len() as f64).cbrt();
    let bins = if hi > lo && width > 0.0 {
        (((hi - lo) / width).ceil() as usize).clamp(1, max_bins.max(1))
    } else {
        1
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok((0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect())
}

/// Normalized histogram density of `values` over `edges` (last bin closed).
pub fn histogram_density(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
        if v >= edges[0] && v <= edges[bins] {
            counts[k] += 1;
        }
    }
    counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, w)| c as f64 / (values.len() as f64 * (w[1] - w[0])))
        .collect()
}

pub fn write_histogram_csv(cmp: &DensityComparison, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let pooled: Vec<f64> = cmp.model_raw.iter().chain(&cmp.model_ortho).chain(&cmp.data).copied().collect();
    let edges = freedman_diaconis_edges(&pooled, 1000)?;
    let cols = [
        histogram_density(&cmp.model_raw, &edges),
        histogram_density(&cmp.model_ortho, &edges),
        histogram_density(&cmp.data, &edges),
    ];
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_left", "bin_right", "model_raw", "model_ortho", "data"])?;
    for (i, e) in edges.windows(2).enumerate() {
        w.write_record([e[0], e[1], cols[0][i], cols[1][i], cols[2][i]].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub source: SourceTag,
    pub rotvec: Vec3,
}

/// `n` model-sample and `n` data rotation vectors of one joint, model rows
/// first.
pub fn marginal_export(model: &FlowModel, ds: &PoseDataset, joint: usize, n: usize, seed: u64) -> Result<Vec<MarginalRow>, EvalError> {
    if joint >= ds.joint_count() {
        return Err(EvalError::JointIndex {
            index: joint,
            joints: ds.joint_count(),
        });
    }
    let data = draw_rows(&ds.to_matrix().view(), n, seed)?;
    let samples = model.sample(n, &mut stream_rng(seed, Stream::Sample))?;
    let mut rows = Vec::with_capacity(2 * n);
    for (m, source) in [(&samples.x, SourceTag::Model), (&data, SourceTag::Data)] {
        for r in m.rows() {
            let rot = gram_schmidt(&joint_from_flat(r.as_slice().expect("standard layout"), joint))?;
            rows.push(MarginalRow {
                source,
                rotvec: rotvec_from_6d(&rot),
            });
        }
    }
    Ok(rows)
}

pub fn write_marginals_csv(rows: &[MarginalRow], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "x", "y", "z"])?;
    for r in rows {
        let tag = match r.source {
            SourceTag::Model => "model",
            SourceTag::Data => "data",
        };
        w.write_record([tag.to_string(), r.rotvec[0].to_string(), r.rotvec[1].to_string(), r.rotvec[2].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub augmented: Vec<DensitySample>,
    pub raw: Vec<DensitySample>,
    pub augmented_report: TrainReport,
    pub raw_report: TrainReport,
}

/// Fraction of samples with `ortho_logprob >= raw_logprob - DIAGONAL_SLACK`.
pub fn fraction_above_diagonal(samples: &[DensitySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.above_diagonal()).count() as f64 / samples.len() as f64
}

/// Trains one model with and one without augmentation (all else equal, same
/// split and init), then samples `n` poses from each with `eval_seed`.
pub fn ablation_run(ds: &PoseDataset, cfg_base: &TrainConfig, n: usize, eval_seed: u64) -> Result<AblationResult, EvalError> {
    let run = |augmentation: bool| -> Result<(Vec<DensitySample>, TrainReport), EvalError> {
        let cfg = TrainConfig {
            augmentation,
            checkpoint_path: None,
            ..cfg_base.clone()
        };
        let (ckpt, report) = train(ds, &cfg)?;
        let (_, samples) = model_density_samples(&ckpt.to_model()?, n, eval_seed)?;
        Ok((samples, report))
    };
    let (augmented, augmented_report) = run(true)?;
    let (raw, raw_report) = run(false)?;
    Ok(AblationResult {
        augmented,
        raw,
        augmented_report,
        raw_report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub samples_per_model: usize,
    pub slack: f64,
    pub augmented_fraction_above_diagonal: f64,
    pub raw_fraction_above_diagonal: f64,
    /// `ortho = raw` reference line as two points spanning every sample.
    pub reference_line: [[f64; 2]; 2],
    pub augmented_best_validation_loss: Option<f64>,
    pub raw_best_validation_loss: Option<f64>,
}

impl AblationResult {
    pub fn summary(&self) -> AblationSummary {
        let (lo, hi) = self
            .augmented
            .iter()
            .chain(&self.raw)
            .flat_map(|s| [s.raw_logprob, s.ortho_logprob])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        AblationSummary {
            samples_per_model: self.augmented.len(),
            slack: DIAGONAL_SLACK,
            augmented_fraction_above_diagonal: fraction_above_diagonal(&self.augmented),
            raw_fraction_above_diagonal: fraction_above_diagonal(&self.raw),
            reference_line: [[lo, lo], [hi, hi]],
            augmented_best_validation_loss: self.augmented_report.best_validation_loss,
            raw_best_validation_loss: self.raw_report.best_validation_loss,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "raw_logprob", "ortho_logprob", "above_diagonal"])?;
        for (tag, list) in [("augmented", &self.augmented), ("raw", &self.raw)] {
            for s in list.iter() {
                w.write_record([
                    tag.to_string(),
                    s.raw_logprob.to_string(),
                    s.ortho_logprob.to_string(),
                    s.above_diagonal().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean of the rows of a matrix; used for centroid checks.
pub fn column_means(x: &ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
