//! Maximum-likelihood training with Adam and early stopping on the
//! validation NLL.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{save_checkpoint, split_indices, Batches, Checkpoint, DataError, PoseDataset, TrainingMeta};
use crate::flow::{FlowConfig, FlowError, FlowModel, Init};
use crate::nncore::{AdamConfig, AdamState, NnError};
use crate::rng::{stream_rng, Stream};
use crate::rotation::AugmentParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub augment: AugmentParams,
    /// Inverse Gram-Schmidt augmentation of training batches.
    pub augmentation: bool,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Best checkpoint is written here whenever validation improves.
    pub checkpoint_path: Option<PathBuf>,
    pub model: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            augment: AugmentParams::default(),
            augmentation: true,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_path: None,
            model: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} not in (0, 1)", self.validation_fraction));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        self.augment.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.model.validate()?;
        if self.augmentation && self.model.dim % 6 != 0 {
            return bad(format!("augmentation needs a dimension divisible by 6, got {}", self.model.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training NLL (nats/pose) over the epoch's batches, before each update.
    pub train_loss: f64,
    /// Validation NLL (nats/pose) after the epoch.
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// `None` when no epoch completed.
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: model has {expected}, data has {got}")]
    Dimension { expected: usize, got: usize },
    /// Non-finite loss or gradient. Carries the best checkpoint so far.
    #[error("diverged after {} completed epochs", .report.epochs.len())]
    Diverged {
        checkpoint: Box<Checkpoint>,
        report: TrainReport,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Mean `-log p(x)` over the rows, in nats/pose. No augmentation.
pub fn evaluate_validation(model: &FlowModel, validation: &ArrayView2<f64>) -> Result<f64, FlowError> {
    if validation.nrows() == 0 {
        return Err(FlowError::EmptyBatch);
    }
    let lp = model.log_prob_batch(validation)?.log_prob;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Splits the dataset with `cfg.seed` and trains on it.
pub fn train(ds: &PoseDataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport), TrainError> {
    train_with_progress(ds, cfg, |_, _| {})
}

pub fn train_with_progress(
    ds: &PoseDataset,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord, &FlowModel),
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if ds.dim() != cfg.model.dim {
        return Err(TrainError::Dimension {
            expected: cfg.model.dim,
            got: ds.dim(),
        });
    }
    let (train_idx, val_idx) = split_indices(ds.len(), cfg.validation_fraction, cfg.seed)?;
    let data = ds.to_matrix();
    let train_m = data.select(ndarray::Axis(0), &train_idx);
    let val_m = data.select(ndarray::Axis(0), &val_idx);
    train_matrices(&train_m.view(), &val_m.view(), cfg, ds.joint_names.clone(), progress)
}

/// Training loop on pre-split row matrices of any even dimension.
pub fn train_matrices(
    train: &ArrayView2<f64>,
    validation: &ArrayView2<f64>,
    cfg: &TrainConfig,
    joint_names: Vec<String>,
    mut progress: impl FnMut(&EpochRecord, &FlowModel),
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    if train.nrows() == 0 || validation.nrows() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    for m in [train, validation] {
        if m.ncols() != cfg.model.dim {
            return Err(TrainError::Dimension {
                expected: cfg.model.dim,
                got: m.ncols(),
            });
        }
    }

    let mut model = FlowModel::new(cfg.model.clone(), Init::Identity, &mut stream_rng(cfg.seed, Stream::Init))?;
    let mut adam = AdamState::new(cfg.optimizer, &model.param_slices());
    let augment = cfg.augmentation.then_some(cfg.augment);
    let meta = |epoch: Option<usize>, validation_loss: Option<f64>| TrainingMeta {
        epoch,
        validation_loss,
        seed: cfg.seed,
        augment,
        joint_names: joint_names.clone(),
    };

    let mut best = Checkpoint::from_model(&model, meta(None, None));
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_validation_loss: None,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut stale = 0;
    let diverged = |best: Checkpoint, mut report: TrainReport| {
        report.stop_reason = StopReason::Divergence;
        TrainError::Diverged {
            checkpoint: Box::new(best),
            report,
        }
    };

    for epoch in 0..cfg.max_epochs {
        let mut rng = stream_rng(cfg.seed, Stream::Epoch(epoch as u64));
        let mut weighted = 0.0;
        for batch in Batches::shuffled(*train, cfg.batch_size, augment, &mut rng)? {
            let batch: Array2<f64> = batch;
            let (loss, grads) = match model.loss_and_grads(&batch.view()) {
                Ok(v) => v,
                Err(FlowError::Diverged | FlowError::Nn(NnError::Diverged)) => return Err(diverged(best, report)),
                Err(e) => return Err(e.into()),
            };
            weighted += loss * batch.nrows() as f64;
            let mut params = model.param_slices_mut();
            match adam.step(&mut params, &grads.slices()) {
                Ok(()) => {}
                Err(NnError::Diverged) => return Err(diverged(best, report)),
                Err(e) => return Err(FlowError::from(e).into()),
            }
        }
        let validation_loss = match evaluate_validation(&model, validation) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(FlowError::Diverged | FlowError::Nn(NnError::Diverged)) => return Err(diverged(best, report)),
            Err(e) => return Err(e.into()),
        };
        let record = EpochRecord {
            epoch,
            train_loss: weighted / train.nrows() as f64,
            validation_loss,
        };
        progress(&record, &model);
        report.epochs.push(record);

        if report.best_validation_loss.map_or(true, |b| validation_loss < b) {
            report.best_epoch = Some(epoch);
            report.best_validation_loss = Some(validation_loss);
            best = Checkpoint::from_model(&model, meta(Some(epoch), Some(validation_loss)));
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&best, path)?;
            }
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    if report.best_epoch.is_none() {
        if let Some(path) = &cfg.checkpoint_path {
            save_checkpoint(&best, path)?;
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::standard_normal_logpdf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
    }

    fn small_cfg(dim: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            max_epochs: 3,
            augmentation: false,
            model: FlowConfig::with_dims(dim, 2, 8, 1),
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_and_strict_parsing() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.augment, AugmentParams { k: 100.0, sigma: 0.1 });
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 3}"#).is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn identity_model_validation_closed_form() {
        let model = FlowModel::new(FlowConfig::default(), Init::Identity, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = gaussian_rows(50, 126, 1);
        let want = -x.rows().into_iter().map(|r| standard_normal_logpdf(r.as_slice().unwrap())).sum::<f64>() / 50.0;
        let got = evaluate_validation(&model, &x.view()).unwrap();
        assert!((got - want).abs() < 1e-9);

        let doubled = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
        assert!((evaluate_validation(&model, &doubled.view()).unwrap() - got).abs() < 1e-12);

        let mut outlier = x.clone();
        outlier.push_row(ndarray::Array1::from_elem(126, 20.0).view()).unwrap();
        assert!(evaluate_validation(&model, &outlier.view()).unwrap() > got);
    }

    #[test]
    fn zero_learning_rate_keeps_identity_loss() {
        let train_m = gaussian_rows(100, 4, 2);
        let val = gaussian_rows(20, 4, 3);
        let mut cfg = small_cfg(4);
        cfg.optimizer.lr = 0.0;
        let (_, report) = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap();
        let want = -train_m.rows().into_iter().map(|r| standard_normal_logpdf(r.as_slice().unwrap())).sum::<f64>() / 100.0;
        assert_eq!(report.epochs.len(), 3);
        for e in &report.epochs {
            assert!((e.train_loss - want).abs() < 1e-9, "{} vs {want}", e.train_loss);
        }
    }

    #[test]
    fn best_epoch_is_minimum_and_runs_repeat() {
        let train_m = gaussian_rows(200, 4, 4) * 0.5;
        let val = gaussian_rows(40, 4, 5) * 0.5;
        let mut cfg = small_cfg(4);
        cfg.optimizer.lr = 1e-2;
        cfg.max_epochs = 8;
        let (ckpt, report) = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap();
        let best = report.best_validation_loss.unwrap();
        assert!(report.epochs.iter().all(|e| best <= e.validation_loss));
        assert_eq!(ckpt.meta.validation_loss, Some(best));
        let model = ckpt.to_model().unwrap();
        assert_eq!(evaluate_validation(&model, &val.view()).unwrap(), best);

        let (ckpt2, report2) = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap();
        assert_eq!(report, report2);
        assert_eq!(ckpt, ckpt2);
    }

    #[test]
    fn patience_stops_early() {
        let train_m = gaussian_rows(64, 2, 6);
        let val = gaussian_rows(64, 2, 7);
        let mut cfg = small_cfg(2);
        cfg.optimizer.lr = 0.0;
        cfg.max_epochs = 50;
        cfg.patience = 2;
        let (_, report) = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap();
        assert_eq!(report.stop_reason, StopReason::Patience);
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.best_epoch, Some(0));
    }

    #[test]
    fn zero_epochs_returns_identity_model() {
        let train_m = gaussian_rows(10, 2, 8);
        let mut cfg = small_cfg(2);
        cfg.max_epochs = 0;
        let (ckpt, report) = train_matrices(&train_m.view(), &train_m.view(), &cfg, vec![], |_, _| {}).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
        let lp = ckpt.to_model().unwrap().log_prob(&[0.0, 0.0]).unwrap().log_prob;
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let mut train_m = gaussian_rows(40, 2, 9);
        let val = gaussian_rows(10, 2, 10);
        let mut cfg = small_cfg(2);
        cfg.max_epochs = 2;
        let (good, _) = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap();
        train_m[[3, 1]] = f64::NAN;
        let err = train_matrices(&train_m.view(), &val.view(), &cfg, vec![], |_, _| {}).unwrap_err();
        match err {
            TrainError::Diverged { checkpoint, report } => {
                assert_eq!(report.stop_reason, StopReason::Divergence);
                assert!(checkpoint.params.iter().all(|p| p.is_finite()));
                assert_eq!(checkpoint.meta.epoch, None);
                assert_eq!(checkpoint.params.len(), good.params.len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let train_m = gaussian_rows(10, 4, 0);
        let cfg = small_cfg(6);
        assert!(matches!(
            train_matrices(&train_m.view(), &train_m.view(), &cfg, vec![], |_, _| {}),
            Err(TrainError::Dimension { expected: 6, got: 4 })
        ));
    }
}
