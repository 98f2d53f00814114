//! Pose datasets: the binary `.pose6d` container, CSV interchange, the
//! synthetic generator with its ground-truth density, splitting, augmented
//! batching, and the checkpoint file format.
//!
//! # Dataset file (`.pose6d`), little-endian
//!
//! | field        | type              | notes                                  |
//! |--------------|-------------------|----------------------------------------|
//! | magic        | 8 bytes           | `POSE6D\0\x01`                          |
//! | joints       | u32               | 21 for body poses                      |
//! | records      | u64               |                                        |
//! | float width  | u32               | always 32                              |
//! | source       | u8                | 0 = synthetic, 1 = imported            |
//! | names        | joints x (u16 len, UTF-8 bytes)                           ||
//! | payload      | records x 6·joints f32 | transposed pose layout            |
//!
//! # Checkpoint file (`.ckpt`), little-endian
//!
//! | field        | type         | notes                                      |
//! |--------------|--------------|--------------------------------------------|
//! | magic        | 8 bytes      | `POSEFLW\x01`                               |
//! | header len   | u32          |                                            |
//! | header       | JSON         | architecture, param count, training meta   |
//! | params       | f64 x count  | order of `FlowModel::param_slices`         |
//! | crc32        | u32          | over the parameter bytes                   |

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowConfig, FlowError, FlowModel};
use crate::rng::{stream_rng, Stream};
use crate::rotation::{
    augment_flat_pose, gram_schmidt, joint_from_flat, rotation_from_rotvec, rotvec_from_6d,
    transpose_to_flat, AugmentParams, PoseVector, Rotation6D, RotationError, Vec3,
    POSE_JOINTS,
};

pub const DATASET_MAGIC: [u8; 8] = *b"POSE6D\0\x01";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"POSEFLW\x01";
/// Orthonormality tolerance for stored records (f32 storage).
pub const RECORD_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("unsupported float width {0}")]
    FloatWidth(u32),
    #[error("record length: expected {expected} values, got {got} (record {record})")]
    RecordLength { record: usize, expected: usize, got: usize },
    #[error("record {record}, joint {joint}: not orthonormal")]
    NotOrthonormal { record: usize, joint: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checksum mismatch in parameter block")]
    Checksum,
    #[error("hyperparameter mismatch: {0}")]
    Hyperparameters(String),
    #[error("invalid value in record {record}: {msg}")]
    Parse { record: usize, msg: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Imported,
}

/// Orthonormal poses with their joint labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub poses: Vec<PoseVector>,
    pub joint_names: Vec<String>,
    pub source: Source,
}

impl PoseDataset {
    /// Validates lengths and per-joint orthonormality (within [`RECORD_TOL`]).
    pub fn new(poses: Vec<PoseVector>, joint_names: Vec<String>, source: Source) -> Result<Self, DataError> {
        let expected = joint_names.len() * 6;
        for (i, p) in poses.iter().enumerate() {
            check_record(i, p.as_slice(), expected)?;
        }
        Ok(PoseDataset {
            poses,
            joint_names,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn dim(&self) -> usize {
        self.joint_count() * 6
    }

    /// One pose per row.
    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let mut m = Array2::zeros((self.len(), d));
        for (mut row, p) in m.rows_mut().into_iter().zip(&self.poses) {
            row.assign(&ndarray::ArrayView1::from(p.as_slice()));
        }
        m
    }

    pub fn subset(&self, indices: &[usize]) -> PoseDataset {
        PoseDataset {
            poses: indices.iter().map(|&i| self.poses[i].clone()).collect(),
            joint_names: self.joint_names.clone(),
            source: self.source,
        }
    }
}

fn check_record(record: usize, values: &[f64], expected: usize) -> Result<(), DataError> {
    if values.len() != expected {
        return Err(DataError::RecordLength {
            record,
            expected,
            got: values.len(),
        });
    }
    for j in 0..expected / 6 {
        let raw = joint_from_flat(values, j);
        Rotation6D::with_tolerance(raw.a1, raw.a2, RECORD_TOL)
            .map_err(|_| DataError::NotOrthonormal { record, joint: j })?;
    }
    Ok(())
}

/// Conventional names of the 21 non-root joints of an SMPL-like skeleton.
pub const DEFAULT_JOINT_NAMES: [&str; POSE_JOINTS] = [
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

pub fn default_joint_names() -> Vec<String> {
    DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Mean rotation vector (radians).
    pub mean: Vec3,
    /// Per-axis standard deviation (radians).
    pub std: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMixture {
    pub name: String,
    pub components: Vec<MixtureComponent>,
}

/// Per-joint axis-aligned Gaussian mixtures in rotation-vector space.
///
/// Component means and spreads should keep samples well inside the ball of
/// radius pi; beyond it the rotation vector recovered from a pose no longer
/// equals the one sampled, and [`synthetic_logdensity`] is evaluated at the
/// recovered vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGeneratorSpec {
    pub joints: Vec<JointMixture>,
    pub seed: u64,
}

impl SyntheticGeneratorSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.joints.is_empty() {
            return Err(DataError::Spec("no joints".into()));
        }
        for j in &self.joints {
            if j.components.is_empty() {
                return Err(DataError::Spec(format!("joint {} has no components", j.name)));
            }
            let total: f64 = j.components.iter().map(|c| c.weight).sum();
            if j.components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(DataError::Spec(format!(
                    "joint {}: weights must be positive and sum to 1 (sum {total})",
                    j.name
                )));
            }
            if j.components.iter().any(|c| c.std.iter().any(|s| !(*s > 0.0 && s.is_finite()))) {
                return Err(DataError::Spec(format!("joint {}: stds must be positive", j.name)));
            }
            if j.components.iter().any(|c| c.mean.iter().any(|m| !m.is_finite())) {
                return Err(DataError::Spec(format!("joint {}: non-finite mean", j.name)));
            }
        }
        Ok(())
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    /// A 21-joint body-like spec: every joint gets one to three components
    /// with means up to ~0.7 rad and spreads of 0.05-0.2 rad.
    pub fn default_body(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Synthetic);
        let joints = DEFAULT_JOINT_NAMES
            .iter()
            .map(|name| {
                let n = rng.random_range(1..=3usize);
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = raw.iter().sum();
                let mut components: Vec<MixtureComponent> = raw
                    .iter()
                    .map(|w| MixtureComponent {
                        weight: w / total,
                        mean: [
                            rng.random_range(-0.4..0.4),
                            rng.random_range(-0.4..0.4),
                            rng.random_range(-0.4..0.4),
                        ],
                        std: [
                            rng.random_range(0.05..0.2),
                            rng.random_range(0.05..0.2),
                            rng.random_range(0.05..0.2),
                        ],
                    })
                    .collect();
                // exact unit sum
                let head: f64 = components[..n - 1].iter().map(|c| c.weight).sum();
                components[n - 1].weight = 1.0 - head;
                JointMixture {
                    name: name.to_string(),
                    components,
                }
            })
            .collect();
        SyntheticGeneratorSpec { joints, seed }
    }
}

fn pick_component<R: Rng + ?Sized>(components: &[MixtureComponent], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    components.len() - 1
}

/// Draws `n` poses; values are rounded to f32 precision so the in-memory
/// dataset equals its file round-trip.
pub fn generate_synthetic(spec: &SyntheticGeneratorSpec, n: usize) -> Result<PoseDataset, DataError> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synthetic);
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let joints: Vec<_> = spec
            .joints
            .iter()
            .map(|j| {
                let c = &j.components[pick_component(&j.components, &mut rng)];
                let mut v = [0.0; 3];
                for (i, vi) in v.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *vi = c.mean[i] + c.std[i] * z;
                }
                rotation_from_rotvec(&v).to_raw()
            })
            .collect();
        let values = transpose_to_flat(&joints)
            .into_values()
            .into_iter()
            .map(|v| v as f32 as f64)
            .collect();
        poses.push(PoseVector::from_values(values)?);
    }
    PoseDataset::new(poses, spec.joint_names(), Source::Synthetic)
}

fn log_normal_3(v: &Vec3, c: &MixtureComponent) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        let z = (v[i] - c.mean[i]) / c.std[i];
        acc += -0.5 * z * z - c.std[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    acc
}

/// Log mixture density of one rotation vector.
pub fn joint_logdensity(mixture: &JointMixture, v: &Vec3) -> f64 {
    let terms: Vec<f64> = mixture
        .components
        .iter()
        .map(|c| c.weight.ln() + log_normal_3(v, c))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Ground-truth log-density of a pose in rotation-vector coordinates (sum
/// over joints), in nats. Joints are orthonormalized first.
pub fn synthetic_logdensity(spec: &SyntheticGeneratorSpec, pose: &PoseVector) -> Result<f64, DataError> {
    if pose.joint_count() != spec.joints.len() {
        return Err(DataError::RecordLength {
            record: 0,
            expected: spec.joints.len() * 6,
            got: pose.len(),
        });
    }
    let mut total = 0.0;
    for (j, mixture) in spec.joints.iter().enumerate() {
        let r = gram_schmidt(&pose.joint(j))?;
        total += joint_logdensity(mixture, &rotvec_from_6d(&r));
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Binary dataset file

pub fn save_dataset(ds: &PoseDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&(ds.joint_count() as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&32u32.to_le_bytes())?;
    w.write_all(&[match ds.source {
        Source::Synthetic => 0u8,
        Source::Imported => 1u8,
    }])?;
    for name in &ds.joint_names {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| DataError::Header(format!("joint name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for p in &ds.poses {
        for &v in p.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Header("unexpected end of header".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PoseDataset, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PoseDataset, DataError> {
    if bytes.len() < 8 || bytes[..8] != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut c = Cursor { buf: bytes, pos: 8 };
    let joints = c.u32()? as usize;
    let records = c.u64()?;
    let width = c.u32()?;
    if width != 32 {
        return Err(DataError::FloatWidth(width));
    }
    let source = match c.take(1)?[0] {
        0 => Source::Synthetic,
        1 => Source::Imported,
        other => return Err(DataError::Header(format!("unknown source tag {other}"))),
    };
    if joints == 0 {
        return Err(DataError::Header("zero joints".into()));
    }
    let mut names = Vec::with_capacity(joints);
    for _ in 0..joints {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| DataError::Header(format!("joint name: {e}")))?
            .to_string();
        names.push(name);
    }
    let dim = joints * 6;
    let expected = records
        .checked_mul(dim as u64 * 4)
        .ok_or_else(|| DataError::Header("record count overflow".into()))?;
    let payload = &bytes[c.pos..];
    if (payload.len() as u64) < expected {
        return Err(DataError::Truncated {
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(DataError::Header(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected
        )));
    }
    let mut poses = Vec::with_capacity(records as usize);
    for rec in payload.chunks_exact(dim * 4) {
        let values: Vec<f64> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        poses.push(PoseVector::from_values(values)?);
    }
    PoseDataset::new(poses, names, source)
}

// ---------------------------------------------------------------------------
// CSV interchange: one pose per line, 6·J values in the transposed layout.

/// Reads raw rows of `width` values. Lines whose first field does not parse
/// as a number are treated as a header and skipped when they are the first
/// line.
pub fn read_csv_rows(path: impl AsRef<Path>, width: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != width {
            return Err(DataError::RecordLength {
                record: rows.len(),
                expected: width,
                got: rec.len(),
            });
        }
        let values = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| DataError::Parse {
                    record: rows.len(),
                    msg: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(rows)
}

/// Imports orthonormal poses from CSV.
pub fn import_csv(path: impl AsRef<Path>, joint_names: Vec<String>) -> Result<PoseDataset, DataError> {
    let rows = read_csv_rows(path, joint_names.len() * 6)?;
    let poses = rows
        .into_iter()
        .map(PoseVector::from_values)
        .collect::<Result<Vec<_>, _>>()?;
    PoseDataset::new(poses, joint_names, Source::Imported)
}

pub fn export_csv(ds: &PoseDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for p in &ds.poses {
        w.write_record(p.as_slice().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting and batching

/// Seeded shuffle-then-cut: returns `(train, validation)` index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DataError::Split(format!("fraction {validation_fraction} not in (0, 1)")));
    }
    let n_val = (n as f64 * validation_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(DataError::Split(format!(
            "{n} records with fraction {validation_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

pub fn split(ds: &PoseDataset, validation_fraction: f64, seed: u64) -> Result<(PoseDataset, PoseDataset), DataError> {
    let (train, val) = split_indices(ds.len(), validation_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Iterator over row batches of a data matrix, optionally passing every
/// joint through inverse Gram-Schmidt with fresh noise.
pub struct Batches<'a, R> {
    data: ndarray::ArrayView2<'a, f64>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<AugmentParams>,
    rng: &'a mut R,
}

impl<'a, R: Rng> Batches<'a, R> {
    /// Visits rows in `order`; `rng` only feeds augmentation noise.
    pub fn in_order(
        data: ndarray::ArrayView2<'a, f64>,
        order: Vec<usize>,
        batch_size: usize,
        augment: Option<AugmentParams>,
        rng: &'a mut R,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        if let Some(p) = augment {
            p.validate()?;
            if data.ncols() % 6 != 0 {
                return Err(DataError::RecordLength {
                    record: 0,
                    expected: data.ncols().div_ceil(6) * 6,
                    got: data.ncols(),
                });
            }
        }
        Ok(Batches {
            data,
            order,
            pos: 0,
            batch_size,
            augment,
            rng,
        })
    }

    /// Shuffles the rows with `rng`, then batches them.
    pub fn shuffled(
        data: ndarray::ArrayView2<'a, f64>,
        batch_size: usize,
        augment: Option<AugmentParams>,
        rng: &'a mut R,
    ) -> Result<Self, DataError> {
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        order.shuffle(rng);
        Self::in_order(data, order, batch_size, augment, rng)
    }
}

impl<R: Rng> Iterator for Batches<'_, R> {
    type Item = Array2<f64>;

    fn next(&mut self) -> Option<Array2<f64>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = &self.order[self.pos..end];
        self.pos = end;
        let mut batch = self.data.select(ndarray::Axis(0), rows);
        if let Some(params) = self.augment {
            for mut row in batch.rows_mut() {
                let flat = row.as_slice_mut().expect("standard layout");
                augment_flat_pose(flat, &params, &mut *self.rng);
            }
        }
        Some(batch)
    }
}

/// Shuffled (and optionally augmented) batches of a dataset.
pub fn batches<'a, R: Rng>(
    ds: &'a Array2<f64>,
    batch_size: usize,
    augment: Option<AugmentParams>,
    rng: &'a mut R,
) -> Result<Batches<'a, R>, DataError> {
    Batches::shuffled(ds.view(), batch_size, augment, rng)
}

// ---------------------------------------------------------------------------
// Checkpoints

/// What a training run records next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    /// Epoch (0-based) of the stored parameters; `None` for an untrained model.
    pub epoch: Option<usize>,
    /// Validation NLL in nats/pose at that epoch.
    pub validation_loss: Option<f64>,
    pub seed: u64,
    /// Augmentation used in training, `None` when trained on raw poses.
    pub augment: Option<AugmentParams>,
    pub joint_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FlowConfig,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: FlowConfig,
    param_count: usize,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel, meta: TrainingMeta) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.flat_params(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<FlowModel, DataError> {
        FlowModel::from_params(self.config.clone(), &self.params)
            .map_err(|e| DataError::Hyperparameters(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            param_count: self.params.len(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let start = out.len();
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut c = Cursor { buf: bytes, pos: 8 };
        let len = c.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(c.take(len)?)?;
        header
            .config
            .validate()
            .map_err(|e| DataError::Hyperparameters(e.to_string()))?;
        let block = header.param_count * 8;
        let rest = &bytes[c.pos..];
        if rest.len() < block + 4 {
            return Err(DataError::Truncated {
                expected: (block + 4) as u64,
                found: rest.len() as u64,
            });
        }
        if rest.len() > block + 4 {
            return Err(DataError::Header("trailing bytes after checksum".into()));
        }
        let (params_bytes, crc_bytes) = rest.split_at(block);
        let crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(params_bytes) != crc {
            return Err(DataError::Checksum);
        }
        let params = params_bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let ckpt = Checkpoint {
            config: header.config,
            params,
            meta: header.meta,
        };
        // parameter count must match the declared architecture
        ckpt.to_model()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &FlowConfig) -> Result<Checkpoint, DataError> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(DataError::Hyperparameters(format!(
            "checkpoint has {:?}, expected {:?}",
            ckpt.config, expected
        )));
    }
    Ok(ckpt)
}
