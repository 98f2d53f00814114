//! Normalizing-flow prior over body poses in the 6D rotation representation.
//!
//! A pose is 21 joint rotations, each stored as the first two columns of its
//! rotation matrix, flattened in the transposed layout (all first columns,
//! then all second columns) into a 126-vector. Densities are in nats.

pub mod data;
pub mod eval;
pub mod flow;
pub mod nncore;
pub mod rng;
pub mod rotation;
pub mod training;

pub use data::{Checkpoint, PoseDataset, SyntheticGeneratorSpec, TrainingMeta};
pub use eval::{DensitySample, KsResult};
pub use flow::{FlowConfig, FlowModel, Init};
pub use nncore::AdamConfig;
pub use rotation::{AugmentParams, PoseVector, RawRotation6D, Rotation6D, POSE_DIM, POSE_JOINTS};
pub use training::{TrainConfig, TrainReport};
