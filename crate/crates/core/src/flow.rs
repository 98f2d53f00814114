//! RealNVP: a stack of affine coupling layers with exact inverse and
//! log-det-Jacobian bookkeeping.
//!
//! Densities are natural-log (nats) throughout. The forward direction maps
//! latent `z ~ N(0, I)` to ambient `x`; the inverse maps back.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{Activation, Mlp, MlpGrads, NnError, OutputInit};

/// Rows per shard for batched evaluation and gradient accumulation. Shard
/// boundaries do not depend on the thread count, so results are identical
/// for any degree of parallelism.
pub const SHARD_ROWS: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("diverged")]
    Diverged,
    #[error("dimension mismatch: model has {expected}, input has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture hyperparameters. Defaults: 126 dims, 12 coupling layers,
/// hypernets of 4 hidden layers x 256 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: crate::rotation::POSE_DIM,
            layers: 12,
            hidden_width: 256,
            hidden_layers: 4,
            activation: Activation::default(),
            s_max: 5.0,
        }
    }
}

impl FlowConfig {
    pub fn with_dims(dim: usize, layers: usize, hidden_width: usize, hidden_layers: usize) -> Self {
        FlowConfig {
            dim,
            layers,
            hidden_width,
            hidden_layers,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(FlowError::Config(format!("dimension {} must be even and >= 2", self.dim)));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(FlowError::Config("hidden width must be positive".into()));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(FlowError::Config(format!("s_max {} must be positive", self.s_max)));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.dim / 2
    }

    fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }
}

/// Which half a coupling layer transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    /// Conditions on `[0, d/2)`, transforms `[d/2, d)`.
    TransformSecond,
    /// Conditions on `[d/2, d)`, transforms `[0, d/2)`.
    TransformFirst,
}

impl Parity {
    pub fn for_layer(index: usize) -> Self {
        if index % 2 == 0 {
            Parity::TransformSecond
        } else {
            Parity::TransformFirst
        }
    }

    /// `(conditioning range start, transformed range start)` for half-width `h`.
    fn offsets(self, h: usize) -> (usize, usize) {
        match self {
            Parity::TransformSecond => (0, h),
            Parity::TransformFirst => (h, 0),
        }
    }
}

/// How the output layer of every hypernet starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero output layers: the flow is exactly the identity.
    Identity,
    /// Random output layers with the given gain (tests, oracles).
    Random { gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub hypernet: Mlp,
    pub parity: Parity,
}

impl CouplingLayer {
    fn half(&self) -> usize {
        self.hypernet.s_width
    }

    fn hyper(&self, cond: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), FlowError> {
        let (s, t) = self.hypernet.forward_batch(cond)?;
        ensure_finite(&s)?;
        ensure_finite(&t)?;
        Ok((s, t))
    }

    /// `x'_trans = x_trans * exp(s(x_cond)) + t(x_cond)`; returns per-row
    /// `log_det = sum s`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let h = self.half();
        let (c0, t0) = self.parity.offsets(h);
        let (s, t) = self.hyper(&x.slice(s![.., c0..c0 + h]))?;
        let mut out = x.to_owned();
        Zip::from(out.slice_mut(s![.., t0..t0 + h]))
            .and(&s)
            .and(&t)
            .for_each(|v, &s, &t| *v = *v * s.exp() + t);
        Ok((out, s.sum_axis(Axis(1))))
    }

    /// `x_trans = (x'_trans - t(x'_cond)) * exp(-s(x'_cond))`; returns
    /// per-row `log_det = -sum s`.
    pub fn inverse_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let h = self.half();
        let (c0, t0) = self.parity.offsets(h);
        let (s, t) = self.hyper(&x.slice(s![.., c0..c0 + h]))?;
        let mut out = x.to_owned();
        Zip::from(out.slice_mut(s![.., t0..t0 + h]))
            .and(&s)
            .and(&t)
            .for_each(|v, &s, &t| *v = (*v - t) * (-s).exp());
        Ok((out, -s.sum_axis(Axis(1))))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (y, ld) = self.forward_batch(&row(x))?;
        Ok((y.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (y, ld) = self.inverse_batch(&row(x))?;
        Ok((y.into_raw_vec_and_offset().0, ld[0]))
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice")
}

fn ensure_finite(a: &Array2<f64>) -> Result<(), FlowError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::Diverged)
    }
}

/// `sum_i log N(z_i; 0, 1)` for one row.
pub fn standard_normal_logpdf(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * sq
}

fn standard_normal_logpdf_rows(z: &Array2<f64>) -> Array1<f64> {
    z.rows()
        .into_iter()
        .map(|r| standard_normal_logpdf(r.as_slice().expect("standard layout")))
        .collect()
}

/// Log-density of one input together with its latent image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityResult {
    /// `log p(x)` in nats.
    pub log_prob: f64,
    /// Log-det-Jacobian of the inverse map at `x`.
    pub log_det: f64,
    pub z: Vec<f64>,
}

/// Batched variant of [`DensityResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityBatch {
    pub log_prob: Array1<f64>,
    pub log_det: Array1<f64>,
    pub z: Array2<f64>,
}

/// Draws from the model with their densities attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub x: Array2<f64>,
    pub log_prob: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<MlpGrads>,
}

impl FlowGrads {
    pub fn zeros_like(model: &FlowModel) -> Self {
        FlowGrads {
            layers: model.layers.iter().map(|l| MlpGrads::zeros_like(&l.hypernet)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FlowGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    /// Gradient tensors in the same order as [`FlowModel::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, init: Init, rng: &mut R) -> Result<Self, FlowError> {
        config.validate()?;
        let h = config.half();
        let output_init = match init {
            Init::Identity => OutputInit::Zero,
            Init::Random { gain } => OutputInit::Random { gain },
        };
        let layers = (0..config.layers)
            .map(|i| CouplingLayer {
                hypernet: Mlp::new(h, &config.hidden(), h, config.activation, config.s_max, output_init, rng),
                parity: Parity::for_layer(i),
            })
            .collect();
        Ok(FlowModel { config, layers })
    }

    /// Builds a model from flat parameters laid out as [`FlowModel::param_slices`].
    pub fn from_params(config: FlowConfig, params: &[f64]) -> Result<Self, FlowError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = FlowModel::new(config, Init::Identity, &mut rng)?;
        let want = model.param_count();
        if params.len() != want {
            return Err(FlowError::Config(format!(
                "parameter count {} does not match architecture ({want})",
                params.len()
            )));
        }
        let mut offset = 0;
        for sl in model.param_slices_mut() {
            sl.copy_from_slice(&params[offset..offset + sl.len()]);
            offset += sl.len();
        }
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.hypernet.param_count()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.hypernet.param_slices()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.hypernet.param_slices_mut())
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn check_dim(&self, x: &ArrayView2<f64>) -> Result<(), FlowError> {
        if x.ncols() != self.config.dim {
            return Err(FlowError::Dimension {
                expected: self.config.dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Applies `f` to fixed-size row shards in parallel and stitches the
    /// results back in order.
    fn sharded<F>(&self, x: &ArrayView2<f64>, f: F) -> Result<(Array2<f64>, Array1<f64>), FlowError>
    where
        F: Fn(&ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> + Sync,
    {
        self.check_dim(x)?;
        if x.nrows() <= SHARD_ROWS {
            return f(x);
        }
        let parts = x
            .axis_chunks_iter(Axis(0), SHARD_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| f(&chunk))
            .collect::<Result<Vec<_>, _>>()?;
        let xs: Vec<_> = parts.iter().map(|(a, _)| a.view()).collect();
        let ls: Vec<_> = parts.iter().map(|(_, l)| l.view()).collect();
        Ok((
            concatenate(Axis(0), &xs).expect("matching widths"),
            concatenate(Axis(0), &ls).expect("1-d"),
        ))
    }

    fn forward_serial(&self, z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let mut x = z.to_owned();
        let mut log_det = Array1::zeros(z.nrows());
        for layer in &self.layers {
            let (y, ld) = layer.forward_batch(&x.view())?;
            x = y;
            log_det += &ld;
        }
        ensure_finite(&x)?;
        Ok((x, log_det))
    }

    fn inverse_serial(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let mut z = x.to_owned();
        let mut log_det = Array1::zeros(x.nrows());
        for layer in self.layers.iter().rev() {
            let (y, ld) = layer.inverse_batch(&z.view())?;
            z = y;
            log_det += &ld;
        }
        ensure_finite(&z)?;
        Ok((z, log_det))
    }

    /// `x = T(z)` with per-row forward log-det.
    pub fn forward_batch(&self, z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        self.sharded(z, |c| self.forward_serial(c))
    }

    /// `z = T^-1(x)` with per-row inverse log-det.
    pub fn inverse_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        self.sharded(x, |c| self.inverse_serial(c))
    }

    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (x, ld) = self.forward_batch(&row(z))?;
        Ok((x.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let (z, ld) = self.inverse_batch(&row(x))?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    /// `log p(x) = log N(T^-1(x)) + log|det J_{T^-1}(x)|` per row.
    pub fn log_prob_batch(&self, x: &ArrayView2<f64>) -> Result<DensityBatch, FlowError> {
        let (z, log_det) = self.inverse_batch(x)?;
        let log_prob = standard_normal_logpdf_rows(&z) + &log_det;
        Ok(DensityBatch { log_prob, log_det, z })
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<DensityResult, FlowError> {
        let b = self.log_prob_batch(&row(x))?;
        Ok(DensityResult {
            log_prob: b.log_prob[0],
            log_det: b.log_det[0],
            z: b.z.into_raw_vec_and_offset().0,
        })
    }

    /// Projects latents to the ambient space, computing the ambient
    /// log-density in the same pass: `log p(x) = log N(z) - log|det J_T(z)|`.
    pub fn project(&self, z: &ArrayView2<f64>) -> Result<SampleBatch, FlowError> {
        let (x, log_det) = self.forward_batch(z)?;
        let log_prob = standard_normal_logpdf_rows(&z.to_owned()) - &log_det;
        Ok(SampleBatch { x, log_prob })
    }

    /// Draws `n` latents row by row from `rng`, then projects them.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch, FlowError> {
        if n == 0 {
            return Err(FlowError::EmptyBatch);
        }
        let z = Array2::from_shape_simple_fn((n, self.config.dim), || StandardNormal.sample(rng));
        self.project(&z.view())
    }

    /// `-mean log p(x)` over the batch and its gradient w.r.t. every
    /// hypernet parameter.
    pub fn loss_and_grads(&self, batch: &ArrayView2<f64>) -> Result<(f64, FlowGrads), FlowError> {
        self.check_dim(batch)?;
        let n = batch.nrows();
        if n == 0 {
            return Err(FlowError::EmptyBatch);
        }
        let weight = 1.0 / n as f64;
        let parts = batch
            .axis_chunks_iter(Axis(0), SHARD_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| self.shard_loss_and_grads(&chunk, weight))
            .collect::<Result<Vec<_>, _>>()?;
        let mut parts = parts.into_iter();
        let (mut total, mut grads) = parts.next().expect("non-empty batch");
        for (l, g) in parts {
            total += l;
            grads.add_assign(&g);
        }
        let loss = total * weight;
        if !loss.is_finite() {
            return Err(FlowError::Diverged);
        }
        Ok((loss, grads))
    }

    /// Returns the summed NLL of the shard and gradients of `weight * sum NLL`.
    fn shard_loss_and_grads(&self, x: &ArrayView2<f64>, weight: f64) -> Result<(f64, FlowGrads), FlowError> {
        struct Record {
            tape: crate::nncore::GradTape,
            s: Array2<f64>,
            /// Transformed half after the inverse step.
            out: Array2<f64>,
        }

        let d = self.config.dim;
        let h = self.config.half();
        let mut y = x.to_owned();
        let mut sum_s = 0.0;
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (c0, t0) = layer.parity.offsets(h);
            let (s, t, tape) = layer.hypernet.forward_taped(&y.slice(s![.., c0..c0 + h]))?;
            ensure_finite(&s)?;
            ensure_finite(&t)?;
            let mut trans = y.slice_mut(s![.., t0..t0 + h]);
            Zip::from(&mut trans)
                .and(&s)
                .and(&t)
                .for_each(|v, &s, &t| *v = (*v - t) * (-s).exp());
            let out = trans.to_owned();
            sum_s += s.sum();
            records.push(Record { tape, s, out });
        }
        ensure_finite(&y)?;

        // nll = d/2 ln(2 pi) + |z|^2 / 2 + sum s
        let sq: f64 = y.iter().map(|v| v * v).sum();
        let nll = 0.5 * d as f64 * (2.0 * PI).ln() * x.nrows() as f64 + 0.5 * sq + sum_s;

        let mut g = y * weight;
        let mut grads = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let Record { tape, s, out } = records.pop().expect("one record per layer");
            let (c0, t0) = layer.parity.offsets(h);
            let g_out = g.slice(s![.., t0..t0 + h]).to_owned();
            let mut g_u = Array2::zeros((x.nrows(), h));
            let mut g_s = Array2::zeros((x.nrows(), h));
            Zip::from(&mut g_u)
                .and(&mut g_s)
                .and(&g_out)
                .and(&s)
                .and(&out)
                .for_each(|gu, gs, &go, &s, &o| {
                    *gu = go * (-s).exp();
                    *gs = weight - go * o;
                });
            let g_t = -&g_u;
            let (mg, g_cond) = layer.hypernet.backward(tape, &g_s.view(), &g_t.view())?;
            grads.push(mg);
            let mut cond = g.slice_mut(s![.., c0..c0 + h]);
            cond += &g_cond;
            g.slice_mut(s![.., t0..t0 + h]).assign(&g_u);
        }
        Ok((nll, FlowGrads { layers: grads }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::DenseLayer;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(dim: usize, layers: usize, seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowModel::new(FlowConfig::with_dims(dim, layers, 16, 2), Init::Random { gain: 0.5 }, &mut rng).unwrap()
    }

    /// 2-dim layer with constant `s = log 2`, `t = 1`.
    fn toy_layer() -> CouplingLayer {
        let s_max = 5.0;
        let raw_s = s_max * (2f64.ln() / s_max).atanh();
        CouplingLayer {
            hypernet: Mlp {
                layers: vec![DenseLayer {
                    weights: array![[0.0], [0.0]],
                    biases: array![raw_s, 1.0],
                }],
                activation: Activation::default(),
                s_width: 1,
                t_width: 1,
                s_max,
            },
            parity: Parity::TransformSecond,
        }
    }

    #[test]
    fn toy_layer_by_hand() {
        let layer = toy_layer();
        let (y, ld) = layer.forward(&[0.7, 1.5]).unwrap();
        assert_eq!(y[0], 0.7);
        assert!((y[1] - 4.0).abs() < 1e-12);
        assert!((ld - 2f64.ln()).abs() < 1e-12);
        let (x, ld) = layer.inverse(&[0.7, 4.0]).unwrap();
        assert_eq!(x[0], 0.7);
        assert!((x[1] - 1.5).abs() < 1e-12);
        assert!((ld + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(FlowConfig::with_dims(8, 4, 8, 2), Init::Identity, &mut rng).unwrap();
        let z: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let (x, ld) = model.forward(&z).unwrap();
        assert_eq!(x, z);
        assert_eq!(ld, 0.0);
        let (back, ld) = model.inverse(&z).unwrap();
        assert_eq!(back, z);
        assert_eq!(ld, 0.0);
        for layer in model.layers() {
            let (y, ld) = layer.forward(&z).unwrap();
            assert_eq!((y, ld), (z.clone(), 0.0));
        }
    }

    #[test]
    fn parities_alternate() {
        let model = random_model(6, 5, 1);
        for (i, w) in model.layers().windows(2).enumerate() {
            assert_ne!(w[0].parity, w[1].parity, "layers {i},{}", i + 1);
        }
        assert_eq!(model.layers()[0].parity, Parity::TransformSecond);
    }

    #[test]
    fn single_layer_model_equals_coupling() {
        let model = random_model(6, 1, 2);
        let z = [0.3, -0.1, 1.2, 0.4, -0.9, 0.05];
        assert_eq!(model.forward(&z).unwrap(), model.layers()[0].forward(&z).unwrap());
        assert_eq!(model.inverse(&z).unwrap(), model.layers()[0].inverse(&z).unwrap());
    }

    #[test]
    fn round_trip_and_antisymmetry() {
        let model = random_model(10, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (x, fwd) = model.forward(&z).unwrap();
            let (back, inv) = model.inverse(&x).unwrap();
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((fwd + inv).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_log_prob_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(FlowConfig::default(), Init::Identity, &mut rng).unwrap();
        let zero = vec![0.0; 126];
        let lp = model.log_prob(&zero).unwrap().log_prob;
        assert!((lp - (-63.0 * (2.0 * PI).ln())).abs() < 1e-9);
        assert!((lp + 115.7855).abs() < 1e-3);
        let x: Vec<f64> = (0..126).map(|i| (i as f64 * 0.37).sin()).collect();
        let q: f64 = x.iter().map(|v| v * v).sum();
        let lp = model.log_prob(&x).unwrap().log_prob;
        assert!((lp - (-63.0 * (2.0 * PI).ln() - q / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn density_result_is_self_consistent() {
        let model = random_model(6, 4, 5);
        let x = [0.2, -1.0, 0.5, 0.1, 0.9, -0.3];
        let r = model.log_prob(&x).unwrap();
        assert!((r.log_prob - (standard_normal_logpdf(&r.z) + r.log_det)).abs() < 1e-12);
    }

    #[test]
    fn sample_density_matches_inverse_density() {
        let model = random_model(8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = model.sample(300, &mut rng).unwrap();
        let d = model.log_prob_batch(&s.x.view()).unwrap();
        for (a, b) in s.log_prob.iter().zip(d.log_prob.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let model = random_model(8, 4, 6);
        let a = model.sample(400, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.sample(400, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(model.sample(0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn sharding_does_not_change_results() {
        let model = random_model(6, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((3 * SHARD_ROWS + 17, 6), || StandardNormal.sample(&mut rng));
        let whole = model.log_prob_batch(&x.view()).unwrap();
        for (i, r) in x.rows().into_iter().enumerate() {
            let single = model.log_prob(r.as_slice().unwrap()).unwrap();
            assert_eq!(single.log_prob.to_bits(), whole.log_prob[i].to_bits());
        }
    }

    #[test]
    fn loss_of_zero_batch_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(FlowConfig::default(), Init::Identity, &mut rng).unwrap();
        let batch = Array2::zeros((4, 126));
        let (loss, _) = model.loss_and_grads(&batch.view()).unwrap();
        assert!((loss - 63.0 * (2.0 * PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let model = random_model(6, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_simple_fn((9, 6), || StandardNormal.sample(&mut rng));
        let xx = concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let (a, ga) = model.loss_and_grads(&x.view()).unwrap();
        let (b, gb) = model.loss_and_grads(&xx.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (sa, sb) in ga.slices().iter().zip(gb.slices()) {
            for (u, v) in sa.iter().zip(sb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_log_prob() {
        let model = random_model(6, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array2::from_shape_simple_fn((300, 6), || StandardNormal.sample(&mut rng));
        let (loss, _) = model.loss_and_grads(&x.view()).unwrap();
        let lp = model.log_prob_batch(&x.view()).unwrap().log_prob;
        assert!((loss + lp.mean().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn dimension_and_empty_errors() {
        let model = random_model(6, 2, 14);
        assert_eq!(
            model.log_prob(&[0.0; 4]).unwrap_err(),
            FlowError::Dimension { expected: 6, got: 4 }
        );
        let empty = Array2::<f64>::zeros((0, 6));
        assert_eq!(model.loss_and_grads(&empty.view()).unwrap_err(), FlowError::EmptyBatch);
        assert!(FlowModel::new(FlowConfig::with_dims(5, 2, 4, 1), Init::Identity, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn non_finite_input_is_divergence() {
        let model = random_model(6, 2, 15);
        assert_eq!(
            model.log_prob(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap_err(),
            FlowError::Diverged
        );
    }

    #[test]
    fn params_round_trip() {
        let model = random_model(6, 3, 16);
        let rebuilt = FlowModel::from_params(model.config().clone(), &model.flat_params()).unwrap();
        assert_eq!(rebuilt, model);
        assert!(FlowModel::from_params(model.config().clone(), &[0.0; 3]).is_err());
    }
}
