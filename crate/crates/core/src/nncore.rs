//! Dense layers, the coupling hypernet, hand-written reverse-mode gradients,
//! and Adam.
//!
//! Activations are batched row-major: one row per sample.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("diverged")]
    Diverged,
}

fn shape_err(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((output, input)),
            biases: Array1::zeros(output),
        }
    }

    /// Uniform in `[-bound, bound]` with `bound = gain * sqrt(3 / fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / input as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..=bound));
        DenseLayer {
            weights,
            biases: Array1::zeros(output),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weights.t());
        y += &self.biases;
        y
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    LeakyRelu { slope: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    fn apply(&self, x: &mut Array2<f64>) {
        match *self {
            Activation::LeakyRelu { slope } => x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v }),
        }
    }

    /// Multiplies `grad` by the derivative, read off the activation output.
    fn backprop(&self, grad: &mut Array2<f64>, output: &Array2<f64>) {
        match *self {
            Activation::LeakyRelu { slope } => Zip::from(grad).and(output).for_each(|g, &o| {
                if o <= 0.0 {
                    *g *= slope
                }
            }),
        }
    }
}

/// Hypernet of a coupling layer: a trunk with one output split into an
/// `s` head (log-scales, bounded) and a `t` head (shifts).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
    pub s_width: usize,
    pub t_width: usize,
    /// Log-scales are squashed as `s_max * tanh(raw / s_max)`.
    pub s_max: f64,
}

/// Output-layer initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// Zero weights and biases: `s = t = 0` for every input.
    Zero,
    /// Uniform weights scaled by `gain`.
    Random { gain: f64 },
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        half_out: usize,
        activation: Activation,
        s_max: f64,
        output_init: OutputInit,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(DenseLayer::fan_in_uniform(width, h, 2f64.sqrt(), rng));
            width = h;
        }
        layers.push(match output_init {
            OutputInit::Zero => DenseLayer::zeros(width, 2 * half_out),
            OutputInit::Random { gain } => {
                let mut l = DenseLayer::fan_in_uniform(width, 2 * half_out, gain, rng);
                l.biases.mapv_inplace(|_| rng.random_range(-gain..=gain));
                l
            }
        });
        Mlp {
            layers,
            activation,
            s_width: half_out,
            t_width: half_out,
            s_max,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_width() {
            return Err(shape_err(
                format!("input width {}", self.input_width()),
                format!("width {}", x.ncols()),
            ));
        }
        Ok(())
    }

    /// Batched forward pass returning `(s, t)`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), NnError> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            self.activation.apply(&mut h);
            h = layer.forward(&h.view());
        }
        Ok(self.split_heads(h))
    }

    /// Batched forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_taped(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, GradTape), NnError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            self.activation.apply(&mut h);
            let next = layer.forward(&h.view());
            inputs.push(h);
            h = next;
        }
        let (s, t) = self.split_heads(h);
        let tape = GradTape {
            inputs,
            s: s.clone(),
            batch: x.nrows(),
        };
        Ok((s, t, tape))
    }

    fn split_heads(&self, out: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let s_max = self.s_max;
        let s = out
            .slice(s![.., ..self.s_width])
            .mapv(|r| s_max * (r / s_max).tanh());
        let t = out.slice(s![.., self.s_width..]).to_owned();
        (s, t)
    }

    /// Single-vector convenience wrapper around [`Mlp::forward_batch`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| shape_err("row vector", e))?;
        let (s, t) = self.forward_batch(&x)?;
        Ok((s.into_raw_vec_and_offset().0, t.into_raw_vec_and_offset().0))
    }

    /// Reverse pass. Consumes the tape, so a recording backs exactly one
    /// backward call.
    pub fn backward(
        &self,
        tape: GradTape,
        grad_s: &ArrayView2<f64>,
        grad_t: &ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>), NnError> {
        let expected = (tape.batch, self.s_width);
        if grad_s.dim() != expected || grad_t.dim() != (tape.batch, self.t_width) {
            return Err(shape_err(format!("{expected:?}"), format!("{:?}/{:?}", grad_s.dim(), grad_t.dim())));
        }
        let GradTape { inputs, s, batch } = tape;
        let out_width = self.s_width + self.t_width;
        let mut g = Array2::<f64>::zeros((batch, out_width));
        {
            let inv_max2 = 1.0 / (self.s_max * self.s_max);
            let mut gs = g.slice_mut(s![.., ..self.s_width]);
            Zip::from(&mut gs)
                .and(grad_s)
                .and(&s)
                .for_each(|o, &gs, &sv| *o = gs * (1.0 - sv * sv * inv_max2));
        }
        g.slice_mut(s![.., self.s_width..]).assign(grad_t);

        let mut grads: Vec<DenseGrads> = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &inputs[i];
            let dw = g.t().dot(input);
            let db = g.sum_axis(Axis(0));
            grads.push(DenseGrads { weights: dw, biases: db });
            let mut gin = g.dot(&layer.weights);
            if i > 0 {
                self.activation.backprop(&mut gin, input);
                g = gin;
            } else {
                input_grad = Some(gin);
            }
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, input_grad.expect("at least one layer")))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.biases.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.biases.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Activations recorded by [`Mlp::forward_taped`].
#[derive(Debug)]
pub struct GradTape {
    /// Input of every dense layer (post-activation for all but the first).
    inputs: Vec<Array2<f64>>,
    s: Array2<f64>,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            layers: m
                .layers
                .iter()
                .map(|l| DenseGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.biases += &b.biases;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.biases.as_slice().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Accumulators shaped after `params`.
    pub fn new(config: AdamConfig, params: &[&[f64]]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One bias-corrected Adam update. Parameters are untouched when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!("{} tensors", self.m.len()), format!("{}/{}", params.len(), grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(shape_err(format!("tensor of {}", m.len()), format!("{}/{}", p.len(), g.len())));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(NnError::Diverged);
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp::new(3, &[5, 4], 3, Activation::default(), 5.0, OutputInit::Random { gain: 1.0 }, rng)
    }

    #[test]
    fn zero_output_layer_gives_zero_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(63, &[256, 256], 63, Activation::default(), 5.0, OutputInit::Zero, &mut rng);
        let x: Vec<f64> = (0..63).map(|i| i as f64 * 0.1 - 3.0).collect();
        let (s, t) = m.forward(&x).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_one_hidden_unit() {
        // input (x0, x1) -> h = leaky(2 x0 - x1 + 0.5) -> s_raw = 3h, t = -h + 1
        let m = Mlp {
            layers: vec![
                DenseLayer {
                    weights: array![[2.0, -1.0]],
                    biases: array![0.5],
                },
                DenseLayer {
                    weights: array![[3.0], [-1.0]],
                    biases: array![0.0, 1.0],
                },
            ],
            activation: Activation::LeakyRelu { slope: 0.01 },
            s_width: 1,
            t_width: 1,
            s_max: 5.0,
        };
        // positive branch: h = 2*1 - 0.5 + 0.5 = 2
        let (s, t) = m.forward(&[1.0, 0.5]).unwrap();
        assert!((s[0] - 5.0 * (6.0f64 / 5.0).tanh()).abs() < 1e-15);
        assert_eq!(t[0], -1.0);
        // negative branch: pre = -2 - 1 + 0.5 = -2.5, h = -0.025
        let (s, t) = m.forward(&[-1.0, 1.0]).unwrap();
        assert!((s[0] - 5.0 * (-0.075f64 / 5.0).tanh()).abs() < 1e-15);
        assert!((t[0] - 1.025).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = tiny_net(&mut rng);
        let a = m.forward(&[0.1, -0.2, 0.3]).unwrap();
        let b = m.forward(&[0.1, -0.2, 0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = tiny_net(&mut rng);
        assert!(matches!(m.forward(&[0.0; 4]), Err(NnError::Shape { .. })));
    }

    fn scalar_loss(m: &Mlp, x: &Array2<f64>, ws: &Array2<f64>, wt: &Array2<f64>) -> f64 {
        let (s, t) = m.forward_batch(&x.view()).unwrap();
        (&s * ws).sum() + (&t * wt).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = tiny_net(&mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let ws = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let wt = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (_, _, tape) = m.forward_taped(&x.view()).unwrap();
        let (grads, gin) = m.backward(tape, &ws.view(), &wt.view()).unwrap();

        let h = 1e-4;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let analytic: Vec<f64> = grads.slices().concat();
        let mut probe = m.clone();
        let n_params = analytic.len();
        for idx in 0..n_params {
            let bump = |net: &mut Mlp, delta: f64| {
                let mut k = idx;
                for sl in net.param_slices_mut() {
                    if k < sl.len() {
                        sl[k] += delta;
                        return;
                    }
                    k -= sl.len();
                }
            };
            bump(&mut probe, h);
            let up = scalar_loss(&probe, &x, &ws, &wt);
            bump(&mut probe, -2.0 * h);
            let down = scalar_loss(&probe, &x, &ws, &wt);
            bump(&mut probe, h);
            let fd = (up - down) / (2.0 * h);
            assert!(rel(analytic[idx], fd) < 1e-3, "param {idx}: {} vs {fd}", analytic[idx]);
        }
        for r in 0..4 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let up = scalar_loss(&m, &xp, &ws, &wt);
                xp[[r, c]] -= 2.0 * h;
                let down = scalar_loss(&m, &xp, &ws, &wt);
                let fd = (up - down) / (2.0 * h);
                assert!(rel(gin[[r, c]], fd) < 1e-3);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = tiny_net(&mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let (_, _, tape) = m.forward_taped(&x.view()).unwrap();
        let z = Array2::zeros((2, 3));
        let (grads, gin) = m.backward(tape, &z.view(), &z.view()).unwrap();
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn t_head_bias_gradient_counts_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = tiny_net(&mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let (_, _, tape) = m.forward_taped(&x.view()).unwrap();
        let ones = Array2::ones((5, 3));
        let (grads, _) = m.backward(tape, &Array2::zeros((5, 3)).view(), &ones.view()).unwrap();
        let last = grads.layers.last().unwrap();
        // d sum(t) / d b_t = batch size (one output per row)
        for j in 3..6 {
            assert_eq!(last.biases[j], 5.0);
        }
    }

    #[test]
    fn backward_rejects_mismatched_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = tiny_net(&mut rng);
        let x = Array2::zeros((2, 3));
        let (_, _, tape) = m.forward_taped(&x.view()).unwrap();
        let bad = Array2::zeros((3, 3));
        assert!(m.backward(tape, &bad.view(), &bad.view()).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 1e-3];
        let mut st = AdamState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - -1.99).abs() < 1e-6);
        assert!((p[2] - 0.49).abs() < 1e-4);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 1);

        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&[0.7, -3.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert_eq!(st.step(&mut [&mut p], &[&[f64::NAN, 0.0]]), Err(NnError::Diverged));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut p: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut st = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() }, &[&p]);
            for _ in 0..20 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + rng.random_range(-0.1..0.1)).collect();
                st.step(&mut [&mut p], &[&g]).unwrap();
            }
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
