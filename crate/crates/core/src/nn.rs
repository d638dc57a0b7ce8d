//! Dense ReLU encoder with hand-written reverse mode, SGD, and
//! finite-difference gradient checking. Everything is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("forward cache does not match these parameters")]
    CacheMismatch,
    #[error("non-finite gradient entry")]
    NonFiniteGradient,
    #[error("parameter/gradient shape mismatch")]
    ShapeMismatch,
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("invalid optimizer config: {0}")]
    Opt(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(NnError::Invalid("all layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Encoder shape shared by both agents; the input width comes from the
/// state encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128],
            embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig::new(input_dim, self.hidden_dims.clone(), self.embed_dim)
    }
}

/// Affine layer, weights stored row-major as `rows x cols` (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    /// `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates `g x^T` and `g` into `grad`, returns `W^T g`.
    fn backprop(&self, x: &[f64], g: &[f64], grad: &mut Layer) -> Vec<f64> {
        let mut gx = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            grad.bias[r] += gr;
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.weights[r * self.cols..(r + 1) * self.cols];
            for ((gw, &xi), (gxi, &w)) in grow.iter_mut().zip(x).zip(gx.iter_mut().zip(row)) {
                *gw += gr * xi;
                *gxi += gr * w;
            }
        }
        gx
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.rows * self.cols || self.bias.len() != self.rows {
            return Err(NnError::Invalid(format!(
                "layer {}x{} has {} weights and {} biases",
                self.rows,
                self.cols,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(NnError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type GradBundle = EncoderParams;

/// Per-layer inputs and pre-activations recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = cfg.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_out, fan_in);
            for v in &mut layer.weights {
                *v = rng.gen_range(-limit..=limit);
            }
            layer
        })
        .collect();
    EncoderParams { layers }
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            layers: cfg
                .widths()
                .windows(2)
                .map(|w| Layer::zeros(w[1], w[0]))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NnError::Invalid("no layers".into()));
        }
        for l in &self.layers {
            l.check()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].rows != pair[1].cols {
                return Err(NnError::Invalid(format!(
                    "layer output {} does not feed next input {}",
                    pair[0].rows, pair[1].cols
                )));
            }
        }
        Ok(())
    }

    /// Output embedding only.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(e, _)| e)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Ok((a, ForwardCache { inputs, pre }))
    }

    /// Adds the parameter gradient of `grad_out . f(x)` into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        grads: &mut GradBundle,
    ) -> Result<Vec<f64>> {
        if cache.pre.len() != self.layers.len()
            || grads.layers.len() != self.layers.len()
            || cache
                .pre
                .iter()
                .zip(&cache.inputs)
                .zip(&self.layers)
                .any(|((z, x), l)| z.len() != l.rows || x.len() != l.cols)
        {
            return Err(NnError::CacheMismatch);
        }
        if grad_out.len() != self.output_dim() {
            return Err(NnError::DimMismatch {
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                // ReLU subgradient at exactly 0 is 0.
                for (gi, &z) in g.iter_mut().zip(&cache.pre[i]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = self.layers[i].backprop(&cache.inputs[i], &g, &mut grads.layers[i]);
        }
        Ok(g)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
    ) -> Result<(GradBundle, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let gx = self.backward_into(cache, grad_out, &mut grads)?;
        Ok((grads, gx))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    /// Deep copy used as a frozen target network.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }
}

/// Anything made of flat `f64` tensors that SGD and the gradient checker
/// can walk in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameters for Layer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

fn same_shape<P: Parameters>(a: &P, b: &P) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.len() == y.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescales the whole gradient to this global L2 norm when it is larger.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.0,
            max_grad_norm: None,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Opt(format!(
                "learning rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Opt(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(NnError::Opt(format!("max_grad_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// SGD with optional heavy-ball momentum: `v <- mu v + g; theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptConfig,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(cfg: OptConfig) -> Self {
        Self {
            cfg,
            velocity: None,
        }
    }

    pub fn config(&self) -> &OptConfig {
        &self.cfg
    }

    /// Rejects the whole update if any gradient entry is non-finite.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !same_shape(params, grads) {
            return Err(NnError::ShapeMismatch);
        }
        let gts = grads.tensors();
        if !gts.iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(NnError::NonFiniteGradient);
        }
        let lr = self.cfg.learning_rate;
        let mut scale = 1.0;
        if let Some(c) = self.cfg.max_grad_norm {
            let norm = gts.iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        if self.cfg.momentum == 0.0 {
            for (p, g) in params.tensors_mut().into_iter().zip(&gts) {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * scale * gi;
                }
            }
            return Ok(());
        }
        let mu = self.cfg.momentum;
        let velocity = self
            .velocity
            .get_or_insert_with(|| gts.iter().map(|t| vec![0.0; t.len()]).collect());
        for ((p, g), v) in params.tensors_mut().into_iter().zip(&gts).zip(velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = mu * *vi + scale * gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One plain SGD update returning new parameters.
pub fn sgd_step(params: &EncoderParams, grads: &GradBundle, opt: &OptConfig) -> Result<EncoderParams> {
    let mut out = params.clone();
    Sgd::new(opt.clone()).step(&mut out, grads)?;
    Ok(out)
}

/// Largest `|analytic - numeric| / max(1e-8, |numeric|)` over every scalar
/// parameter, where `numeric` is the central difference of `loss` with step
/// `h`.
pub fn max_relative_error<P, F>(params: &P, analytic: &P, h: f64, mut loss: F) -> f64
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let analytic = analytic.tensors();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Gradient check of the encoder under a scalar loss of its embedding.
/// `loss_fn` returns the loss and its gradient with respect to the embedding.
pub fn finite_diff_check<F>(params: &EncoderParams, x: &[f64], loss_fn: F) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (e, cache) = params.forward(x)?;
    let (_, ge) = loss_fn(&e);
    let (grads, _) = params.backward(&cache, &ge)?;
    Ok(max_relative_error(params, &grads, FD_STEP, |p| {
        let e = p.embed(x).expect("shape fixed");
        loss_fn(&e).0
    }))
}

pub const CHECKPOINT_FORMAT: &str = "protodiag-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl EncoderCheckpoint {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self =
            serde_json::from_str(text).map_err(|e| NnError::Invalid(format!("checkpoint: {e}")))?;
        ck.check()?;
        Ok(ck)
    }

    pub fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(NnError::Invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.params.validate()?;
        let shapes: Vec<(usize, usize)> =
            self.params.layers.iter().map(|l| (l.rows, l.cols)).collect();
        let expected: Vec<(usize, usize)> = self
            .config
            .widths()
            .windows(2)
            .map(|w| (w[1], w[0]))
            .collect();
        if shapes != expected {
            return Err(NnError::Invalid(format!(
                "layer shapes {shapes:?} do not match config {expected:?}"
            )));
        }
        Ok(())
    }
}
