//! Baseline MLP deep Q-network: encoder plus a linear Q head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::nn::{init_params, EncoderParams, Layer, ModelConfig, Parameters, Sgd};
use crate::rl::{greedy, masked_max, train_loop, Learner, TrainConfig, TrainingLog, Transition};
use crate::simulator::SimConfig;
use crate::state::{state_dim, ActionSpace, AgentAction, DialogState, StateVector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnParams {
    pub encoder: EncoderParams,
    /// `|A| x d` action head.
    pub head: Layer,
}

impl Parameters for DqnParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

impl DqnParams {
    /// Glorot-initialised MLP `input -> hidden.. -> embed -> |A|`.
    pub fn init(input_dim: usize, model: &ModelConfig, n_actions: usize, seed: u64) -> Self {
        let mut cfg = model.encoder_config(input_dim);
        cfg.hidden_dims.push(cfg.output_dim);
        cfg.output_dim = n_actions;
        let mut all = init_params(&cfg, seed);
        let head = all.layers.pop().expect("at least one layer");
        Self {
            encoder: all,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: Layer::zeros(self.head.rows, self.head.cols),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.head.rows
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.cols != self.encoder.output_dim()
            || self.head.weights.len() != self.head.rows * self.head.cols
            || self.head.bias.len() != self.head.rows
        {
            return Err(Error::Shape(format!(
                "head {}x{} does not fit encoder output {}",
                self.head.rows,
                self.head.cols,
                self.encoder.output_dim()
            )));
        }
        Ok(())
    }
}

/// `head . f_enc(s) + bias`.
pub fn q_values(params: &DqnParams, s: &StateVector) -> Result<Vec<f64>> {
    let e = params.encoder.embed(s.as_slice())?;
    Ok(params.head.affine(&e))
}

/// Mean squared TD error over `batch` and its gradient with respect to the
/// online parameters. Targets come from `target` and are held fixed; the
/// bootstrapped max only ranges over actions legal in the next state.
pub fn td_loss(
    batch: &[&Transition],
    params: &DqnParams,
    target: &DqnParams,
    gamma: f64,
) -> Result<(f64, DqnParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for t in batch {
        let y = match &t.next {
            None => t.reward,
            Some(next) => {
                let qn = q_values(target, &next.state)?;
                t.reward + gamma * masked_max(&qn, &next.mask).unwrap_or(0.0)
            }
        };
        let (e, cache) = params.encoder.forward(t.state.as_slice())?;
        if t.action >= params.n_actions() {
            return Err(Error::Shape(format!("action {} out of range", t.action)));
        }
        let cols = params.head.cols;
        let row = &params.head.weights[t.action * cols..(t.action + 1) * cols];
        let q = params.head.bias[t.action] + crate::nn::dot(row, &e);
        let delta = q - y;
        loss += delta * delta * scale;
        let g = 2.0 * delta * scale;
        grads.head.bias[t.action] += g;
        for (gw, ei) in grads.head.weights[t.action * cols..(t.action + 1) * cols]
            .iter_mut()
            .zip(&e)
        {
            *gw += g * ei;
        }
        let ge: Vec<f64> = row.iter().map(|w| g * w).collect();
        params.encoder.backward_into(&cache, &ge, &mut grads.encoder)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grads))
}

/// Greedy action under `params` among the legal actions of `state`.
pub fn act_greedy(
    params: &DqnParams,
    state: &DialogState,
    space: ActionSpace,
    max_turns: usize,
) -> Result<AgentAction> {
    let q = q_values(params, &state.encode(max_turns)?)?;
    let i = greedy(&q, &space.mask(state)).ok_or(Error::AllMasked)?;
    Ok(space.action(i)?)
}

/// Online network, frozen target and optimizer state.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub params: DqnParams,
    target: DqnParams,
    sgd: Sgd,
    space: ActionSpace,
}

impl DqnAgent {
    pub fn new(params: DqnParams, space: ActionSpace, cfg: &TrainConfig) -> Result<Self> {
        params.validate()?;
        if params.n_actions() != space.len() {
            return Err(Error::Shape(format!(
                "head has {} actions, action space has {}",
                params.n_actions(),
                space.len()
            )));
        }
        Ok(Self {
            target: params.clone(),
            params,
            sgd: Sgd::new(cfg.opt.clone()),
            space,
        })
    }

    pub fn target(&self) -> &DqnParams {
        &self.target
    }

    /// Fresh optimizer with a new config, keeping the parameters.
    pub fn reset_optimizer(&mut self, cfg: &TrainConfig) {
        self.sgd = Sgd::new(cfg.opt.clone());
        self.target = self.params.clone();
    }
}

impl Learner for DqnAgent {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        q_values(&self.params, state)
    }

    fn update(&mut self, batch: &[&Transition], gamma: f64, _rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, grads) = td_loss(batch, &self.params, &self.target, gamma)?;
        self.sgd.step(&mut self.params, &grads)?;
        Ok(loss)
    }

    fn sync_target(&mut self) -> Result<()> {
        self.target = self.params.snapshot();
        Ok(())
    }

    fn space(&self) -> ActionSpace {
        self.space
    }
}

impl DqnParams {
    pub fn snapshot(&self) -> Self {
        self.clone()
    }
}

/// Trains a fresh DQN on the corpus's train split.
pub fn train_dqn(
    corpus: &Corpus,
    sim_cfg: &SimConfig,
    train_cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<(DqnParams, TrainingLog)> {
    let space = ActionSpace::from(&corpus.vocab);
    let input = state_dim(space.n_symptoms, sim_cfg.max_turns);
    let params = DqnParams::init(input, model, space.len(), train_cfg.seed);
    let mut agent = DqnAgent::new(params, space, train_cfg)?;
    let goals: Vec<_> = corpus.train_goals().collect();
    let log = train_loop(&mut agent, &goals, sim_cfg, train_cfg)?;
    Ok((agent.params, log))
}
