//! Pieces shared by both agents: transitions, replay memory, epsilon-greedy
//! selection over masked actions, the episode runner and the training loop.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UserGoal;
use crate::nn::OptConfig;
use crate::simulator::{Episode, Outcome, SimConfig};
use crate::state::{ActionSpace, StateVector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextState {
    pub state: StateVector,
    /// Legal actions in `state`; bootstrapped maxima only range over these.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next: Option<NextState>,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.next.is_none()
    }
}

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Up to `batch_size` distinct transitions, uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<&Transition> {
        let n = batch_size.min(self.items.len());
        let mut idx = sample(rng, self.items.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Linear decay from `eps_start` to `eps_end` over `decay_steps` episodes,
/// constant afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: usize,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_end: 0.1,
            decay_steps: 2000,
        }
    }
}

impl EpsSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step >= self.decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon schedule needs 0 <= eps_end <= eps_start <= 1, got {} -> {}",
                self.eps_start, self.eps_end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync_every: usize,
    pub updates_per_episode: usize,
    pub episodes: usize,
    pub replay_capacity: usize,
    pub eps: EpsSchedule,
    pub opt: OptConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            batch_size: 32,
            target_sync_every: 100,
            updates_per_episode: 1,
            episodes: 2000,
            replay_capacity: 10_000,
            eps: EpsSchedule::default(),
            opt: OptConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 || self.target_sync_every == 0 || self.replay_capacity == 0 {
            return Err(Error::Config(
                "batch_size, target_sync_every and replay_capacity must be >= 1".into(),
            ));
        }
        self.eps.validate()?;
        self.opt.validate()?;
        Ok(())
    }
}

/// Epsilon-greedy over the unmasked actions. Greedy ties go to the lowest
/// index. With `eps == 0` the rng is not consumed.
pub fn select_action<R: Rng + ?Sized>(
    q: &[f64],
    mask: &[bool],
    eps: f64,
    rng: &mut R,
) -> Result<usize> {
    if q.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} q-values for {} mask entries",
            q.len(),
            mask.len()
        )));
    }
    if eps > 0.0 && rng.gen::<f64>() < eps {
        let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if legal.is_empty() {
            return Err(Error::AllMasked);
        }
        return Ok(legal[rng.gen_range(0..legal.len())]);
    }
    greedy(q, mask).ok_or(Error::AllMasked)
}

/// Highest-valued unmasked index, lowest index on ties.
pub fn greedy(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in q.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// Max over the unmasked entries; `None` if everything is masked.
pub fn masked_max(q: &[f64], mask: &[bool]) -> Option<f64> {
    greedy(q, mask).map(|i| q[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub transitions: Vec<Transition>,
    pub actions: Vec<usize>,
    pub outcome: Outcome,
    pub reward: f64,
    pub turns: usize,
}

/// Plays one dialog against the simulator with an epsilon-greedy policy over
/// `q`, recording every transition.
pub fn run_episode<Q, R>(
    q: Q,
    goal: &UserGoal,
    space: ActionSpace,
    sim_cfg: &SimConfig,
    sim_seed: u64,
    eps: f64,
    rng: &mut R,
) -> Result<EpisodeRun>
where
    Q: Fn(&StateVector) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let mut episode = Episode::reset(goal, space.n_symptoms, sim_seed)?;
    let mut state = episode.state().encode(sim_cfg.max_turns)?;
    let mut mask = space.mask(episode.state());
    let mut transitions = Vec::new();
    let mut actions = Vec::new();
    let mut total = 0.0;
    loop {
        let qs = q(&state)?;
        let a = select_action(&qs, &mask, eps, rng)?;
        let step = episode.step(space.action(a)?, sim_cfg)?;
        total += step.reward;
        actions.push(a);
        let next = match &step.next_state {
            Some(s) => Some(NextState {
                state: s.encode(sim_cfg.max_turns)?,
                mask: space.mask(s),
            }),
            None => None,
        };
        transitions.push(Transition {
            state: state.clone(),
            action: a,
            reward: step.reward,
            next: next.clone(),
        });
        match next {
            Some(n) => {
                state = n.state;
                mask = n.mask;
            }
            None => break,
        }
    }
    Ok(EpisodeRun {
        transitions,
        actions,
        outcome: episode.outcome(),
        reward: total,
        turns: episode.state().turn,
    })
}

/// Hooks the shared training loop drives.
pub trait Learner {
    /// Q-values used for acting in the current episode.
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>>;

    /// Called once before each training episode.
    fn begin_episode(&mut self, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// One SGD update on `batch`; returns the batch loss.
    fn update(&mut self, batch: &[&Transition], gamma: f64, rng: &mut ChaCha8Rng) -> Result<f64>;

    /// Copies online parameters into the frozen target.
    fn sync_target(&mut self) -> Result<()>;

    fn space(&self) -> ActionSpace;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub goal: String,
    pub epsilon: f64,
    pub reward: f64,
    pub turns: usize,
    pub outcome: Outcome,
    pub loss_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Success fraction over the last `n` episodes (or all, if fewer).
    pub fn recent_success(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|r| r.outcome == Outcome::Success).count() as f64 / tail.len() as f64
    }
}

/// Runs `cfg.episodes` epsilon-greedy episodes on goals drawn uniformly from
/// `goals`, replaying after each one. Fully determined by `cfg.seed`.
pub fn train_loop<L: Learner>(
    learner: &mut L,
    goals: &[&UserGoal],
    sim_cfg: &SimConfig,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    sim_cfg.validate()?;
    if goals.is_empty() {
        return Err(Error::NoTrainingGoals);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut log = TrainingLog::default();
    let mut updates = 0usize;
    let space = learner.space();
    for ep in 0..cfg.episodes {
        let goal = goals[rng.gen_range(0..goals.len())];
        let sim_seed: u64 = rng.gen();
        let eps = cfg.eps.at(ep);
        learner.begin_episode(&mut rng)?;
        let run = {
            let l = &*learner;
            run_episode(|s| l.q_values(s), goal, space, sim_cfg, sim_seed, eps, &mut rng)?
        };
        for t in run.transitions {
            replay.push(t);
        }
        let mut losses = Vec::with_capacity(cfg.updates_per_episode);
        for _ in 0..cfg.updates_per_episode {
            let batch = replay.sample(cfg.batch_size, &mut rng);
            losses.push(learner.update(&batch, cfg.gamma, &mut rng)?);
            updates += 1;
            if updates % cfg.target_sync_every == 0 {
                learner.sync_target()?;
            }
        }
        let loss_mean =
            (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        log.records.push(EpisodeRecord {
            episode: ep,
            goal: goal.id.clone(),
            epsilon: eps,
            reward: run.reward,
            turns: run.turns,
            outcome: run.outcome,
            loss_mean,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(action: usize) -> Transition {
        Transition {
            state: StateVector(vec![action as f64]),
            action,
            reward: 0.0,
            next: None,
        }
    }

    #[test]
    fn replay_is_fifo() {
        let mut buf = ReplayBuffer::new(5);
        for i in 0..8 {
            buf.push(t(i));
        }
        assert_eq!(buf.len(), 5);
        let kept: Vec<usize> = buf.iter().map(|t| t.action).collect();
        assert_eq!(kept, vec![3, 4, 5, 6, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample(3, &mut rng);
        assert_eq!(batch.len(), 3);
        assert_eq!(buf.sample(10, &mut rng).len(), 5);
    }

    #[test]
    fn greedy_selection_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [1.0, 5.0, 3.0];
        assert_eq!(select_action(&q, &[true; 3], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(
            select_action(&q, &[true, false, true], 0.0, &mut rng).unwrap(),
            2
        );
        assert_eq!(greedy(&[0.0, 0.0], &[true, true]), Some(0));
        assert!(matches!(
            select_action(&q, &[false; 3], 0.5, &mut rng),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn exploration_is_uniform_over_legal_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = [9.0, 0.0, 0.0, 0.0, 0.0];
        let mask = [true, true, false, true, true];
        let mut counts = [0usize; 5];
        let n = 30_000;
        for _ in 0..n {
            counts[select_action(&q, &mask, 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        for i in [0, 1, 3, 4] {
            let f = counts[i] as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsSchedule {
            eps_start: 1.0,
            eps_end: 0.1,
            decay_steps: 10,
        };
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(10), 0.1);
        assert_eq!(s.at(1000), 0.1);
        let values: Vec<f64> = (0..20).map(|i| s.at(i)).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        let instant = EpsSchedule {
            decay_steps: 0,
            ..s.clone()
        };
        assert_eq!(instant.at(0), 0.1);
        assert!(EpsSchedule {
            eps_start: 0.1,
            eps_end: 0.5,
            decay_steps: 1
        }
        .validate()
        .is_err());
    }
}
