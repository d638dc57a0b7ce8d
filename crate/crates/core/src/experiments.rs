//! Supervised and few-shot experiment protocols, greedy evaluation, metric
//! tables and agent checkpoints.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_by_diseases, goals_by_disease, Corpus, UserGoal};
use crate::dqn::{DqnAgent, DqnParams};
use crate::nn::ModelConfig;
use crate::proto::{ProtoAgent, ProtoConfig, ProtoParams, ProtoPolicy, SupportIndex};
use crate::rl::{run_episode, train_loop, EpsSchedule, TrainConfig, TrainingLog};
use crate::seeding::derive_seed;
use crate::simulator::{Outcome, SimConfig};
use crate::state::{state_dim, ActionSpace, StateVector};
use crate::{Error, Result};

/// Aggregate outcome of a batch of evaluation dialogs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub outcome_counts: BTreeMap<Outcome, usize>,
    pub episodes: usize,
}

impl Metrics {
    /// Builds metrics from per-episode `(outcome, reward, turns)`, summing in
    /// the given order.
    pub fn from_episodes<I>(episodes: I) -> Self
    where
        I: IntoIterator<Item = (Outcome, f64, usize)>,
    {
        let mut counts = BTreeMap::new();
        let (mut n, mut reward, mut turns) = (0usize, 0.0, 0usize);
        for (o, r, t) in episodes {
            *counts.entry(o).or_insert(0) += 1;
            n += 1;
            reward += r;
            turns += t;
        }
        let success = counts.get(&Outcome::Success).copied().unwrap_or(0);
        let denom = n.max(1) as f64;
        Self {
            success_rate: 100.0 * success as f64 / denom,
            mean_reward: reward / denom,
            mean_turns: turns as f64 / denom,
            outcome_counts: counts,
            episodes: n,
        }
    }

    pub fn successes(&self) -> usize {
        self.outcome_counts
            .get(&Outcome::Success)
            .copied()
            .unwrap_or(0)
    }
}

/// A frozen policy that can be rolled out greedily.
pub trait GreedyPolicy: Sync {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>>;
    fn space(&self) -> ActionSpace;
}

impl GreedyPolicy for DqnAgent {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        crate::dqn::q_values(&self.params, state)
    }

    fn space(&self) -> ActionSpace {
        crate::rl::Learner::space(self)
    }
}

/// DQN parameters with their action space.
#[derive(Debug, Clone)]
pub struct DqnPolicy {
    pub params: DqnParams,
    pub space: ActionSpace,
}

impl GreedyPolicy for DqnPolicy {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        crate::dqn::q_values(&self.params, state)
    }

    fn space(&self) -> ActionSpace {
        self.space
    }
}

/// One greedy dialog per goal. Each goal's simulator seed is derived from
/// `seed` and the goal id, and results are summed in goal-id order, so the
/// metrics do not depend on the order of `goals`.
pub fn evaluate_policy<P: GreedyPolicy + ?Sized>(
    policy: &P,
    goals: &[&UserGoal],
    sim_cfg: &SimConfig,
    seed: u64,
) -> Result<Metrics> {
    if goals.is_empty() {
        return Err(Error::NoEvalGoals);
    }
    sim_cfg.validate()?;
    let space = policy.space();
    let mut runs = goals
        .par_iter()
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let run = run_episode(
                |s| policy.q_values(s),
                g,
                space,
                sim_cfg,
                derive_seed(seed, &g.id),
                0.0,
                &mut rng,
            )?;
            Ok((g.id.as_str(), run.outcome, run.reward, run.turns))
        })
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| a.0.cmp(b.0));
    Ok(Metrics::from_episodes(
        runs.into_iter().map(|(_, o, r, t)| (o, r, t)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Dqn,
    Proto,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Dqn => "dqn",
            AgentKind::Proto => "proto",
        })
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dqn" => Ok(AgentKind::Dqn),
            "proto" => Ok(AgentKind::Proto),
            other => Err(format!("unknown agent {other:?} (expected dqn or proto)")),
        }
    }
}

/// Settings shared by every protocol.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub proto: ProtoConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        self.proto.validate()?;
        self.model
            .encoder_config(state_dim(1, self.sim.max_turns))
            .validate()?;
        Ok(())
    }
}

/// A trained agent of either kind.
#[derive(Debug, Clone)]
pub enum TrainedAgent {
    Dqn(DqnAgent),
    Proto(ProtoAgent),
}

impl TrainedAgent {
    /// Fresh, untrained agent over the train goals in `support_goals`.
    pub fn init<'a>(
        kind: AgentKind,
        space: ActionSpace,
        support_goals: impl IntoIterator<Item = &'a UserGoal>,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let input = state_dim(space.n_symptoms, cfg.sim.max_turns);
        Ok(match kind {
            AgentKind::Dqn => {
                let params = DqnParams::init(input, &cfg.model, space.len(), cfg.train.seed);
                TrainedAgent::Dqn(DqnAgent::new(params, space, &cfg.train)?)
            }
            AgentKind::Proto => {
                let index =
                    SupportIndex::build(support_goals, space, cfg.sim.max_turns, cfg.proto.order)?;
                let params = ProtoParams::init(input, &cfg.model, space.len(), cfg.train.seed);
                TrainedAgent::Proto(ProtoAgent::new(
                    params,
                    index,
                    space,
                    cfg.proto.clone(),
                    &cfg.train,
                )?)
            }
        })
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            TrainedAgent::Dqn(_) => AgentKind::Dqn,
            TrainedAgent::Proto(_) => AgentKind::Proto,
        }
    }

    pub fn train(
        &mut self,
        goals: &[&UserGoal],
        sim: &SimConfig,
        cfg: &TrainConfig,
    ) -> Result<TrainingLog> {
        match self {
            TrainedAgent::Dqn(a) => train_loop(a, goals, sim, cfg),
            TrainedAgent::Proto(a) => train_loop(a, goals, sim, cfg),
        }
    }

    pub fn evaluate(&self, goals: &[&UserGoal], sim: &SimConfig, seed: u64) -> Result<Metrics> {
        match self {
            TrainedAgent::Dqn(a) => evaluate_policy(a, goals, sim, seed),
            TrainedAgent::Proto(a) => evaluate_policy(&a.eval_policy()?, goals, sim, seed),
        }
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig, corpus: &Corpus) -> Checkpoint {
        let (space, agent) = match self {
            TrainedAgent::Dqn(a) => (
                crate::rl::Learner::space(a),
                AgentState::Dqn {
                    params: a.params.clone(),
                },
            ),
            TrainedAgent::Proto(a) => (
                crate::rl::Learner::space(a),
                AgentState::Proto {
                    params: a.params.clone(),
                    proto: a.cfg.clone(),
                    support_fingerprint: a.index().fingerprint().to_string(),
                },
            ),
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            max_turns: cfg.sim.max_turns,
            model: cfg.model.clone(),
            space,
            corpus_fingerprint: corpus.fingerprint(),
            agent,
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "protodiag-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "agent", rename_all = "lowercase")]
pub enum AgentState {
    Dqn {
        params: DqnParams,
    },
    Proto {
        params: ProtoParams,
        proto: ProtoConfig,
        /// Identifies the support index so evaluation rebuilds the same
        /// prototypes.
        support_fingerprint: String,
    },
}

/// Serialized trained agent. Encoder layers use the same layout as
/// [`crate::nn::EncoderCheckpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub max_turns: usize,
    pub model: ModelConfig,
    pub space: ActionSpace,
    pub corpus_fingerprint: String,
    #[serde(flatten)]
    pub agent: AgentState,
}

/// Greedy policy restored from a checkpoint.
pub enum RestoredPolicy {
    Dqn(DqnPolicy),
    Proto(ProtoPolicy),
}

impl RestoredPolicy {
    pub fn as_policy(&self) -> &dyn GreedyPolicy {
        match self {
            RestoredPolicy::Dqn(p) => p,
            RestoredPolicy::Proto(p) => p,
        }
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.check()?;
        Ok(ck)
    }

    pub fn kind(&self) -> AgentKind {
        match self.agent {
            AgentState::Dqn { .. } => AgentKind::Dqn,
            AgentState::Proto { .. } => AgentKind::Proto,
        }
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let bad = |e: Error| Error::Checkpoint(e.to_string());
        let expected = self
            .model
            .encoder_config(state_dim(self.space.n_symptoms, self.max_turns));
        let encoder = match &self.agent {
            AgentState::Dqn { params } => {
                params.validate().map_err(bad)?;
                if params.n_actions() != self.space.len() {
                    return Err(Error::Checkpoint("head size does not match action space".into()));
                }
                &params.encoder
            }
            AgentState::Proto { params, .. } => {
                params.validate().map_err(bad)?;
                if params.fallback.vectors.len() != self.space.len() {
                    return Err(Error::Checkpoint(
                        "fallback count does not match action space".into(),
                    ));
                }
                &params.encoder
            }
        };
        let shapes: Vec<(usize, usize)> = encoder.layers.iter().map(|l| (l.rows, l.cols)).collect();
        let want: Vec<(usize, usize)> = expected.widths().windows(2).map(|w| (w[1], w[0])).collect();
        if shapes != want {
            return Err(Error::Checkpoint(format!(
                "encoder shapes {shapes:?} do not match model config {want:?}"
            )));
        }
        Ok(())
    }

    /// Rebuilds the greedy policy. Prototypical agents need the corpus their
    /// support index came from.
    pub fn restore(&self, corpus: &Corpus) -> Result<RestoredPolicy> {
        let space = ActionSpace::from(&corpus.vocab);
        if space != self.space {
            return Err(Error::Checkpoint(format!(
                "corpus action space {space:?} differs from checkpoint {:?}",
                self.space
            )));
        }
        match &self.agent {
            AgentState::Dqn { params } => Ok(RestoredPolicy::Dqn(DqnPolicy {
                params: params.clone(),
                space,
            })),
            AgentState::Proto {
                params,
                proto,
                support_fingerprint,
            } => {
                let index = SupportIndex::from_corpus(corpus, self.max_turns, proto.order)?;
                if index.fingerprint() != support_fingerprint {
                    return Err(Error::Checkpoint(
                        "corpus does not reproduce the checkpoint's support index".into(),
                    ));
                }
                Ok(RestoredPolicy::Proto(ProtoPolicy::new(params, &index, space)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupervisedRun {
    pub metrics: Metrics,
    pub log: TrainingLog,
    pub checkpoint: Checkpoint,
}

/// Trains on every train goal and evaluates greedily on every test goal.
pub fn run_supervised(
    kind: AgentKind,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<SupervisedRun> {
    cfg.validate()?;
    let space = ActionSpace::from(&corpus.vocab);
    let train: Vec<&UserGoal> = corpus.train_goals().collect();
    let test: Vec<&UserGoal> = corpus.test_goals().collect();
    if train.is_empty() {
        return Err(Error::NoTrainingGoals);
    }
    let mut agent = TrainedAgent::init(kind, space, train.iter().copied(), cfg)?;
    let log = agent.train(&train, &cfg.sim, &cfg.train)?;
    let metrics = agent.evaluate(&test, &cfg.sim, derive_seed(cfg.train.seed, "eval"))?;
    Ok(SupervisedRun {
        metrics,
        log,
        checkpoint: agent.checkpoint(cfg, corpus),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotSpec {
    pub held_out: usize,
    pub shots_n: usize,
    pub pretrain_episodes: usize,
    pub adapt_episodes: usize,
    pub noise: f64,
    /// Exploration during fine-tuning; the pretraining schedule comes from
    /// the train config.
    pub adapt_eps: EpsSchedule,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            held_out: 0,
            shots_n: 5,
            pretrain_episodes: 2000,
            adapt_episodes: 500,
            noise: 0.0,
            adapt_eps: EpsSchedule {
                eps_start: 0.5,
                eps_end: 0.1,
                decay_steps: 250,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotRun {
    pub metrics: Metrics,
    pub pool: Vec<String>,
    pub pretrain_log: TrainingLog,
    pub adapt_log: TrainingLog,
}

/// Adaptation pool: `shots_n` train goals per disease, sampled with `seed`.
pub fn adaptation_pool<'a>(
    corpus: &'a Corpus,
    shots_n: usize,
    seed: u64,
) -> Result<Vec<&'a UserGoal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_disease = goals_by_disease(corpus.train_goals());
    let mut pool = Vec::new();
    for d in 0..corpus.vocab.n_diseases() {
        let goals = by_disease.get(&d).map(Vec::as_slice).unwrap_or(&[]);
        if goals.len() < shots_n {
            return Err(Error::FewShot(format!(
                "disease {d} ({}) has {} train goals, need {shots_n}",
                corpus.vocab.diseases()[d],
                goals.len()
            )));
        }
        pool.extend(goals.choose_multiple(&mut rng, shots_n).copied());
    }
    Ok(pool)
}

/// Pretrains without the held-out disease, fine-tunes on a small pool with
/// `shots_n` cases of every disease, then evaluates on the full test split.
/// The same noise level applies to all three phases.
pub fn run_fewshot(
    kind: AgentKind,
    corpus: &Corpus,
    spec: &FewShotSpec,
    cfg: &ExperimentConfig,
) -> Result<FewShotRun> {
    run_fewshot_seeded(kind, corpus, spec, cfg, cfg.train.seed)
}

fn run_fewshot_seeded(
    kind: AgentKind,
    corpus: &Corpus,
    spec: &FewShotSpec,
    cfg: &ExperimentConfig,
    pool_seed: u64,
) -> Result<FewShotRun> {
    let n_diseases = corpus.vocab.n_diseases();
    if n_diseases < 2 {
        return Err(Error::FewShot("need at least two diseases".into()));
    }
    if spec.held_out >= n_diseases {
        return Err(Error::FewShot(format!("held-out disease {} out of range", spec.held_out)));
    }
    if spec.shots_n == 0 {
        return Err(Error::FewShot("shots_n must be >= 1".into()));
    }
    spec.adapt_eps.validate()?;
    let mut cfg = cfg.clone();
    cfg.sim.noise = spec.noise;
    cfg.validate()?;

    let space = ActionSpace::from(&corpus.vocab);
    let pool = adaptation_pool(corpus, spec.shots_n, derive_seed(pool_seed, "pool"))?;
    let keep: BTreeSet<usize> = (0..n_diseases).filter(|&d| d != spec.held_out).collect();
    let pre = filter_by_diseases(corpus, &keep)?;
    let pre_goals: Vec<&UserGoal> = pre.train_goals().collect();

    let pre_cfg = TrainConfig {
        episodes: spec.pretrain_episodes,
        seed: derive_seed(cfg.train.seed, "pretrain"),
        ..cfg.train.clone()
    };
    let mut agent = TrainedAgent::init(kind, space, pre_goals.iter().copied(), &cfg)?;
    let pretrain_log = agent.train(&pre_goals, &cfg.sim, &pre_cfg)?;

    let adapt_cfg = TrainConfig {
        episodes: spec.adapt_episodes,
        seed: derive_seed(cfg.train.seed, "adapt"),
        eps: spec.adapt_eps.clone(),
        ..cfg.train.clone()
    };
    match &mut agent {
        TrainedAgent::Dqn(a) => a.reset_optimizer(&adapt_cfg),
        TrainedAgent::Proto(a) => {
            let mut support: Vec<&UserGoal> = pre_goals.clone();
            let seen: HashSet<&str> = support.iter().map(|g| g.id.as_str()).collect();
            support.extend(pool.iter().copied().filter(|g| !seen.contains(g.id.as_str())));
            let index = SupportIndex::build(support, space, cfg.sim.max_turns, cfg.proto.order)?;
            a.reset_for_adaptation(index, &adapt_cfg)?;
        }
    }
    let adapt_log = agent.train(&pool, &cfg.sim, &adapt_cfg)?;

    let test: Vec<&UserGoal> = corpus.test_goals().collect();
    let metrics = agent.evaluate(&test, &cfg.sim, derive_seed(cfg.train.seed, "eval"))?;
    Ok(FewShotRun {
        metrics,
        pool: pool.iter().map(|g| g.id.clone()).collect(),
        pretrain_log,
        adapt_log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Supervised,
    Fewshot,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Supervised => "supervised",
            Protocol::Fewshot => "fewshot",
        })
    }
}

/// Row key fold: a held-out disease index, the whole corpus, or the average
/// over folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fold {
    Disease(usize),
    All,
    Avg,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fold::Disease(d) => write!(f, "{d}"),
            Fold::All => f.write_str("all"),
            Fold::Avg => f.write_str("avg"),
        }
    }
}

impl FromStr for Fold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Fold::All),
            "avg" => Ok(Fold::Avg),
            n => n
                .parse()
                .map(Fold::Disease)
                .map_err(|_| format!("bad fold {n:?}")),
        }
    }
}

impl Serialize for Fold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub agent: AgentKind,
    pub protocol: Protocol,
    pub noise: f64,
    pub fold: Fold,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_turns: f64,
}

impl ResultRow {
    pub fn new(agent: AgentKind, protocol: Protocol, noise: f64, fold: Fold, m: &Metrics) -> Self {
        Self {
            agent,
            protocol,
            noise,
            fold,
            episodes: m.episodes,
            success_rate: m.success_rate,
            mean_reward: m.mean_reward,
            mean_turns: m.mean_turns,
        }
    }

    fn sort_key(&self) -> (AgentKind, Protocol, u64, Fold) {
        (self.agent, self.protocol, self.noise.to_bits(), self.fold)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Fold-mean row per (agent, protocol, noise) over the disease folds.
    /// Episodes are summed; rates, rewards and turns are averaged.
    pub fn aggregates(&self) -> Vec<ResultRow> {
        let mut groups: BTreeMap<(AgentKind, Protocol, u64), Vec<&ResultRow>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| matches!(r.fold, Fold::Disease(_))) {
            groups
                .entry((r.agent, r.protocol, r.noise.to_bits()))
                .or_default()
                .push(r);
        }
        groups
            .into_values()
            .map(|rows| {
                let n = rows.len() as f64;
                let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                ResultRow {
                    agent: rows[0].agent,
                    protocol: rows[0].protocol,
                    noise: rows[0].noise,
                    fold: Fold::Avg,
                    episodes: rows.iter().map(|r| r.episodes).sum(),
                    success_rate: mean(|r| r.success_rate),
                    mean_reward: mean(|r| r.mean_reward),
                    mean_turns: mean(|r| r.mean_turns),
                }
            })
            .collect()
    }

    /// Replaces any aggregate rows with freshly computed ones and sorts.
    pub fn with_aggregates(mut self) -> Self {
        self.rows.retain(|r| r.fold != Fold::Avg);
        let agg = self.aggregates();
        self.rows.extend(agg);
        self.sort();
        self
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.sort_key()
                .0
                .cmp(&b.sort_key().0)
                .then(a.protocol.cmp(&b.protocol))
                .then(a.noise.total_cmp(&b.noise))
                .then(a.fold.cmp(&b.fold))
        });
    }

    pub fn extend(&mut self, other: ResultsTable) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, agent: AgentKind, noise: f64, fold: Fold) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.agent == agent && r.noise == noise && r.fold == fold)
    }
}

pub const RESULTS_HEADER: &str =
    "agent,protocol,noise,fold,episodes,success_rate,mean_reward,mean_turns";

/// Writes the table as CSV in its current row order.
pub fn write_results<W: Write>(table: &ResultsTable, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RESULTS_HEADER.split(','))
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    for row in &table.rows {
        w.serialize(row)
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(())
}

pub fn read_results<R: Read>(input: R) -> Result<ResultsTable> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(ResultsTable { rows })
}

pub fn results_to_string(table: &ResultsTable) -> String {
    let mut buf = Vec::new();
    write_results(table, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Cross product of held-out folds and noise levels for one agent, plus the
/// per-noise fold averages. Cells are independent and may run on `jobs`
/// threads; results do not depend on the thread count. The adaptation pool
/// of a fold depends only on the base seed and the fold, so every agent and
/// noise level sees the same few shots.
pub fn run_fewshot_all_folds(
    kind: AgentKind,
    corpus: &Corpus,
    base: &FewShotSpec,
    noise_levels: &[f64],
    cfg: &ExperimentConfig,
) -> Result<ResultsTable> {
    let folds: Vec<usize> = (0..corpus.vocab.n_diseases()).collect();
    let cells: Vec<(usize, f64)> = folds
        .iter()
        .flat_map(|&d| noise_levels.iter().map(move |&n| (d, n)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(d, noise)| {
            let spec = FewShotSpec {
                held_out: d,
                noise,
                ..base.clone()
            };
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.seed = derive_seed(cfg.train.seed, &format!("fold{d}/noise{noise}"));
            let pool_seed = derive_seed(cfg.train.seed, &format!("fold{d}"));
            let run = run_fewshot_seeded(kind, corpus, &spec, &cell_cfg, pool_seed)?;
            Ok(ResultRow::new(
                kind,
                Protocol::Fewshot,
                noise,
                Fold::Disease(d),
                &run.metrics,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultsTable { rows }.with_aggregates())
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub command: String,
    pub agent: Option<AgentKind>,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<FewShotSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_levels: Option<Vec<f64>>,
}

impl RunMetadata {
    pub fn new(command: &str, agent: Option<AgentKind>, corpus: &Corpus, config: &ExperimentConfig) -> Self {
        Self {
            version: concat!("protodiag ", env!("CARGO_PKG_VERSION")).to_string(),
            command: command.into(),
            agent,
            seed: config.train.seed,
            corpus_fingerprint: corpus.fingerprint(),
            config: config.clone(),
            fewshot: None,
            noise_levels: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_identities() {
        let m = Metrics::from_episodes(
            (0..142).map(|i| {
                if i < 100 {
                    (Outcome::Success, 20.0, 3)
                } else {
                    (Outcome::WrongDiagnosis, 0.0, 5)
                }
            }),
        );
        assert!((m.success_rate - 70.42).abs() < 0.005);
        assert_eq!(m.successes(), 100);
        assert!((m.mean_reward - 20.0 * 100.0 / 142.0).abs() < 1e-12);
        assert_eq!(m.outcome_counts.values().sum::<usize>(), 142);

        let none = Metrics::from_episodes((0..7).map(|_| (Outcome::TurnLimit, 0.0, 44)));
        assert_eq!(none.success_rate, 0.0);
        assert_eq!(none.mean_reward, 0.0);

        let all = Metrics::from_episodes((0..7).map(|_| (Outcome::Success, 20.0, 1)));
        assert_eq!(all.mean_reward, 20.0);
    }

    fn row(agent: AgentKind, noise: f64, fold: Fold, rate: f64) -> ResultRow {
        ResultRow {
            agent,
            protocol: Protocol::Fewshot,
            noise,
            fold,
            episodes: 40,
            success_rate: rate,
            mean_reward: rate / 5.0,
            mean_turns: 2.5,
        }
    }

    #[test]
    fn csv_shapes_and_roundtrip() {
        let empty = results_to_string(&ResultsTable::default());
        assert_eq!(empty, format!("{RESULTS_HEADER}\n"));

        let one = ResultsTable {
            rows: vec![row(AgentKind::Dqn, 0.1, Fold::Disease(2), 62.5)],
        };
        let text = results_to_string(&one);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap(), "dqn,fewshot,0.1,2,40,62.5,12.5,2.5");

        let mut t = ResultsTable::default();
        for agent in [AgentKind::Proto, AgentKind::Dqn] {
            for noise in [0.3, 0.0, 0.1] {
                for d in 0..4 {
                    t.rows.push(row(agent, noise, Fold::Disease(d), 50.0 + d as f64 / 3.0));
                }
            }
        }
        let t = t.with_aggregates();
        assert_eq!(t.rows.len(), 2 * 3 * 5);
        let back = read_results(results_to_string(&t).as_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn aggregates_are_fold_means() {
        let t = ResultsTable {
            rows: vec![
                row(AgentKind::Proto, 0.0, Fold::Disease(0), 60.0),
                row(AgentKind::Proto, 0.0, Fold::Disease(1), 70.0),
                row(AgentKind::Proto, 0.0, Fold::Disease(2), 80.0),
            ],
        }
        .with_aggregates();
        let avg = t.get(AgentKind::Proto, 0.0, Fold::Avg).unwrap();
        assert_eq!(avg.success_rate, 70.0);
        assert_eq!(avg.episodes, 120);
        assert_eq!(t.rows.last().unwrap().fold, Fold::Avg);
    }

    fn tiny() -> (Corpus, ExperimentConfig) {
        let corpus = crate::corpus::generate_synthetic(&crate::corpus::SynthSpec {
            goals_per_disease_train: 6,
            goals_per_disease_test: 2,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            hidden_dims: vec![8],
            embed_dim: 4,
        };
        cfg.train.episodes = 10;
        cfg.train.batch_size = 4;
        (corpus, cfg)
    }

    #[test]
    fn checkpoints_roundtrip_and_restore_the_same_policy() {
        let (corpus, cfg) = tiny();
        for kind in [AgentKind::Dqn, AgentKind::Proto] {
            let run = run_supervised(kind, &corpus, &cfg).unwrap();
            let ck = Checkpoint::from_json(&run.checkpoint.to_json()).unwrap();
            assert_eq!(ck, run.checkpoint);
            assert_eq!(ck.kind(), kind);
            let restored = ck.restore(&corpus).unwrap();
            let test: Vec<&UserGoal> = corpus.test_goals().collect();
            let m = evaluate_policy(restored.as_policy(), &test, &cfg.sim, derive_seed(cfg.train.seed, "eval"))
                .unwrap();
            assert_eq!(m, run.metrics);

            let mut v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
            v["params"]["encoder"]["layers"][0]["bias"]
                .as_array_mut()
                .unwrap()
                .pop();
            let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
            let mut wrong = ck.clone();
            wrong.model.embed_dim = 5;
            assert!(Checkpoint::from_json(&wrong.to_json()).is_err());
        }
    }

    #[test]
    fn proto_restore_needs_the_training_corpus() {
        let (corpus, cfg) = tiny();
        let run = run_supervised(AgentKind::Proto, &corpus, &cfg).unwrap();
        let mut other = corpus.clone();
        other.goals.remove(0);
        assert!(run.checkpoint.restore(&other).is_err());
    }

    #[test]
    fn evaluation_ignores_goal_order() {
        let (corpus, cfg) = tiny();
        let run = run_supervised(AgentKind::Dqn, &corpus, &cfg).unwrap();
        let policy = run.checkpoint.restore(&corpus).unwrap();
        let sim = SimConfig::with_noise(0.2);
        let mut goals: Vec<&UserGoal> = corpus.goals.iter().collect();
        let a = evaluate_policy(policy.as_policy(), &goals, &sim, 9).unwrap();
        goals.reverse();
        goals.rotate_left(5);
        let b = evaluate_policy(policy.as_policy(), &goals, &sim, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outcome_counts.values().sum::<usize>(), goals.len());
        assert!(evaluate_policy(policy.as_policy(), &[], &sim, 9).is_err());
    }

    #[test]
    fn fewshot_pool_and_errors() {
        let (corpus, cfg) = tiny();
        let pool = adaptation_pool(&corpus, 5, 1).unwrap();
        assert_eq!(pool.len(), 20);
        assert!(pool.iter().all(|g| g.split == crate::corpus::Split::Train));
        assert_eq!(adaptation_pool(&corpus, 5, 1).unwrap(), pool);

        let spec = FewShotSpec {
            held_out: 2,
            pretrain_episodes: 5,
            adapt_episodes: 5,
            ..FewShotSpec::default()
        };
        let run = run_fewshot(AgentKind::Proto, &corpus, &spec, &cfg).unwrap();
        assert_eq!(run.pool.len(), 20);
        let pre_ids: HashSet<&str> = run.pretrain_log.records.iter().map(|r| r.goal.as_str()).collect();
        let held: HashSet<&str> = corpus
            .goals
            .iter()
            .filter(|g| g.disease == 2)
            .map(|g| g.id.as_str())
            .collect();
        assert!(pre_ids.is_disjoint(&held));
        assert!(run.adapt_log.records.iter().all(|r| run.pool.contains(&r.goal)));
        assert_eq!(run.metrics.episodes, 8);

        let mut starved = corpus.clone();
        starved.goals.retain(|g| !(g.disease == 2 && g.split == crate::corpus::Split::Train));
        assert!(matches!(
            run_fewshot(AgentKind::Dqn, &starved, &spec, &cfg),
            Err(Error::FewShot(_))
        ));
    }

    #[test]
    fn fold_parsing() {
        for f in [Fold::Disease(3), Fold::All, Fold::Avg] {
            assert_eq!(f.to_string().parse::<Fold>().unwrap(), f);
        }
        assert!("x".parse::<Fold>().is_err());
        assert_eq!("proto".parse::<AgentKind>().unwrap(), AgentKind::Proto);
    }
}
