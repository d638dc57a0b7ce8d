//! Prototypical Q network.
//!
//! Every policy action gets a prototype: the mean encoder embedding of the
//! corpus dialog states that the action followed. The Q-value of an action is
//! the dot product between the current state embedding and its prototype.
//! Corpus goals carry findings rather than transcripts, so doctor trajectories
//! are rebuilt from each goal: self-report, one inquiry per implicit finding,
//! then the diagnosis.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Finding, Split, UserGoal};
use crate::experiments::{evaluate_policy, GreedyPolicy, Metrics};
use crate::nn::{dot, init_params, EncoderParams, ForwardCache, ModelConfig, Parameters, Sgd};
use crate::rl::{
    masked_max, run_episode, train_loop, EpisodeRun, Learner, TrainConfig, TrainingLog, Transition,
};
use crate::seeding::derive_seed;
use crate::simulator::SimConfig;
use crate::state::{initial_state, state_dim, ActionSpace, AgentAction, StateVector, UserActionKind};
use crate::{Error, Result};

/// Order in which a goal's implicit findings are asked about when its
/// trajectory is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryOrder {
    #[default]
    Annotation,
    /// Per-goal shuffle seeded from this value and the goal id.
    Shuffled(u64),
}

/// Encoded corpus states grouped by the action taken in them.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportIndex {
    lists: Vec<Vec<StateVector>>,
    truncated: Vec<String>,
    fingerprint: String,
}

impl SupportIndex {
    /// Rebuilds the trajectory of every train-split goal in `goals`.
    /// Goals with more implicit findings than fit before the turn cap are
    /// cut short (the diagnosis stays the last action) and listed in
    /// [`SupportIndex::truncated`].
    pub fn build<'a, I>(
        goals: I,
        space: ActionSpace,
        max_turns: usize,
        order: TrajectoryOrder,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a UserGoal>,
    {
        let mut lists = vec![Vec::new(); space.len()];
        let mut truncated = Vec::new();
        let mut hasher = Sha256::new();
        hasher.update(format!("{max_turns}|{order:?}|{}|{}\n", space.n_symptoms, space.n_diseases));
        let mut any = false;
        for goal in goals.into_iter().filter(|g| g.split == Split::Train) {
            any = true;
            hasher.update(format!(
                "{}|{}|{:?}|{:?}\n",
                goal.id, goal.disease, goal.explicit, goal.implicit
            ));
            let mut inquiries: Vec<(usize, Finding)> =
                goal.implicit.iter().map(|(&k, &f)| (k, f)).collect();
            if let TrajectoryOrder::Shuffled(seed) = order {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &goal.id));
                inquiries.shuffle(&mut rng);
            }
            let cap = max_turns.saturating_sub(1);
            if inquiries.len() > cap {
                inquiries.truncate(cap);
                truncated.push(goal.id.clone());
            }
            let mut state =
                initial_state(goal.explicit.iter().map(|(&k, &f)| (k, f)), space.n_symptoms)?;
            for (k, finding) in inquiries {
                let action = AgentAction::RequestSymptom(k);
                lists[space.index(action)?].push(state.encode(max_turns)?);
                let reply = match finding {
                    Finding::Present => UserActionKind::Confirm,
                    Finding::Absent => UserActionKind::Deny,
                };
                state = state.apply_turn(action, reply)?;
            }
            let inform = space.index(AgentAction::InformDisease(goal.disease))?;
            lists[inform].push(state.encode(max_turns)?);
        }
        if !any {
            return Err(Error::NoTrainingGoals);
        }
        Ok(Self {
            lists,
            truncated,
            fingerprint: hex::encode(hasher.finalize()),
        })
    }

    pub fn from_corpus(corpus: &Corpus, max_turns: usize, order: TrajectoryOrder) -> Result<Self> {
        Self::build(
            &corpus.goals,
            ActionSpace::from(&corpus.vocab),
            max_turns,
            order,
        )
    }

    pub fn list(&self, action: usize) -> &[StateVector] {
        &self.lists[action]
    }

    pub fn n_actions(&self) -> usize {
        self.lists.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn max_support(&self) -> usize {
        self.lists.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn truncated(&self) -> &[String] {
        &self.truncated
    }

    /// Hash of the goals, order, and encoding settings the index was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Learnable stand-in prototypes for actions with an empty support list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackEmbeddings {
    pub vectors: Vec<Vec<f64>>,
}

impl FallbackEmbeddings {
    pub fn init(n_actions: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (3.0 / dim as f64).sqrt() * 0.1;
        Self {
            vectors: (0..n_actions)
                .map(|_| (0..dim).map(|_| rng.gen_range(-limit..=limit)).collect())
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }
}

impl Parameters for FallbackEmbeddings {
    fn tensors(&self) -> Vec<&[f64]> {
        self.vectors.iter().map(Vec::as_slice).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.vectors.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

/// Everything SGD touches in a prototypical Q network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoParams {
    pub encoder: EncoderParams,
    pub fallback: FallbackEmbeddings,
}

impl ProtoParams {
    pub fn init(input_dim: usize, model: &ModelConfig, n_actions: usize, seed: u64) -> Self {
        Self {
            encoder: init_params(&model.encoder_config(input_dim), derive_seed(seed, "encoder")),
            fallback: FallbackEmbeddings::init(
                n_actions,
                model.embed_dim,
                derive_seed(seed, "fallback"),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            fallback: self.fallback.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.encoder.output_dim();
        if self.fallback.vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape(format!("fallback embeddings must have dim {d}")));
        }
        Ok(())
    }
}

impl Parameters for ProtoParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.fallback.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.fallback.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Pooled,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub protos: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
}

impl PrototypeTable {
    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Every prototype multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            protos: self
                .protos
                .iter()
                .map(|p| p.iter().map(|v| v * c).collect())
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

pub enum EmbedMode<'a, R: Rng + ?Sized> {
    /// Mean over at most `support_k` states sampled without replacement.
    Train { rng: &'a mut R, support_k: usize },
    /// Mean over the whole support list.
    Eval,
}

/// Which support states feed each prototype: `None` means the fallback
/// embedding, otherwise indices into the action's support list.
pub type SupportSample = BTreeMap<usize, Option<Vec<usize>>>;

/// Sampled support rows for one action. When the list fits in `support_k`
/// it is used whole and in order, so the mean is bit-identical to Eval mode.
fn sample_rows<R: Rng + ?Sized>(len: usize, support_k: usize, rng: &mut R) -> Option<Vec<usize>> {
    if len == 0 {
        None
    } else if len <= support_k {
        Some((0..len).collect())
    } else {
        let mut rows = sample(rng, len, support_k).into_vec();
        rows.sort_unstable();
        Some(rows)
    }
}

/// Draws Train-mode support rows for `actions`.
pub fn draw_support_sample<R: Rng + ?Sized>(
    index: &SupportIndex,
    actions: impl IntoIterator<Item = usize>,
    support_k: usize,
    rng: &mut R,
) -> SupportSample {
    actions
        .into_iter()
        .map(|a| (a, sample_rows(index.list(a).len(), support_k, rng)))
        .collect()
}

thread_local! {
    static EMBED_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`proto_embed`] calls made on this thread so far.
pub fn proto_embed_calls() -> usize {
    EMBED_CALLS.with(Cell::get)
}

fn mean_embedding(
    encoder: &EncoderParams,
    list: &[StateVector],
    rows: &[usize],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; encoder.output_dim()];
    for &r in rows {
        let e = encoder.embed(list[r].as_slice())?;
        for (a, v) in acc.iter_mut().zip(&e) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Prototype for every action of the index.
pub fn proto_embed<R: Rng + ?Sized>(
    encoder: &EncoderParams,
    index: &SupportIndex,
    fallback: &FallbackEmbeddings,
    mode: EmbedMode<'_, R>,
) -> Result<PrototypeTable> {
    EMBED_CALLS.with(|c| c.set(c.get() + 1));
    if fallback.vectors.len() != index.n_actions() {
        return Err(Error::Shape(format!(
            "{} fallback embeddings for {} actions",
            fallback.vectors.len(),
            index.n_actions()
        )));
    }
    let rows: Vec<Option<Vec<usize>>> = match mode {
        EmbedMode::Eval => index
            .lists
            .iter()
            .map(|l| (!l.is_empty()).then(|| (0..l.len()).collect()))
            .collect(),
        EmbedMode::Train { rng, support_k } => index
            .lists
            .iter()
            .map(|l| sample_rows(l.len(), support_k, rng))
            .collect(),
    };
    let mut protos = Vec::with_capacity(rows.len());
    let mut provenance = Vec::with_capacity(rows.len());
    for (a, r) in rows.iter().enumerate() {
        match r {
            Some(r) => {
                protos.push(mean_embedding(encoder, &index.lists[a], r)?);
                provenance.push(Provenance::Pooled);
            }
            None => {
                protos.push(fallback.vectors[a].clone());
                provenance.push(Provenance::Fallback);
            }
        }
    }
    Ok(PrototypeTable { protos, provenance })
}

/// `q[m] = e . P_m`.
pub fn proto_q(e: &[f64], table: &PrototypeTable) -> Result<Vec<f64>> {
    table
        .protos
        .iter()
        .map(|p| {
            if p.len() != e.len() {
                Err(Error::Shape(format!(
                    "embedding dim {} vs prototype dim {}",
                    e.len(),
                    p.len()
                )))
            } else {
                Ok(dot(e, p))
            }
        })
        .collect()
}

/// Bootstrapped targets from the frozen encoder and its cached Eval table.
pub fn td_targets(
    batch: &[&Transition],
    target_encoder: &EncoderParams,
    target_table: &PrototypeTable,
    gamma: f64,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| match &t.next {
            None => Ok(t.reward),
            Some(next) => {
                let e = target_encoder.embed(next.state.as_slice())?;
                let q = proto_q(&e, target_table)?;
                Ok(t.reward + gamma * masked_max(&q, &next.mask).unwrap_or(0.0))
            }
        })
        .collect()
}

/// Mean squared error between `q(s, a) = f(s) . P_a` and fixed `targets`,
/// with prototypes pooled from `support` under the online encoder, and its
/// gradient. With `support_grad` the gradient also flows into the pooled
/// support embeddings.
pub fn proto_td_loss(
    params: &ProtoParams,
    index: &SupportIndex,
    support: &SupportSample,
    batch: &[&Transition],
    targets: &[f64],
    support_grad: bool,
) -> Result<(f64, ProtoParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let enc = &params.encoder;
    let d = enc.output_dim();
    struct Pooled {
        proto: Vec<f64>,
        caches: Vec<ForwardCache>,
    }
    let mut pooled: BTreeMap<usize, Pooled> = BTreeMap::new();
    for (&a, rows) in support {
        let proto_and_caches = match rows {
            None => Pooled {
                proto: params.fallback.vectors[a].clone(),
                caches: Vec::new(),
            },
            Some(rows) => {
                let mut proto = vec![0.0; d];
                let mut caches = Vec::with_capacity(rows.len());
                for &r in rows {
                    let (e, cache) = enc.forward(index.list(a)[r].as_slice())?;
                    for (p, v) in proto.iter_mut().zip(&e) {
                        *p += v;
                    }
                    caches.push(cache);
                }
                let n = rows.len() as f64;
                proto.iter_mut().for_each(|p| *p /= n);
                Pooled { proto, caches }
            }
        };
        pooled.insert(a, proto_and_caches);
    }

    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut proto_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        let p = pooled
            .get(&t.action)
            .ok_or_else(|| Error::Shape(format!("no prototype drawn for action {}", t.action)))?;
        let (e, cache) = enc.forward(t.state.as_slice())?;
        let delta = dot(&e, &p.proto) - y;
        loss += delta * delta * scale;
        let g = 2.0 * delta * scale;
        let ge: Vec<f64> = p.proto.iter().map(|v| g * v).collect();
        enc.backward_into(&cache, &ge, &mut grads.encoder)?;
        let gp = proto_grads.entry(t.action).or_insert_with(|| vec![0.0; d]);
        for (acc, v) in gp.iter_mut().zip(&e) {
            *acc += g * v;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    for (a, gp) in proto_grads {
        match &support[&a] {
            None => {
                for (acc, v) in grads.fallback.vectors[a].iter_mut().zip(&gp) {
                    *acc += v;
                }
            }
            Some(rows) if support_grad => {
                let share: Vec<f64> = gp.iter().map(|v| v / rows.len() as f64).collect();
                for cache in &pooled[&a].caches {
                    enc.backward_into(cache, &share, &mut grads.encoder)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    /// Support states sampled per action when pooling training prototypes.
    pub support_k: usize,
    /// Let gradients flow through the pooled support embeddings.
    pub support_grad: bool,
    pub order: TrajectoryOrder,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            support_k: 10,
            support_grad: true,
            order: TrajectoryOrder::Annotation,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_k == 0 {
            return Err(Error::Config("support_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training step: fresh Train-mode prototypes for the batch's actions
/// from the online encoder, targets from the frozen pair, then SGD.
#[allow(clippy::too_many_arguments)]
pub fn proto_update<R: Rng + ?Sized>(
    params: &mut ProtoParams,
    sgd: &mut Sgd,
    index: &SupportIndex,
    batch: &[&Transition],
    target_encoder: &EncoderParams,
    target_table: &PrototypeTable,
    gamma: f64,
    cfg: &ProtoConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    actions.sort_unstable();
    actions.dedup();
    let support = draw_support_sample(index, actions, cfg.support_k, rng);
    let targets = td_targets(batch, target_encoder, target_table, gamma)?;
    let (loss, grads) = proto_td_loss(params, index, &support, batch, &targets, cfg.support_grad)?;
    sgd.step(params, &grads)?;
    Ok(loss)
}

/// Plays one dialog choosing actions by `argmax_a f(s) . P_a` (epsilon-greedy).
#[allow(clippy::too_many_arguments)]
pub fn run_proto_dialog<R: Rng + ?Sized>(
    encoder: &EncoderParams,
    table: &PrototypeTable,
    goal: &UserGoal,
    space: ActionSpace,
    sim_cfg: &SimConfig,
    sim_seed: u64,
    eps: f64,
    rng: &mut R,
) -> Result<EpisodeRun> {
    run_episode(
        |s| proto_q(&encoder.embed(s.as_slice())?, table),
        goal,
        space,
        sim_cfg,
        sim_seed,
        eps,
        rng,
    )
}

/// Online prototypical Q network with its frozen target.
#[derive(Debug, Clone)]
pub struct ProtoAgent {
    pub params: ProtoParams,
    pub cfg: ProtoConfig,
    index: SupportIndex,
    acting: PrototypeTable,
    target_encoder: EncoderParams,
    target_table: PrototypeTable,
    sgd: Sgd,
    space: ActionSpace,
}

impl ProtoAgent {
    pub fn new(
        params: ProtoParams,
        index: SupportIndex,
        space: ActionSpace,
        cfg: ProtoConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if index.n_actions() != space.len() || params.fallback.vectors.len() != space.len() {
            return Err(Error::Shape("support index / fallback do not match action space".into()));
        }
        let target_table = proto_embed::<ChaCha8Rng>(
            &params.encoder,
            &index,
            &params.fallback,
            EmbedMode::Eval,
        )?;
        Ok(Self {
            target_encoder: params.encoder.clone(),
            acting: target_table.clone(),
            target_table,
            params,
            cfg,
            index,
            sgd: Sgd::new(train_cfg.opt.clone()),
            space,
        })
    }

    pub fn index(&self) -> &SupportIndex {
        &self.index
    }

    /// Swaps the support index (e.g. adding few-shot cases), resets the
    /// optimizer and resyncs the target.
    pub fn reset_for_adaptation(&mut self, index: SupportIndex, train_cfg: &TrainConfig) -> Result<()> {
        if index.n_actions() != self.space.len() {
            return Err(Error::Shape("support index does not match action space".into()));
        }
        self.index = index;
        self.sgd = Sgd::new(train_cfg.opt.clone());
        self.sync_target()
    }

    /// Greedy evaluation policy over a single Eval-mode table.
    pub fn eval_policy(&self) -> Result<ProtoPolicy> {
        ProtoPolicy::new(&self.params, &self.index, self.space)
    }
}

impl Learner for ProtoAgent {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        proto_q(&self.params.encoder.embed(state.as_slice())?, &self.acting)
    }

    fn begin_episode(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        self.acting = proto_embed(
            &self.params.encoder,
            &self.index,
            &self.params.fallback,
            EmbedMode::Train {
                rng,
                support_k: self.cfg.support_k,
            },
        )?;
        Ok(())
    }

    fn update(&mut self, batch: &[&Transition], gamma: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        proto_update(
            &mut self.params,
            &mut self.sgd,
            &self.index,
            batch,
            &self.target_encoder,
            &self.target_table,
            gamma,
            &self.cfg,
            rng,
        )
    }

    fn sync_target(&mut self) -> Result<()> {
        self.target_encoder = self.params.encoder.snapshot();
        self.target_table = proto_embed::<ChaCha8Rng>(
            &self.target_encoder,
            &self.index,
            &self.params.fallback,
            EmbedMode::Eval,
        )?;
        Ok(())
    }

    fn space(&self) -> ActionSpace {
        self.space
    }
}

/// Frozen encoder plus an Eval-mode prototype table, computed once.
#[derive(Debug, Clone)]
pub struct ProtoPolicy {
    pub encoder: EncoderParams,
    pub table: PrototypeTable,
    space: ActionSpace,
}

impl ProtoPolicy {
    pub fn new(params: &ProtoParams, index: &SupportIndex, space: ActionSpace) -> Result<Self> {
        let table =
            proto_embed::<ChaCha8Rng>(&params.encoder, index, &params.fallback, EmbedMode::Eval)?;
        Ok(Self {
            encoder: params.encoder.clone(),
            table,
            space,
        })
    }
}

impl GreedyPolicy for ProtoPolicy {
    fn q_values(&self, state: &StateVector) -> Result<Vec<f64>> {
        proto_q(&self.encoder.embed(state.as_slice())?, &self.table)
    }

    fn space(&self) -> ActionSpace {
        self.space
    }
}

/// Greedy evaluation with prototypes pooled once over the whole index.
pub fn eval_proto(
    params: &ProtoParams,
    index: &SupportIndex,
    space: ActionSpace,
    goals: &[&UserGoal],
    sim_cfg: &SimConfig,
    seed: u64,
) -> Result<Metrics> {
    let policy = ProtoPolicy::new(params, index, space)?;
    evaluate_policy(&policy, goals, sim_cfg, seed)
}

/// Trains a fresh prototypical Q network on the corpus's train split.
pub fn train_proto(
    corpus: &Corpus,
    sim_cfg: &SimConfig,
    train_cfg: &TrainConfig,
    proto_cfg: &ProtoConfig,
    model: &ModelConfig,
) -> Result<(ProtoAgent, TrainingLog)> {
    let space = ActionSpace::from(&corpus.vocab);
    let index = SupportIndex::from_corpus(corpus, sim_cfg.max_turns, proto_cfg.order)?;
    let params = ProtoParams::init(
        state_dim(space.n_symptoms, sim_cfg.max_turns),
        model,
        space.len(),
        train_cfg.seed,
    );
    let mut agent = ProtoAgent::new(params, index, space, proto_cfg.clone(), train_cfg)?;
    let goals: Vec<_> = corpus.train_goals().collect();
    let log = train_loop(&mut agent, &goals, sim_cfg, train_cfg)?;
    Ok((agent, log))
}
