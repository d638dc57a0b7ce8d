//! Dialog-policy lab for symptom-inquiry diagnosis: a noisy patient
//! simulator, a from-scratch dense encoder, a baseline DQN and a
//! prototypical Q network, plus supervised and few-shot experiment drivers.

pub mod corpus;
pub mod dqn;
pub mod experiments;
pub mod muzhi;
pub mod nn;
pub mod proto;
pub mod rl;
pub mod seeding;
pub mod simulator;
pub mod state;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    State(#[from] state::StateError),
    #[error(transparent)]
    Sim(#[from] simulator::SimError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every action is masked")]
    AllMasked,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("no training goals")]
    NoTrainingGoals,
    #[error("no evaluation goals")]
    NoEvalGoals,
    #[error("few-shot: {0}")]
    FewShot(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
