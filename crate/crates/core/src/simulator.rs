//! Rule-based patient simulator with reply noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Finding, UserGoal};
use crate::state::{initial_state, AgentAction, DialogState, StateError, UserActionKind};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("episode already finished")]
    Finished,
    #[error("Initiate cannot be stepped")]
    Initiate,
    #[error("disease index {0} out of range")]
    DiseaseOutOfRange(usize),
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub noise: f64,
    pub max_turns: usize,
    pub success_reward: f64,
    pub failure_reward: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise: 0.0,
            max_turns: 44,
            success_reward: 20.0,
            failure_reward: 0.0,
        }
    }
}

impl SimConfig {
    pub fn with_noise(noise: f64) -> Self {
        Self {
            noise,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(SimError::Config(format!("noise {} not in [0, 1]", self.noise)));
        }
        if self.max_turns == 0 {
            return Err(SimError::Config("max_turns must be at least 1".into()));
        }
        if !self.success_reward.is_finite() || !self.failure_reward.is_finite() {
            return Err(SimError::Config("rewards must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ongoing,
    Success,
    WrongDiagnosis,
    TurnLimit,
}

/// The reply the annotation dictates, ignoring noise.
pub fn truthful_reply(goal: &UserGoal, symptom: usize) -> UserActionKind {
    match goal.finding(symptom) {
        Some(Finding::Present) => UserActionKind::Confirm,
        Some(Finding::Absent) => UserActionKind::Deny,
        None => UserActionKind::NotSure,
    }
}

const REPLIES: [UserActionKind; 3] = [
    UserActionKind::Confirm,
    UserActionKind::Deny,
    UserActionKind::NotSure,
];

/// Patient reply to an inquiry. With probability `noise` the reply is drawn
/// uniformly from Confirm/Deny/NotSure instead of read from the annotation.
/// At `noise == 0` the rng is never touched.
pub fn respond<R: Rng + ?Sized>(
    goal: &UserGoal,
    symptom: usize,
    rng: &mut R,
    noise: f64,
) -> UserActionKind {
    if noise > 0.0 && rng.gen::<f64>() < noise {
        REPLIES[rng.gen_range(0..REPLIES.len())]
    } else {
        truthful_reply(goal, symptom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// `None` once the episode is over.
    pub next_state: Option<DialogState>,
    pub user_action: Option<UserActionKind>,
    pub reward: f64,
    pub done: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct Episode {
    goal: UserGoal,
    state: DialogState,
    rng: ChaCha8Rng,
    outcome: Outcome,
}

impl Episode {
    pub fn reset(goal: &UserGoal, n_symptoms: usize, seed: u64) -> Result<Self, SimError> {
        let state = initial_state(goal.explicit.iter().map(|(&k, &f)| (k, f)), n_symptoms)?;
        Ok(Self {
            goal: goal.clone(),
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            outcome: Outcome::Ongoing,
        })
    }

    pub fn goal(&self) -> &UserGoal {
        &self.goal
    }

    pub fn state(&self) -> &DialogState {
        &self.state
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn finished(&self) -> bool {
        self.outcome != Outcome::Ongoing
    }

    pub fn step(&mut self, action: AgentAction, cfg: &SimConfig) -> Result<StepResult, SimError> {
        if self.finished() {
            return Err(SimError::Finished);
        }
        match action {
            AgentAction::Initiate => Err(SimError::Initiate),
            AgentAction::RequestSymptom(k) => {
                if k >= self.state.slots.len() {
                    return Err(StateError::SymptomOutOfRange(k).into());
                }
                let user = respond(&self.goal, k, &mut self.rng, cfg.noise);
                let next = self.state.apply_turn(action, user)?;
                self.state = next;
                if self.state.turn >= cfg.max_turns {
                    self.outcome = Outcome::TurnLimit;
                    Ok(StepResult {
                        next_state: None,
                        user_action: Some(user),
                        reward: cfg.failure_reward,
                        done: true,
                        outcome: Outcome::TurnLimit,
                    })
                } else {
                    Ok(StepResult {
                        next_state: Some(self.state.clone()),
                        user_action: Some(user),
                        reward: 0.0,
                        done: false,
                        outcome: Outcome::Ongoing,
                    })
                }
            }
            AgentAction::InformDisease(d) => {
                let (reward, outcome) = if d == self.goal.disease {
                    (cfg.success_reward, Outcome::Success)
                } else {
                    (cfg.failure_reward, Outcome::WrongDiagnosis)
                };
                self.outcome = outcome;
                Ok(StepResult {
                    next_state: None,
                    user_action: None,
                    reward,
                    done: true,
                    outcome,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::state::SlotStatus;
    use indexmap::IndexMap;

    fn goal() -> UserGoal {
        UserGoal {
            id: "g".into(),
            disease: 1,
            explicit: IndexMap::from([(0, Finding::Present)]),
            implicit: IndexMap::from([(1, Finding::Present), (2, Finding::Absent)]),
            split: Split::Train,
        }
    }

    #[test]
    fn noiseless_replies_follow_annotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = goal();
        assert_eq!(respond(&g, 1, &mut rng, 0.0), UserActionKind::Confirm);
        assert_eq!(respond(&g, 2, &mut rng, 0.0), UserActionKind::Deny);
        assert_eq!(respond(&g, 3, &mut rng, 0.0), UserActionKind::NotSure);
    }

    #[test]
    fn full_noise_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = goal();
        let mut counts = [0usize; 4];
        let n = 30_000;
        for _ in 0..n {
            counts[respond(&g, 1, &mut rng, 1.0) as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn reset_and_seeds() {
        let ep = Episode::reset(&goal(), 50, 3).unwrap();
        assert_eq!(ep.state().turn, 0);
        assert!(!ep.finished());

        let cfg = SimConfig::with_noise(0.5);
        let run = |seed| {
            let mut ep = Episode::reset(&goal(), 50, seed).unwrap();
            (1..20)
                .map(|k| ep.step(AgentAction::RequestSymptom(k), &cfg).unwrap().user_action)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));

        let quiet = SimConfig::default();
        let run0 = |seed| {
            let mut ep = Episode::reset(&goal(), 50, seed).unwrap();
            (1..20)
                .map(|k| ep.step(AgentAction::RequestSymptom(k), &quiet).unwrap().user_action)
                .collect::<Vec<_>>()
        };
        assert_eq!(run0(1), run0(2));
    }

    #[test]
    fn inform_rewards() {
        let cfg = SimConfig::default();
        let mut ep = Episode::reset(&goal(), 3, 0).unwrap();
        let r = ep.step(AgentAction::InformDisease(1), &cfg).unwrap();
        assert_eq!((r.reward, r.outcome, r.done), (20.0, Outcome::Success, true));
        assert_eq!(
            ep.step(AgentAction::InformDisease(1), &cfg),
            Err(SimError::Finished)
        );
        let mut ep = Episode::reset(&goal(), 3, 0).unwrap();
        let r = ep.step(AgentAction::InformDisease(0), &cfg).unwrap();
        assert_eq!((r.reward, r.outcome), (0.0, Outcome::WrongDiagnosis));
    }

    #[test]
    fn turn_limit_at_44() {
        let cfg = SimConfig::default();
        let mut ep = Episode::reset(&goal(), 60, 0).unwrap();
        for k in 1..44 {
            let r = ep.step(AgentAction::RequestSymptom(k), &cfg).unwrap();
            assert!(!r.done, "ended early at step {k}");
        }
        let r = ep.step(AgentAction::RequestSymptom(44), &cfg).unwrap();
        assert!(r.done);
        assert_eq!(r.outcome, Outcome::TurnLimit);
        assert_eq!(r.reward, 0.0);
        assert_eq!(ep.state().turn, 44);
    }

    #[test]
    fn reinquiry_surfaces_state_error() {
        let cfg = SimConfig::default();
        let mut ep = Episode::reset(&goal(), 3, 0).unwrap();
        assert_eq!(
            ep.step(AgentAction::RequestSymptom(0), &cfg),
            Err(SimError::State(StateError::ReInquiry(0)))
        );
        assert_eq!(ep.step(AgentAction::Initiate, &cfg), Err(SimError::Initiate));
        ep.step(AgentAction::RequestSymptom(2), &cfg).unwrap();
        assert_eq!(ep.state().slots[2], SlotStatus::Denied);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::with_noise(1.5).validate().is_err());
        assert!(SimConfig {
            max_turns: 0,
            ..SimConfig::default()
        }
        .validate()
        .is_err());
        assert!(SimConfig::default().validate().is_ok());
    }
}
