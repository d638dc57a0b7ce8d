//! Structured dialog state and its fixed numeric encoding.
//!
//! The encoded vector is `[user one-hot (4) | agent-kind one-hot (3) |
//! turn one-hot (max_turns + 1) | slot codes (|symptoms|)]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Finding, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("self-report must contain at least one symptom")]
    EmptyExplicit,
    #[error("symptom {0} already inquired")]
    ReInquiry(usize),
    #[error("symptom index {0} out of range")]
    SymptomOutOfRange(usize),
    #[error("user cannot issue a Request mid-dialog")]
    RequestMidDialog,
    #[error("only symptom requests advance the dialog state")]
    NotARequest,
    #[error("turn {turn} exceeds max_turns {max_turns}")]
    TurnOutOfRange { turn: usize, max_turns: usize },
    #[error("action index {index} out of range for {size} actions")]
    ActionOutOfRange { index: usize, size: usize },
    #[error("Initiate is not a policy action")]
    InitiateNotIndexable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UserActionKind {
    Request,
    Confirm,
    Deny,
    NotSure,
}

impl UserActionKind {
    pub const ALL: [UserActionKind; 4] = [
        UserActionKind::Request,
        UserActionKind::Confirm,
        UserActionKind::Deny,
        UserActionKind::NotSure,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentAction {
    Initiate,
    RequestSymptom(usize),
    InformDisease(usize),
}

impl AgentAction {
    fn kind_slot(self) -> usize {
        match self {
            AgentAction::Initiate => 0,
            AgentAction::RequestSymptom(_) => 1,
            AgentAction::InformDisease(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotStatus {
    NotInquired,
    Confirmed,
    Denied,
    Unrelated,
}

impl SlotStatus {
    pub fn code(self) -> f64 {
        match self {
            SlotStatus::NotInquired => 0.0,
            SlotStatus::Confirmed => 1.0,
            SlotStatus::Denied => -1.0,
            SlotStatus::Unrelated => -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DialogState {
    pub turn: usize,
    pub last_user: UserActionKind,
    pub last_agent: AgentAction,
    pub slots: Vec<SlotStatus>,
}

/// Dialog state right after the patient's self-report.
pub fn initial_state<I>(explicit: I, n_symptoms: usize) -> Result<DialogState, StateError>
where
    I: IntoIterator<Item = (usize, Finding)>,
{
    let mut slots = vec![SlotStatus::NotInquired; n_symptoms];
    let mut any = false;
    for (k, finding) in explicit {
        let slot = slots.get_mut(k).ok_or(StateError::SymptomOutOfRange(k))?;
        *slot = match finding {
            Finding::Present => SlotStatus::Confirmed,
            Finding::Absent => SlotStatus::Denied,
        };
        any = true;
    }
    if !any {
        return Err(StateError::EmptyExplicit);
    }
    Ok(DialogState {
        turn: 0,
        last_user: UserActionKind::Request,
        last_agent: AgentAction::Initiate,
        slots,
    })
}

impl DialogState {
    /// State after the agent asks about a symptom and the user replies.
    pub fn apply_turn(
        &self,
        agent: AgentAction,
        user: UserActionKind,
    ) -> Result<DialogState, StateError> {
        let AgentAction::RequestSymptom(k) = agent else {
            return Err(StateError::NotARequest);
        };
        let current = *self.slots.get(k).ok_or(StateError::SymptomOutOfRange(k))?;
        if current != SlotStatus::NotInquired {
            return Err(StateError::ReInquiry(k));
        }
        let status = match user {
            UserActionKind::Confirm => SlotStatus::Confirmed,
            UserActionKind::Deny => SlotStatus::Denied,
            UserActionKind::NotSure => SlotStatus::Unrelated,
            UserActionKind::Request => return Err(StateError::RequestMidDialog),
        };
        let mut next = self.clone();
        next.slots[k] = status;
        next.turn += 1;
        next.last_agent = agent;
        next.last_user = user;
        Ok(next)
    }

    pub fn encode(&self, max_turns: usize) -> Result<StateVector, StateError> {
        encode_state(self, max_turns)
    }
}

/// Numeric network input for one dialog state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub const USER_BLOCK: usize = 4;
pub const AGENT_BLOCK: usize = 3;

pub fn state_dim(n_symptoms: usize, max_turns: usize) -> usize {
    USER_BLOCK + AGENT_BLOCK + (max_turns + 1) + n_symptoms
}

pub fn encode_state(state: &DialogState, max_turns: usize) -> Result<StateVector, StateError> {
    if state.turn > max_turns {
        return Err(StateError::TurnOutOfRange {
            turn: state.turn,
            max_turns,
        });
    }
    let mut v = vec![0.0; state_dim(state.slots.len(), max_turns)];
    v[state.last_user.slot()] = 1.0;
    v[USER_BLOCK + state.last_agent.kind_slot()] = 1.0;
    let turn_base = USER_BLOCK + AGENT_BLOCK;
    v[turn_base + state.turn] = 1.0;
    let slot_base = turn_base + max_turns + 1;
    for (dst, s) in v[slot_base..].iter_mut().zip(&state.slots) {
        *dst = s.code();
    }
    Ok(StateVector(v))
}

/// The discrete policy action space: one request per symptom, then one
/// inform per disease.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub n_symptoms: usize,
    pub n_diseases: usize,
}

impl From<&Vocabulary> for ActionSpace {
    fn from(v: &Vocabulary) -> Self {
        ActionSpace {
            n_symptoms: v.n_symptoms(),
            n_diseases: v.n_diseases(),
        }
    }
}

impl ActionSpace {
    pub fn len(&self) -> usize {
        self.n_symptoms + self.n_diseases
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, action: AgentAction) -> Result<usize, StateError> {
        match action {
            AgentAction::Initiate => Err(StateError::InitiateNotIndexable),
            AgentAction::RequestSymptom(k) if k < self.n_symptoms => Ok(k),
            AgentAction::InformDisease(d) if d < self.n_diseases => Ok(self.n_symptoms + d),
            AgentAction::RequestSymptom(k) => Err(StateError::ActionOutOfRange {
                index: k,
                size: self.n_symptoms,
            }),
            AgentAction::InformDisease(d) => Err(StateError::ActionOutOfRange {
                index: d,
                size: self.n_diseases,
            }),
        }
    }

    pub fn action(&self, index: usize) -> Result<AgentAction, StateError> {
        if index < self.n_symptoms {
            Ok(AgentAction::RequestSymptom(index))
        } else if index < self.len() {
            Ok(AgentAction::InformDisease(index - self.n_symptoms))
        } else {
            Err(StateError::ActionOutOfRange {
                index,
                size: self.len(),
            })
        }
    }

    /// Legal actions in `state`: symptoms not yet inquired, and every disease.
    pub fn mask(&self, state: &DialogState) -> Vec<bool> {
        state
            .slots
            .iter()
            .map(|s| *s == SlotStatus::NotInquired)
            .chain(std::iter::repeat(true).take(self.n_diseases))
            .collect()
    }
}

pub fn action_index(action: AgentAction, vocab: &Vocabulary) -> Result<usize, StateError> {
    ActionSpace::from(vocab).index(action)
}

pub fn index_action(index: usize, vocab: &Vocabulary) -> Result<AgentAction, StateError> {
    ActionSpace::from(vocab).action(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    use SlotStatus::*;

    fn start() -> DialogState {
        initial_state([(0, Finding::Present)], 3).unwrap()
    }

    #[test]
    fn initial_state_from_self_report() {
        let s = start();
        assert_eq!(s.slots, vec![Confirmed, NotInquired, NotInquired]);
        assert_eq!(s.turn, 0);
        assert_eq!(s.last_user, UserActionKind::Request);
        assert_eq!(s.last_agent, AgentAction::Initiate);

        let s = initial_state([(0, Finding::Present), (1, Finding::Absent)], 3).unwrap();
        assert_eq!(s.slots, vec![Confirmed, Denied, NotInquired]);

        assert_eq!(
            initial_state(std::iter::empty(), 3),
            Err(StateError::EmptyExplicit)
        );
    }

    #[test]
    fn turns_update_one_slot() {
        let s = start();
        let a = s
            .apply_turn(AgentAction::RequestSymptom(1), UserActionKind::Confirm)
            .unwrap();
        assert_eq!(a.turn, 1);
        assert_eq!(a.slots, vec![Confirmed, Confirmed, NotInquired]);
        let b = s
            .apply_turn(AgentAction::RequestSymptom(2), UserActionKind::NotSure)
            .unwrap();
        assert_eq!(b.slots, vec![Confirmed, NotInquired, Unrelated]);
        // value semantics
        assert_eq!(s, start());
        assert_eq!(
            s.apply_turn(AgentAction::RequestSymptom(0), UserActionKind::Deny),
            Err(StateError::ReInquiry(0))
        );
        assert_eq!(
            s.apply_turn(AgentAction::RequestSymptom(1), UserActionKind::Request),
            Err(StateError::RequestMidDialog)
        );
        assert_eq!(
            s.apply_turn(AgentAction::InformDisease(0), UserActionKind::Confirm),
            Err(StateError::NotARequest)
        );
    }

    #[test]
    fn encoding_layout() {
        let s = DialogState {
            turn: 2,
            last_user: UserActionKind::Confirm,
            last_agent: AgentAction::RequestSymptom(1),
            slots: vec![Confirmed, NotInquired, Denied],
        };
        let v = encode_state(&s, 4).unwrap();
        assert_eq!(
            v.0,
            vec![
                0., 1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 1., 0., -1.
            ]
        );
        let v0 = encode_state(&start(), 4).unwrap();
        assert_eq!(&v0.0[..7], &[1., 0., 0., 0., 1., 0., 0.]);
        assert_eq!(v0.0[7], 1.0);
        assert_eq!(state_dim(66, 44), 118);
        let late = DialogState { turn: 5, ..s };
        assert!(encode_state(&late, 4).is_err());
    }

    #[test]
    fn action_indexing() {
        let space = ActionSpace {
            n_symptoms: 66,
            n_diseases: 4,
        };
        assert_eq!(space.index(AgentAction::RequestSymptom(0)), Ok(0));
        assert_eq!(space.action(0), Ok(AgentAction::RequestSymptom(0)));
        assert_eq!(space.index(AgentAction::InformDisease(0)), Ok(66));
        assert_eq!(space.action(69), Ok(AgentAction::InformDisease(3)));
        assert!(space.action(70).is_err());
        assert_eq!(
            space.index(AgentAction::Initiate),
            Err(StateError::InitiateNotIndexable)
        );
        for i in 0..space.len() {
            assert_eq!(space.index(space.action(i).unwrap()), Ok(i));
        }
    }

    #[test]
    fn mask_blocks_inquired_symptoms() {
        let space = ActionSpace {
            n_symptoms: 3,
            n_diseases: 2,
        };
        assert_eq!(space.mask(&start()), vec![false, true, true, true, true]);
    }

    // Every reachable state over 3 symptoms with max_turns 3.
    fn enumerate(max_turns: usize) -> Vec<DialogState> {
        let n = 3;
        let mut out = Vec::new();
        let findings = [None, Some(Finding::Present), Some(Finding::Absent)];
        let mut frontier = Vec::new();
        for a in findings {
            for b in findings {
                for c in findings {
                    let explicit: Vec<_> = [a, b, c]
                        .iter()
                        .enumerate()
                        .filter_map(|(k, f)| f.map(|f| (k, f)))
                        .collect();
                    if let Ok(s) = initial_state(explicit, n) {
                        frontier.push(s);
                    }
                }
            }
        }
        while let Some(s) = frontier.pop() {
            if s.turn < max_turns {
                for k in 0..n {
                    for u in [
                        UserActionKind::Confirm,
                        UserActionKind::Deny,
                        UserActionKind::NotSure,
                    ] {
                        if let Ok(next) = s.apply_turn(AgentAction::RequestSymptom(k), u) {
                            frontier.push(next);
                        }
                    }
                }
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn encoding_is_injective_on_reachable_states() {
        // The agent block records only the action kind, so states that differ
        // solely in which symptom was last requested share an encoding. The
        // encoding must separate everything else.
        let states: HashSet<DialogState> = enumerate(3).into_iter().collect();
        let mut seen = HashMap::new();
        for s in &states {
            let bits: Vec<u64> = encode_state(s, 3)
                .unwrap()
                .0
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let content = (s.turn, s.last_user, s.last_agent.kind_slot(), s.slots.clone());
            if let Some(prev) = seen.insert(bits, content.clone()) {
                assert_eq!(prev, content, "collision for {s:?}");
            }
        }
        assert!(states.len() > 100);
    }

    proptest! {
        #[test]
        fn turn_advances_by_one_and_touches_one_slot(
            n in 1usize..10, first in 0usize..10, pick in 0usize..10, reply in 1usize..4
        ) {
            let first = first % n;
            let s = initial_state([(first, Finding::Present)], n).unwrap();
            let k = pick % n;
            let user = UserActionKind::ALL[reply];
            match s.apply_turn(AgentAction::RequestSymptom(k), user) {
                Ok(next) => {
                    prop_assert_eq!(next.turn, s.turn + 1);
                    let changed = s.slots.iter().zip(&next.slots).filter(|(a, b)| a != b).count();
                    prop_assert_eq!(changed, 1);
                }
                Err(e) => prop_assert_eq!(e, StateError::ReInquiry(k)),
            }
        }
    }
}
