//! Interactive session where a person plays the patient.

use std::io::{BufRead, Write};

use protodiag::corpus::{Finding, Vocabulary};
use protodiag::experiments::GreedyPolicy;
use protodiag::rl::greedy;
use protodiag::state::{initial_state, AgentAction, DialogState, SlotStatus, UserActionKind};

use crate::CliError;

/// How a chat ended.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatSummary {
    pub explicit: Vec<usize>,
    pub actions: Vec<usize>,
    pub diagnosis: Option<usize>,
    pub turns: usize,
    pub final_state: DialogState,
}

/// Up to three vocabulary names closest to `name` by edit distance.
pub fn nearest_names<'a>(name: &str, names: &'a [String]) -> Vec<&'a str> {
    let mut scored: Vec<(f64, &str)> = names
        .iter()
        .map(|n| (strsim::normalized_levenshtein(name, n), n.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, n)| n).collect()
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String, CliError> {
    let mut line = String::new();
    let n = input
        .read_line(&mut line)
        .map_err(|e| CliError::Runtime(format!("reading input: {e}")))?;
    if n == 0 {
        return Err(CliError::Runtime("input closed before the dialog finished".into()));
    }
    Ok(line.trim().to_string())
}

fn status_word(s: SlotStatus) -> &'static str {
    match s {
        SlotStatus::NotInquired => "not asked",
        SlotStatus::Confirmed => "yes",
        SlotStatus::Denied => "no",
        SlotStatus::Unrelated => "unrelated",
    }
}

fn ask_symptoms<R: BufRead, W: Write>(
    vocab: &Vocabulary,
    input: &mut R,
    out: &mut W,
) -> Result<Vec<usize>, CliError> {
    loop {
        say(out, "Which symptoms do you have? (comma-separated)")?;
        let line = read_line(input)?;
        let names: Vec<&str> = line
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            continue;
        }
        let mut found = Vec::new();
        let mut unknown = false;
        for name in names {
            match vocab.symptom(name) {
                Some(k) if !found.contains(&k) => found.push(k),
                Some(_) => {}
                None => {
                    unknown = true;
                    let near = nearest_names(name, vocab.symptoms());
                    say(
                        out,
                        &format!("Unknown symptom {name:?}. Did you mean: {}?", near.join(", ")),
                    )?;
                }
            }
        }
        if !unknown {
            return Ok(found);
        }
    }
}

fn say<W: Write>(out: &mut W, text: &str) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::Runtime(format!("writing output: {e}")))
}

/// Runs one dialog: the person lists their symptoms, the policy asks
/// questions answered with y/n/u, and the session ends with a diagnosis or
/// at the turn limit.
pub fn run_chat<P, R, W>(
    policy: &P,
    vocab: &Vocabulary,
    max_turns: usize,
    input: &mut R,
    out: &mut W,
) -> Result<ChatSummary, CliError>
where
    P: GreedyPolicy + ?Sized,
    R: BufRead,
    W: Write,
{
    let space = policy.space();
    let explicit = ask_symptoms(vocab, input, out)?;
    let mut state = initial_state(explicit.iter().map(|&k| (k, Finding::Present)), space.n_symptoms)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut actions = Vec::new();
    let runtime = |e: protodiag::Error| CliError::Runtime(e.to_string());
    loop {
        let sv = state
            .encode(max_turns)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let q = policy.q_values(&sv).map_err(runtime)?;
        let a = greedy(&q, &space.mask(&state))
            .ok_or_else(|| CliError::Runtime("no legal action".into()))?;
        actions.push(a);
        match space.action(a).map_err(|e| CliError::Runtime(e.to_string()))? {
            AgentAction::InformDisease(d) => {
                say(
                    out,
                    &format!(
                        "Diagnosis: {} (after {} question{})",
                        vocab.diseases()[d],
                        state.turn,
                        if state.turn == 1 { "" } else { "s" }
                    ),
                )?;
                return Ok(ChatSummary {
                    explicit,
                    actions,
                    diagnosis: Some(d),
                    turns: state.turn,
                    final_state: state,
                });
            }
            AgentAction::RequestSymptom(k) => {
                let name = &vocab.symptoms()[k];
                let user = loop {
                    say(out, &format!("Do you have {name}? [y/n/u]"))?;
                    match read_line(input)?.to_ascii_lowercase().as_str() {
                        "y" | "yes" => break UserActionKind::Confirm,
                        "n" | "no" => break UserActionKind::Deny,
                        "u" | "unsure" => break UserActionKind::NotSure,
                        _ => {}
                    }
                };
                state = state
                    .apply_turn(AgentAction::RequestSymptom(k), user)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                say(out, &format!("  {name}: {}", status_word(state.slots[k])))?;
                if state.turn >= max_turns {
                    say(out, &format!("Turn limit of {max_turns} reached without a diagnosis."))?;
                    return Ok(ChatSummary {
                        explicit,
                        actions,
                        diagnosis: None,
                        turns: state.turn,
                        final_state: state,
                    });
                }
            }
            AgentAction::Initiate => unreachable!("Initiate is not an indexable action"),
        }
    }
}
