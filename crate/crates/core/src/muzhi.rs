//! Adapter for the public Muzhi annotation dump.
//!
//! The expected input is the JSON form of the released goal set:
//! `{"train": [record, ...], "test": [record, ...]}` where each record is
//!
//! ```json
//! {"consult_id": 10001, "disease_tag": "...",
//!  "goal": {"explicit_inform_slots": {"<symptom>": true},
//!           "implicit_inform_slots": {"<symptom>": false}}}
//! ```
//!
//! Boolean `false` becomes an Absent finding. Symptoms never annotated for a
//! goal are left unrelated. Vocabulary names are sorted so the action space
//! is stable across conversions.

use std::collections::{BTreeSet, HashSet};

use indexmap::IndexMap;
use serde::Deserialize;

use crate::corpus::{validate_corpus, Corpus, CorpusError, Finding, Split, UserGoal, Vocabulary};

#[derive(Deserialize)]
struct Dump {
    train: Vec<Record>,
    test: Vec<Record>,
}

#[derive(Deserialize)]
struct Record {
    consult_id: serde_json::Value,
    disease_tag: String,
    goal: Slots,
}

#[derive(Deserialize)]
struct Slots {
    #[serde(default)]
    explicit_inform_slots: IndexMap<String, serde_json::Value>,
    #[serde(default)]
    implicit_inform_slots: IndexMap<String, serde_json::Value>,
}

/// Result of a conversion plus notes on records that needed repair.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub corpus: Corpus,
    pub notes: Vec<String>,
}

fn finding(v: &serde_json::Value) -> Option<Finding> {
    match v {
        serde_json::Value::Bool(true) => Some(Finding::Present),
        serde_json::Value::Bool(false) => Some(Finding::Absent),
        // Some dumps use "UNK" / null for uncertain slots; those carry no finding.
        _ => None,
    }
}

pub fn convert_muzhi(text: &str) -> Result<Conversion, CorpusError> {
    let dump: Dump =
        serde_json::from_str(text).map_err(|source| CorpusError::Json { line: 1, source })?;
    let all = || {
        dump.train
            .iter()
            .map(|r| (r, Split::Train))
            .chain(dump.test.iter().map(|r| (r, Split::Test)))
    };

    let mut symptoms = BTreeSet::new();
    let mut diseases = BTreeSet::new();
    for (r, _) in all() {
        diseases.insert(r.disease_tag.clone());
        for (name, v) in r.goal.explicit_inform_slots.iter().chain(&r.goal.implicit_inform_slots) {
            if finding(v).is_some() {
                symptoms.insert(name.clone());
            }
        }
    }
    let vocab = Vocabulary::new(symptoms.into_iter().collect(), diseases.into_iter().collect())?;

    let mut notes = Vec::new();
    let mut seen = HashSet::new();
    let mut goals = Vec::new();
    for (r, split) in all() {
        let base = match &r.consult_id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let mut id = base.clone();
        let mut n = 1;
        while !seen.insert(id.clone()) {
            n += 1;
            id = format!("{base}-{n}");
        }
        if n > 1 {
            notes.push(format!("duplicate consult_id {base} renamed to {id}"));
        }
        let resolve = |slots: &IndexMap<String, serde_json::Value>| {
            slots
                .iter()
                .filter_map(|(name, v)| Some((vocab.symptom(name)?, finding(v)?)))
                .collect::<IndexMap<usize, Finding>>()
        };
        let explicit = resolve(&r.goal.explicit_inform_slots);
        let mut implicit = resolve(&r.goal.implicit_inform_slots);
        implicit.retain(|k, _| {
            let dup = explicit.contains_key(k);
            if dup {
                notes.push(format!(
                    "goal {id}: {} in both explicit and implicit slots, kept explicit",
                    vocab.symptoms()[*k]
                ));
            }
            !dup
        });
        if !explicit.values().any(|f| *f == Finding::Present) {
            notes.push(format!("goal {id}: no present explicit symptom, skipped"));
            continue;
        }
        goals.push(UserGoal {
            id,
            disease: vocab.disease(&r.disease_tag).expect("disease collected above"),
            explicit,
            implicit,
            split,
        });
    }

    let corpus = Corpus { vocab, goals };
    let report = validate_corpus(&corpus);
    if !report.errors.is_empty() {
        return Err(CorpusError::Invalid(
            report.errors.iter().map(ToString::to_string).collect(),
        ));
    }
    Ok(Conversion { corpus, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;

    const SAMPLE: &str = r#"{
      "train": [
        {"consult_id": 1, "disease_tag": "flu",
         "goal": {"request_slots": {"disease": "UNK"},
                  "explicit_inform_slots": {"fever": true},
                  "implicit_inform_slots": {"cough": true, "rash": false}}},
        {"consult_id": 2, "disease_tag": "measles",
         "goal": {"explicit_inform_slots": {"rash": true, "fever": true},
                  "implicit_inform_slots": {"fever": false}}}
      ],
      "test": [
        {"consult_id": 1, "disease_tag": "flu",
         "goal": {"explicit_inform_slots": {"cough": true},
                  "implicit_inform_slots": {"sneeze": "UNK"}}},
        {"consult_id": 9, "disease_tag": "flu",
         "goal": {"explicit_inform_slots": {"cough": false}}}
      ]
    }"#;

    #[test]
    fn converts_and_repairs() {
        let c = convert_muzhi(SAMPLE).unwrap();
        let v = &c.corpus.vocab;
        assert_eq!(v.symptoms(), ["cough", "fever", "rash"]);
        assert_eq!(v.diseases(), ["flu", "measles"]);
        assert_eq!(c.corpus.goals.len(), 3);
        assert_eq!(c.corpus.split_counts(), (2, 1));

        let g = &c.corpus.goals[0];
        assert_eq!(g.id, "1");
        assert_eq!(g.finding(0), Some(Finding::Present));
        assert_eq!(g.finding(2), Some(Finding::Absent));
        assert!(c.corpus.goals[1].implicit.is_empty());
        assert_eq!(c.corpus.goals[2].id, "1-2");
        assert_eq!(c.notes.len(), 3);

        let again = load_corpus(&c.corpus.vocab_json(), &c.corpus.goals_jsonl()).unwrap();
        assert_eq!(again, c.corpus);
    }

    #[test]
    fn rejects_garbage() {
        assert!(convert_muzhi("[1,2]").is_err());
    }
}
